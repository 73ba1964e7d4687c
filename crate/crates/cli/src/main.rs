use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rtgs_cli::config::{resolve, RunManifest, SceneJob, SequenceJob, SimJob};
use rtgs_cli::{gen_scene_cmd, gen_seq_cmd, run_cmd, sim_cmd, sweep_cmd, Failure};

/// Gaussian-splatting SLAM harness and accelerator simulator.
///
/// Every subcommand takes `--config <file>` (lines of `key = value`) followed
/// by `--<field> <value>` overrides. Field names match the config structs
/// verbatim; a dotted suffix such as `toggles.gmu` disambiguates.
#[derive(Parser)]
#[command(name = "rtgs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pseudo-random Gaussians in a box, written as GSCENE.
    GenScene(Job),
    /// Rendered RGB-D frames plus a ground-truth pose manifest.
    GenSeq(Job),
    /// Tracking and mapping, trace capture, simulation and quality gates.
    Run(Job),
    /// Cycle reports for GTRACE files or a built-in trace suite.
    Sim(Job),
    /// 16-combination toggle ablation.
    Sweep(Job),
}

#[derive(Args)]
struct Job {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--<field> <value>` or `--<field>=<value>` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("RTGS_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Input(format!("RTGS_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Internal(e.to_string()))
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    init_threads()?;
    match cmd {
        Command::GenScene(j) => gen_scene_cmd(&resolve::<SceneJob>(j.config.as_deref(), &j.overrides)?),
        Command::GenSeq(j) => {
            let path = gen_seq_cmd(&resolve::<SequenceJob>(j.config.as_deref(), &j.overrides)?)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Run(j) => {
            let out = run_cmd(&resolve::<RunManifest>(j.config.as_deref(), &j.overrides)?)?;
            let r = &out.report;
            println!(
                "ate_rmse {:.6} mean_keyframe_psnr {:.3} final_gaussians {} rendered_pixels {}",
                r.ate_rmse, r.mean_keyframe_psnr, r.final_gaussians, r.total_rendered_pixels
            );
            Ok(())
        }
        Command::Sim(j) => {
            for r in sim_cmd(&resolve::<SimJob>(j.config.as_deref(), &j.overrides)?)? {
                println!("frame {} total_cycles {}", r.frame_id, r.total_cycles);
            }
            Ok(())
        }
        Command::Sweep(j) => {
            for r in sweep_cmd(&resolve::<SimJob>(j.config.as_deref(), &j.overrides)?)? {
                println!("{:04b} total_cycles {} speedup {:.3}", r.toggles().to_bits(), r.total_cycles, r.speedup);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("rtgs: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
