//! normint: reconstruct a triangle mesh from posed surface-normal maps by
//! optimizing a hash-encoded neural SDF under volume rendering.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input, 3 training
//! divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use normint_core::pipeline::{
    self, BenchOptions, EvalOptions, RenderOptions, SynthOptions, TrainOptions,
};
use normint_core::scene::Severity;
use normint_core::{Error, Result};

#[derive(Parser)]
#[command(name = "normint", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (normal maps, masks, cameras, gt mesh).
    Synth(SynthArgs),
    /// Optimize a neural SDF against a scene and extract its mesh.
    Train(TrainArgs),
    /// Render normal maps of a trained field for selected views.
    RenderNormals(RenderArgs),
    /// Chamfer distance and F-score of a mesh against ground truth.
    Eval(EvalArgs),
    /// Compare the gradient backends on identical training workloads.
    BenchGrad(BenchArgs),
    /// Check a scene directory against the format invariants.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Shape to render: sphere, torus or union.
    #[arg(long, default_value = "sphere")]
    shape: String,
    #[arg(long, default_value_t = 20)]
    views: usize,
    /// Image size as WxH.
    #[arg(long, default_value = "128x128")]
    res: String,
    /// Angular noise sigma applied to normals, degrees.
    #[arg(long, default_value_t = 0.0)]
    noise_deg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add a second camera ring at this elevation (degrees).
    #[arg(long)]
    second_ring: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Gradient backend: dfd, fd or ad.
    #[arg(long, default_value = "dfd")]
    grad_mode: String,
    #[arg(long, default_value_t = 5000)]
    batches: usize,
    #[arg(long, default_value_t = 2048)]
    patches: usize,
    /// Patch edge length in pixels.
    #[arg(long, default_value_t = 3)]
    patch: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    step_start: f64,
    #[arg(long, default_value_t = 5e-4)]
    step_end: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Byte-identical outputs across runs (zeroes timing telemetry).
    #[arg(long)]
    deterministic: bool,
    /// Marching-cubes resolution for the exported mesh.
    #[arg(long, default_value_t = 256)]
    mc_res: u32,
    #[arg(long, default_value_t = 14)]
    hash_levels: usize,
    #[arg(long, default_value_t = 2)]
    hash_features: usize,
    #[arg(long, default_value_t = 16)]
    hash_base_res: u32,
    #[arg(long, default_value_t = 2048)]
    hash_finest_res: u32,
    #[arg(long, default_value_t = 19)]
    hash_table_log2: u32,
    #[arg(long, default_value_t = 128)]
    occupancy_res: u32,
    /// CPU-sized preset (512 patches, finest 256, 2^16 tables); explicit
    /// flags still override.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    out: PathBuf,
    /// Print one progress line every N batches (0 = quiet).
    #[arg(long, default_value_t = 0)]
    progress_every: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// vr-dfd, vr-ad, vr-fd or sr-ad.
    #[arg(long, default_value = "vr-dfd")]
    mode: String,
    /// Comma-separated view indices.
    #[arg(long, value_delimiter = ',')]
    views: Vec<usize>,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Ground-truth mesh; defaults to the scene's own gt (mesh or analytic).
    #[arg(long)]
    gt_mesh: Option<PathBuf>,
    #[arg(long, default_value_t = 5e-3)]
    tau: f64,
    /// Average squared distances instead of plain ones.
    #[arg(long)]
    squared: bool,
    /// Write the report JSON here as well as stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 300)]
    batches: usize,
    #[arg(long, default_value_t = 512)]
    patches: usize,
    /// Comma-separated backends to compare.
    #[arg(long, value_delimiter = ',', default_values_t = ["dfd".to_string(), "fd".to_string(), "ad".to_string()])]
    modes: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    scene: PathBuf,
}

fn parse_res(s: &str) -> Result<(u32, u32)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::invalid(format!("resolution '{s}' is not WxH")))?;
    let w = w
        .parse()
        .map_err(|_| Error::invalid(format!("bad width in '{s}'")))?;
    let h = h
        .parse()
        .map_err(|_| Error::invalid(format!("bad height in '{s}'")))?;
    Ok((w, h))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let (width, height) = parse_res(&a.res)?;
            let opts = SynthOptions {
                shape: a.shape,
                views: a.views,
                width,
                height,
                noise_deg: a.noise_deg,
                seed: a.seed,
                second_ring_elevation_deg: a.second_ring,
            };
            pipeline::run_synth(&opts, &a.out)?;
            println!("wrote scene with {} views to {}", opts.views, a.out.display());
            Ok(())
        }
        Command::Train(a) => {
            let desk = TrainOptions::desk();
            let opts = TrainOptions {
                grad_mode: a.grad_mode,
                batches: a.batches,
                patches: if a.desk && a.patches == 2048 { desk.patches } else { a.patches },
                patch: a.patch,
                lr: a.lr,
                step_start: a.step_start,
                step_end: a.step_end,
                seed: a.seed,
                deterministic: a.deterministic,
                mc_res: a.mc_res,
                hash_levels: a.hash_levels,
                hash_features: a.hash_features,
                hash_base_res: a.hash_base_res,
                hash_finest_res: if a.desk && a.hash_finest_res == 2048 {
                    desk.hash_finest_res
                } else {
                    a.hash_finest_res
                },
                hash_table_log2: if a.desk && a.hash_table_log2 == 19 {
                    desk.hash_table_log2
                } else {
                    a.hash_table_log2
                },
                occupancy_res: a.occupancy_res,
            };
            let summary = pipeline::run_train_with_progress(&a.scene, &opts, &a.out, a.progress_every)?;
            println!(
                "trained {} batches; final loss {:.4e}; {} forward SDF evals; mesh {} vertices -> {}",
                summary.batches_run,
                summary.final_loss.unwrap_or(f64::NAN),
                summary.forward_sdf_evals,
                summary.mesh_vertices,
                a.out.display()
            );
            Ok(())
        }
        Command::RenderNormals(a) => {
            if a.views.is_empty() {
                return Err(Error::invalid("--views needs at least one view index"));
            }
            let opts = RenderOptions {
                mode: a.mode,
                views: a.views,
                step: a.step,
            };
            pipeline::run_render(&a.checkpoint, &a.scene, &opts, &a.out)?;
            println!("rendered {} views to {}", opts.views.len(), a.out.display());
            Ok(())
        }
        Command::Eval(a) => {
            let opts = EvalOptions {
                tau: a.tau,
                squared: a.squared,
                ..EvalOptions::default()
            };
            let report = pipeline::run_eval(&a.mesh, &a.scene, a.gt_mesh.as_deref(), &opts)?;
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::internal(e.to_string()))?;
            println!("{text}");
            if let Some(out) = a.out {
                std::fs::write(&out, text + "\n").map_err(|e| Error::io(out.clone(), e))?;
            }
            Ok(())
        }
        Command::BenchGrad(a) => {
            let opts = BenchOptions {
                modes: a.modes,
                batches: a.batches,
                patches: a.patches,
                seed: a.seed,
                ..BenchOptions::default()
            };
            let rows = pipeline::run_bench(&a.scene, &opts, &a.out)?;
            println!("mode     fwd_evals  extra_evals  total_ms   chamfer");
            for r in &rows {
                println!(
                    "{:<8} {:<10} {:<12} {:<10.1} {:.3e}",
                    r.mode, r.forward_evals, r.gradient_extra_evals, r.total_ms, r.chamfer
                );
            }
            println!("csv written to {}", a.out.join("bench_grad.csv").display());
            Ok(())
        }
        Command::Validate(a) => {
            let findings = pipeline::run_validate(&a.scene);
            if findings.is_empty() {
                println!("scene ok: no findings");
                return Ok(());
            }
            for f in &findings {
                let tag = match f.severity {
                    Severity::Error => "ERROR",
                    Severity::Warning => "WARN",
                };
                println!("{tag} [{}] {}", f.code, f.message);
            }
            if findings.iter().any(|f| f.severity == Severity::Error) {
                return Err(Error::invalid(format!(
                    "{} error-level findings",
                    findings
                        .iter()
                        .filter(|f| f.severity == Severity::Error)
                        .count()
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
