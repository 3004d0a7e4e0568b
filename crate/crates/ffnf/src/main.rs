use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use ffnf::bench::{compare_models, wall_clock_bench};
use ffnf::calibration::{generate_calibration, load_calibration};
use ffnf::checkpoint::{load_model, save_model, ConfigDoc};
use ffnf::csvio;
use ffnf::planfile::{self, PlanFile};
use ffnf::IoError;
use ffnf_core::dependency::{
    compute_dependency_matrix, layer_contribution_ratio, layer_direction_metric, CalibrationSet,
};
use ffnf_core::fusion::{
    apply_fusion_plan, forward_with_parallel_ranges, plan_ffn_fusion, remove_ffns,
    reverse_ffn_range, BlockRange, FusionPlan, ScaleMode,
};
use ffnf_core::latency::{analytic_latency, LatencyParams};
use ffnf_core::model::generate_random_model;
use ffnf_core::ops::model_forward;
use ffnf_core::parallel::{apply_block_parallel_plan, greedy_select};
use ffnf_core::rng::SplitMix64;
use ffnf_core::{Matrix, Model, NORM_EPS};

/// FFN fusion toolkit: model generation, analysis, surgery, and latency
/// benchmarking.
#[derive(Parser)]
#[command(name = "ffnf", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random model checkpoint from a JSON config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check fused-model equivalence against the parallel-sum reference.
    VerifyFusion {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with_all = ["auto", "budget", "exclude_last"])]
        plan: Option<PathBuf>,
        /// Build the plan from the model instead of reading one.
        #[arg(long, requires = "budget")]
        auto: bool,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        exclude_last: bool,
        #[arg(long)]
        calib: String,
    },
    /// Compute dependency or per-layer metrics and export them as CSV.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Build a fusion or block-parallel plan file.
    Plan {
        #[command(subcommand)]
        what: PlanCommand,
    },
    /// Apply a fusion plan to a checkpoint.
    Fuse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Delete the FFN (and its norm) at the given block indices.
    Remove {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated block indices.
        #[arg(long)]
        indices: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reverse the block order inside an inclusive range "i:j".
    Reverse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        range: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a block-parallel plan to a checkpoint's stage structure.
    Parallelize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic and wall-clock latency, optionally comparing two models.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Comma-separated k=v pairs: g, t_sync, w_wave, t_tile, n.
        #[arg(long, default_value = "")]
        params: String,
        #[arg(long, env = "FFNF_DEFAULT_WORKERS", default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Block dependency matrix.
    Deps(AnalyzeArgs),
    /// Per-layer direction distance (row 0) and contribution ratio (row 1).
    LayerMetrics(AnalyzeArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum PlanCommand {
    /// Fusion plan over attention-removed FFN runs, under a width budget.
    Ffn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        exclude_last: bool,
        #[arg(long, default_value = "literal")]
        scale_mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Block-parallel plan from a dependency-matrix CSV.
    Blocks {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        deps: PathBuf,
        #[arg(long, default_value_t = 4)]
        w: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &IoError) -> u8 {
    match err {
        IoError::Core(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap already renders full help for --help/--version
            if e.use_stderr() {
                eprintln!("{}", e.render().to_string().lines().next().unwrap_or("bad usage"));
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Resolves a --calib argument: either a file path or a
/// "gen:seed=S,count=C,n=N" pseudo-path (d_e comes from the model).
fn resolve_calibration(spec: &str, d_e: usize) -> Result<CalibrationSet, IoError> {
    if let Some(args) = spec.strip_prefix("gen:") {
        let (mut seed, mut count, mut n) = (0u64, 4usize, 16usize);
        for pair in args.split(',').filter(|p| !p.is_empty()) {
            let Some((k, v)) = pair.split_once('=') else {
                return Err(ffnf_core::Error::InvalidArgument(format!(
                    "calibration spec field {pair:?} is not k=v"
                ))
                .into());
            };
            let parse_err = |k: &str| {
                IoError::from(ffnf_core::Error::InvalidArgument(format!(
                    "bad calibration {k} value {v:?}"
                )))
            };
            match k {
                "seed" => seed = v.parse().map_err(|_| parse_err(k))?,
                "count" => count = v.parse().map_err(|_| parse_err(k))?,
                "n" => n = v.parse().map_err(|_| parse_err(k))?,
                _ => {
                    return Err(ffnf_core::Error::InvalidArgument(format!(
                        "unknown calibration field {k:?}"
                    ))
                    .into())
                }
            }
        }
        generate_calibration(seed, count, n, d_e)
    } else {
        load_calibration(Path::new(spec))
    }
}

fn parse_latency_params(spec: &str) -> Result<LatencyParams, IoError> {
    let mut params = LatencyParams::default();
    for pair in spec.split(',').filter(|p| !p.is_empty()) {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(
                ffnf_core::Error::InvalidArgument(format!("params field {pair:?} is not k=v"))
                    .into(),
            );
        };
        let bad = |k: &str| {
            IoError::from(ffnf_core::Error::InvalidArgument(format!(
                "bad params {k} value {v:?}"
            )))
        };
        match k {
            "g" => params.g = v.parse().map_err(|_| bad(k))?,
            "t_sync" => params.t_sync = v.parse().map_err(|_| bad(k))?,
            "w_wave" => params.w_wave = v.parse().map_err(|_| bad(k))?,
            "t_tile" => params.t_tile = v.parse().map_err(|_| bad(k))?,
            "n" => params.n = v.parse().map_err(|_| bad(k))?,
            _ => {
                return Err(ffnf_core::Error::InvalidArgument(format!(
                    "unknown params field {k:?}"
                ))
                .into())
            }
        }
    }
    params.validate()?;
    Ok(params)
}

fn load_json_config(path: &Path) -> Result<Model, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let doc: ConfigDoc = serde_json::from_str(&text).map_err(|e| {
        IoError::from(ffnf_core::Error::InvalidArgument(format!(
            "config parse error: {e}"
        )))
    })?;
    // placeholder seed; caller regenerates with the real one
    let config = doc.to_model_config()?;
    config.validate()?;
    let mut model = generate_random_model(&config, 0)?;
    model.stages = doc.stages_or_default();
    model.validate()?;
    Ok(model)
}

/// Max per-token relative L2 difference between two outputs.
fn max_token_divergence(got: &Matrix, reference: &Matrix) -> f64 {
    let mut max = 0.0f64;
    for t in 0..got.rows() {
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (a, b) in got.row(t).iter().zip(reference.row(t)) {
            diff += (a - b) * (a - b);
            norm += b * b;
        }
        max = max.max(diff.sqrt() / norm.sqrt().max(NORM_EPS));
    }
    max
}

fn deterministic_input(n: usize, d_e: usize) -> Matrix {
    let mut rng = SplitMix64::new(0xFF9F);
    Matrix::from_vec(n, d_e, (0..n * d_e).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .expect("sized by construction")
}

fn load_fusion_plan(path: &Path) -> Result<FusionPlan, IoError> {
    match planfile::load_plan(path)? {
        PlanFile::Fusion(p) => Ok(p),
        PlanFile::Parallel(_) => Err(IoError::MalformedPlan {
            path: path.to_path_buf(),
            reason: "expected a fusion plan, found a parallel plan".into(),
        }),
    }
}

fn run(command: Command) -> Result<ExitCode, IoError> {
    match command {
        Command::Gen { config, seed, out } => {
            let template = load_json_config(&config)?;
            let mut model = generate_random_model(&template.config, seed)?;
            model.stages = template.stages;
            model.validate()?;
            save_model(&model, &out)?;
            println!(
                "wrote {} ({} blocks, d_e {})",
                out.display(),
                model.block_count(),
                model.config.d_e
            );
        }
        Command::VerifyFusion {
            model,
            plan,
            auto: _,
            budget,
            exclude_last,
            calib,
        } => {
            let m = load_model(&model)?;
            let plan = match (plan, budget) {
                (Some(path), _) => load_fusion_plan(&path)?,
                (None, Some(budget)) => {
                    plan_ffn_fusion(&m, budget, exclude_last, ScaleMode::Literal)
                }
                (None, None) => {
                    return Err(ffnf_core::Error::InvalidArgument(
                        "need --plan <file> or --auto --budget <int>".into(),
                    )
                    .into())
                }
            };
            if plan.ranges.is_empty() {
                println!("no fusible ranges");
                return Ok(ExitCode::SUCCESS);
            }
            let data = resolve_calibration(&calib, m.config.d_e)?;
            let fused = apply_fusion_plan(&m, &plan)?;
            let mut max_err = 0.0f64;
            for sample in &data.samples {
                let (got, _) = model_forward(&fused, sample, false)?;
                let reference =
                    forward_with_parallel_ranges(&m, sample, &plan.ranges, plan.scale_mode)?;
                max_err = max_err.max(max_token_divergence(&got, &reference));
            }
            println!("max fusion error = {max_err:e}");
            if max_err >= 1e-9 {
                eprintln!("error: fusion error {max_err:e} exceeds 1e-9");
                return Ok(ExitCode::from(1));
            }
        }
        Command::Analyze { what } => match what {
            AnalyzeCommand::Deps(args) => {
                let m = load_model(&args.model)?;
                let data = resolve_calibration(&args.calib, m.config.d_e)?;
                let matrix = compute_dependency_matrix(&m, &data)?;
                csvio::export_matrix(&matrix, &args.out)?;
                println!("wrote {} ({}x{})", args.out.display(), matrix.m, matrix.m);
            }
            AnalyzeCommand::LayerMetrics(args) => {
                let m = load_model(&args.model)?;
                let data = resolve_calibration(&args.calib, m.config.d_e)?;
                let direction = layer_direction_metric(&m, &data)?;
                let ratio = layer_contribution_ratio(&m, &data)?;
                csvio::export_rows(&[direction, ratio], &args.out)?;
                println!("wrote {}", args.out.display());
            }
        },
        Command::Plan { what } => match what {
            PlanCommand::Ffn {
                model,
                budget,
                exclude_last,
                scale_mode,
                out,
            } => {
                let m = load_model(&model)?;
                let mode = ScaleMode::parse(&scale_mode)?;
                let plan = plan_ffn_fusion(&m, budget, exclude_last, mode);
                planfile::save_fusion_plan(&plan, &out)?;
                println!("wrote {} ({} ranges)", out.display(), plan.ranges.len());
            }
            PlanCommand::Blocks {
                model,
                deps,
                w,
                out,
            } => {
                let m = load_model(&model)?;
                let matrix = csvio::load_matrix(&deps)?;
                if matrix.m != m.block_count() {
                    return Err(ffnf_core::Error::InvalidArgument(format!(
                        "dependency matrix is {}x{} but the model has {} blocks",
                        matrix.m,
                        matrix.m,
                        m.block_count()
                    ))
                    .into());
                }
                let eligible: Vec<bool> = m.blocks.iter().map(|b| b.has_attention()).collect();
                let plan = greedy_select(&matrix, &eligible, w)?;
                planfile::save_parallel_plan(&plan, &out)?;
                println!("wrote {} ({} ranges)", out.display(), plan.ranges.len());
            }
        },
        Command::Fuse { model, plan, out } => {
            let m = load_model(&model)?;
            let plan = load_fusion_plan(&plan)?;
            let fused = apply_fusion_plan(&m, &plan)?;
            save_model(&fused, &out)?;
            println!("wrote {} ({} blocks)", out.display(), fused.block_count());
        }
        Command::Remove {
            model,
            indices,
            out,
        } => {
            let m = load_model(&model)?;
            let parsed: Result<Vec<usize>, _> = indices
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.trim().parse::<usize>())
                .collect();
            let parsed = parsed.map_err(|_| {
                IoError::from(ffnf_core::Error::InvalidArgument(format!(
                    "bad index list {indices:?}"
                )))
            })?;
            let removed = remove_ffns(&m, &parsed)?;
            save_model(&removed, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Reverse { model, range, out } => {
            let m = load_model(&model)?;
            let parsed = range
                .split_once(':')
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                .ok_or_else(|| {
                    IoError::from(ffnf_core::Error::InvalidArgument(format!(
                        "range {range:?} is not \"i:j\""
                    )))
                })?;
            let reversed = reverse_ffn_range(&m, BlockRange::new(parsed.0, parsed.1))?;
            save_model(&reversed, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Parallelize { model, plan, out } => {
            let m = load_model(&model)?;
            let plan = match planfile::load_plan(&plan)? {
                PlanFile::Parallel(p) => p,
                PlanFile::Fusion(_) => {
                    return Err(IoError::MalformedPlan {
                        path: plan,
                        reason: "expected a parallel plan, found a fusion plan".into(),
                    })
                }
            };
            let staged = apply_block_parallel_plan(&m, &plan)?;
            save_model(&staged, &out)?;
            println!("wrote {} ({} stages)", out.display(), staged.stages.len());
        }
        Command::Bench {
            model,
            compare,
            params,
            workers,
            out,
        } => {
            let m = load_model(&model)?;
            let p = parse_latency_params(&params)?;
            if workers == 0 {
                return Err(
                    ffnf_core::Error::InvalidArgument("workers must be >= 1".into()).into(),
                );
            }
            let x = deterministic_input(p.n, m.config.d_e);
            let sync = Duration::from_secs_f64(p.t_sync);
            let mut text = String::new();
            match compare {
                None => {
                    let analytic = analytic_latency(&m, &p)?;
                    let (_, measured) = wall_clock_bench(&m, &x, workers, sync)?;
                    println!(
                        "analytic total={}s measured total={}s stages={}",
                        analytic.total_seconds, measured.total_seconds, measured.stage_count
                    );
                    text.push_str(&csvio::format_report(&measured));
                }
                Some(other_path) => {
                    let other = load_model(&other_path)?;
                    let report = compare_models(&m, &other, &x, &p, workers, sync)?;
                    println!(
                        "analytic a={}s b={}s; measured a={}s b={}s; divergence={:e}",
                        report.analytic_a.total_seconds,
                        report.analytic_b.total_seconds,
                        report.wall_a.total_seconds,
                        report.wall_b.total_seconds,
                        report.max_divergence
                    );
                    text.push_str(&csvio::format_report(&report.wall_a));
                    text.push_str(&csvio::format_report(&report.wall_b));
                    text.push_str(&format!("divergence={}\n", report.max_divergence));
                }
            }
            std::fs::write(&out, text).map_err(|e| IoError::io(&out, e))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
