use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ldis_core::cluster::{cut_clusters, dissimilarity, to_dot, ward_linkage, Metric};
use ldis_core::decorr::{decorr_loss_with, VarianceTerm};
use ldis_core::direction::{attach_sigma, fit_direction, manipulate, DifferenceSet, DirectionVector};
use ldis_core::io::{self, RunManifest};
use ldis_core::jacobian::build_jacobian;
use ldis_core::latent::sample_gaussian;
use ldis_core::localized::{prune, solve, L1Mode, SolveConfig, DEFAULT_PRUNE_THRESHOLD};
use ldis_core::oracle::{make_world, OracleSpec, Pairing};
use ldis_core::pipeline::{
    self, pipeline_run, read_jacobian, read_model, sweep, write_jacobian, write_model, write_model_matrices,
    PipelineConfig, PipelineReport, SweepGrid,
};
use ldis_core::{Error, LatentBatch, Result, RngSeed};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ldis", version, about = "Linear latent-direction discovery toolkit")]
struct Cli {
    /// Seed for every random stream the command uses.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file or directory (meaning depends on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a planted oracle world and dump its ground truth.
    Synth {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Sample difference pairs from a planted oracle world.
    SynthObserve(SynthObserveArgs),
    /// Evaluate the decorrelation loss of a latent batch.
    DecorrEval {
        #[arg(long)]
        batch: PathBuf,
        #[arg(long, value_enum, default_value_t = VarTerm::Mean)]
        variance_term: VarTerm,
        /// Print machine-readable JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Regress a unit manipulation direction from latent/semantic differences.
    FitDirection {
        #[arg(long)]
        dw: PathBuf,
        #[arg(long)]
        dy: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        ridge: f64,
        /// Gaussian reference samples used to estimate sigma_w.
        #[arg(long, default_value_t = pipeline::DEFAULT_REFERENCE_SAMPLES)]
        reference_samples: usize,
    },
    /// Move latent codes (CSV rows) to scale s along a direction.
    Manipulate {
        #[arg(long)]
        w: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        scale: f64,
    },
    /// Stack per-target directions into a Jacobian.
    Jacobian {
        #[arg(long)]
        dw: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        /// Target layout, e.g. 16,16 or 8,8,3.
        #[arg(long, value_delimiter = ',')]
        shape: Option<Vec<usize>>,
    },
    /// Factorize a Jacobian into sparse localized components.
    FitComponents(FitArgs),
    /// Drop components whose norm falls below a threshold.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PRUNE_THRESHOLD)]
        threshold: f64,
    },
    /// Ward-cluster direction vectors (the columns of a CSV matrix).
    Cluster {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, value_enum, default_value_t = MetricArg::AbsCosine)]
        metric: MetricArg,
        /// Also write the dendrogram as a Graphviz file.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Solve a config's factorization over an (alpha, beta) grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        beta: Vec<f64>,
        /// Seeds to average over (default: the global seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Run a JSON pipeline config end to end.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize a pipeline run and verify its recorded input hashes.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct SynthObserveArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 8192)]
    pairs: usize,
    /// Perturbation scale; omit for independent pairs.
    #[arg(long)]
    perturbation: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    jacobian: PathBuf,
    #[arg(short = 'P', long = "components", default_value_t = 200)]
    components: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 500_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, value_enum, default_value_t = L1Arg::Subgradient)]
    l1_mode: L1Arg,
    /// Also write each U column reshaped to the target layout.
    #[arg(long)]
    grids: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum VarTerm {
    Mean,
    Sum,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    AbsCosine,
    AbsOneMinusCosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum L1Arg {
    Subgradient,
    Proximal,
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn read_spec(path: &Path) -> Result<OracleSpec> {
    let spec: OracleSpec = io::read_json(path).map_err(|e| Error::Config(e.to_string()))?;
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

/// Directory that receives the manifest for a file output.
fn manifest_dir(out: &Path) -> &Path {
    out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn run(cli: Cli) -> Result<()> {
    let seed = RngSeed(cli.seed);
    let out = &cli.out;
    match cli.command {
        Command::Synth { spec } => {
            let dir = require_out(out)?;
            let world = make_world(&read_spec(&spec)?)?;
            pipeline::write_world(dir, &world)?;
            RunManifest::new("synth", world.spec.seed)
                .param("spec", &world.spec)
                .input(&spec)?
                .write_to(dir)?;
            log::info!("wrote oracle world to {}", dir.display());
        }
        Command::SynthObserve(args) => {
            let dir = require_out(out)?;
            let world = make_world(&read_spec(&args.spec)?)?;
            let pairing = match args.perturbation {
                Some(scale) => Pairing::Perturbation { scale },
                None => Pairing::Independent,
            };
            let obs = world.simulate_pairs(args.pairs, pairing, &mut seed.rng())?;
            pipeline::write_observations(dir, &obs, Some(seed))?;
            RunManifest::new("synth-observe", seed)
                .param("pairs", args.pairs)
                .param("pairing", pairing)
                .input(&args.spec)?
                .write_to(dir)?;
            log::info!("wrote {} difference pairs to {}", args.pairs, dir.display());
        }
        Command::DecorrEval {
            batch,
            variance_term,
            json,
        } => {
            let (m, _) = io::read_matrix(&batch)?;
            let term = match variance_term {
                VarTerm::Mean => VarianceTerm::Mean,
                VarTerm::Sum => VarianceTerm::Sum,
            };
            let loss = decorr_loss_with(&LatentBatch::new(m)?, term)?;
            if json {
                println!(
                    "{}",
                    json!({
                        "total": loss.total,
                        "corr_term": loss.corr_term,
                        "var_term": loss.var_term,
                        "clamp_count": loss.clamp_count,
                    })
                );
            } else {
                println!("total       {}", loss.total);
                println!("corr_term   {}", loss.corr_term);
                println!("var_term    {}", loss.var_term);
                println!("clamp_count {}", loss.clamp_count);
            }
        }
        Command::FitDirection {
            dw,
            dy,
            ridge,
            reference_samples,
        } => {
            let path = require_out(out)?;
            let (delta_w, _) = io::read_matrix(&dw)?;
            let delta_y = io::read_vector(&dy)?;
            let fitted = fit_direction(&DifferenceSet::new(delta_w, delta_y)?, ridge)?;
            let reference = sample_gaussian(reference_samples, fitted.dim(), seed)?;
            let dir = attach_sigma(&fitted, &reference)?;
            io::write_json(path, &dir)?;
            RunManifest::new("fit-direction", seed)
                .param("ridge", ridge)
                .param("reference_samples", reference_samples)
                .input(&dw)?
                .input(&dy)?
                .write_to(manifest_dir(path))?;
            log::info!("residual rms {:.3e}, sigma_w {:.4}", dir.residual_rms, dir.sigma_w);
        }
        Command::Manipulate { w, dir, scale } => {
            let (codes, _) = io::read_matrix(&w)?;
            let direction: DirectionVector = io::read_json(&dir)?;
            let mut moved = DMatrix::zeros(codes.nrows(), codes.ncols());
            for (i, row) in codes.row_iter().enumerate() {
                let code = DVector::from_iterator(row.len(), row.iter().copied());
                moved.set_row(i, &manipulate(&code, &direction, scale)?.transpose());
            }
            match out {
                Some(path) => {
                    io::save_matrix(path, &moved, "latent", None)?;
                    RunManifest::new("manipulate", seed)
                        .param("scale", scale)
                        .input(&w)?
                        .input(&dir)?
                        .write_to(manifest_dir(path))?;
                }
                None => print!("{}", io::matrix_to_csv(&moved)),
            }
        }
        Command::Jacobian { dw, targets, shape } => {
            let path = require_out(out)?;
            let (delta_w, _) = io::read_matrix(&dw)?;
            let (delta_t, _) = io::read_matrix(&targets)?;
            let j = build_jacobian(&delta_w, &delta_t, shape.clone())?;
            write_jacobian(path, &j, None)?;
            RunManifest::new("jacobian", seed)
                .param("shape", j.target_shape())
                .input(&dw)?
                .input(&targets)?
                .write_to(manifest_dir(path))?;
            log::info!("jacobian {}x{}", j.targets(), j.latent_dim());
        }
        Command::FitComponents(args) => {
            let dir = require_out(out)?;
            let j = read_jacobian(&args.jacobian)?;
            let cfg = SolveConfig {
                max_iters: args.max_iters,
                lr: args.lr,
                seed,
                tol: args.tol,
                l1_mode: match args.l1_mode {
                    L1Arg::Subgradient => L1Mode::Subgradient,
                    L1Arg::Proximal => L1Mode::Proximal,
                },
                ..SolveConfig::default()
            };
            let (model, report) = solve(&j, args.components, args.alpha, args.beta, &cfg)?;
            write_model(dir, &model, &report, Some(seed))?;
            if args.grids {
                write_grids(&dir.join("grids"), &model.u, j.target_shape())?;
            }
            RunManifest::new("fit-components", seed)
                .param("solve", &cfg)
                .param("components", args.components)
                .param("alpha", args.alpha)
                .param("beta", args.beta)
                .input(&args.jacobian)?
                .write_to(dir)?;
            log::info!(
                "{} iterations, converged: {}, final objective {:.6e}",
                report.iterations_run,
                report.converged,
                report.objective_trace.last().map_or(f64::NAN, |t| t.total)
            );
        }
        Command::Prune { model, threshold } => {
            let dir = require_out(out)?;
            let m = read_model(&model)?;
            let pruned = prune(&m, threshold)?;
            write_model_matrices(dir, &pruned, Some(seed))?;
            RunManifest::new("prune", seed)
                .param("threshold", threshold)
                .input(&model.join("U.csv"))?
                .input(&model.join("Vhat.csv"))?
                .write_to(dir)?;
            log::info!("{} of {} components survive", pruned.components(), m.components());
        }
        Command::Cluster {
            vectors,
            k,
            metric,
            dot,
        } => {
            let path = require_out(out)?;
            let (v, _) = io::read_matrix(&vectors)?;
            let metric = match metric {
                MetricArg::AbsCosine => Metric::AbsCosine,
                MetricArg::AbsOneMinusCosine => Metric::AbsOneMinusCosine,
            };
            let dendrogram = ward_linkage(&dissimilarity(&v, metric)?)?;
            let labels = cut_clusters(&dendrogram, k)?;
            io::write_json(
                path,
                &json!({
                    "metric": metric.tag(),
                    "k": k,
                    "labels": labels,
                    "dendrogram": dendrogram,
                }),
            )?;
            if let Some(dot) = dot {
                io::write_text(&dot, &to_dot(&dendrogram))?;
            }
            RunManifest::new("cluster", seed)
                .param("k", k)
                .param("metric", metric.tag())
                .input(&vectors)?
                .write_to(manifest_dir(path))?;
        }
        Command::Sweep {
            config,
            alpha,
            beta,
            seeds,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            cfg.validate(config.parent().unwrap_or(Path::new(".")))?;
            let seeds: Vec<RngSeed> = if seeds.is_empty() {
                vec![seed]
            } else {
                seeds.into_iter().map(RngSeed).collect()
            };
            let rows = sweep(&cfg, &SweepGrid { alpha: alpha.clone(), beta: beta.clone() }, &seeds)?;
            let csv = pipeline::sweep_csv(&rows);
            match out {
                Some(path) => {
                    io::write_text(path, &csv)?;
                    RunManifest::new("sweep", seed)
                        .param("alpha", &alpha)
                        .param("beta", &beta)
                        .param("seeds", &seeds)
                        .input(&config)?
                        .write_to(manifest_dir(path))?;
                }
                None => print!("{csv}"),
            }
        }
        Command::Pipeline { config } => {
            let dir = require_out(out)?;
            let report = pipeline_run(&config, dir)?;
            print_report(&report);
        }
        Command::Report { run } => {
            let report: PipelineReport = io::read_json(&run.join(pipeline::REPORT_FILE))?;
            print_report(&report);
            let mut stale = Vec::new();
            for manifest in manifests(&run)? {
                let m: RunManifest = io::read_json(&manifest)?;
                stale.extend(stale_relative(&m, &run)?);
            }
            if stale.is_empty() {
                println!("inputs: all recorded hashes match");
            } else {
                for s in &stale {
                    println!("stale input: {s}");
                }
                return Err(Error::InvalidArgument(format!("{} input(s) changed since the run", stale.len())));
            }
        }
    }
    Ok(())
}

fn manifests(run: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(run).map_err(|e| Error::Io { path: run.to_path_buf(), source: e })?;
    for entry in entries.flatten() {
        let p = entry.path();
        if p.is_dir() {
            let m = p.join(io::MANIFEST_FILE);
            if m.is_file() {
                out.push(m);
            }
        }
    }
    out.sort();
    let top = run.join(io::MANIFEST_FILE);
    if top.is_file() {
        out.insert(0, top);
    }
    Ok(out)
}

/// Inputs whose current hash differs from the recorded one. Relative keys
/// are looked up under the run directory first.
fn stale_relative(m: &RunManifest, run: &Path) -> Result<Vec<String>> {
    let mut stale = Vec::new();
    for (file, hash) in &m.input_hashes {
        let p = Path::new(file);
        let candidate = if p.is_relative() && run.join(p).is_file() { run.join(p) } else { p.to_path_buf() };
        match io::hash_file(&candidate) {
            Ok(h) if &h == hash => {}
            _ => stale.push(file.clone()),
        }
    }
    Ok(stale)
}

fn print_report(r: &PipelineReport) {
    let flag = |p: Option<bool>| match p {
        Some(true) => "pass",
        Some(false) => "FAIL",
        None => "n/a",
    };
    println!("stages: {}", r.stages.join(" -> "));
    if let Some(d) = &r.direction {
        println!(
            "direction[{}]: |cos| {} ({})",
            d.semantic,
            d.abs_cosine.map_or("n/a".into(), |c| format!("{c:.6}")),
            flag(d.pass)
        );
    }
    if let Some(j) = &r.jacobian {
        println!(
            "jacobian {}x{}: relative error {} ({})",
            j.rows,
            j.cols,
            j.relative_error.map_or("n/a".into(), |e| format!("{e:.3e}")),
            flag(j.pass)
        );
    }
    if let Some(f) = &r.fit {
        println!(
            "fit: P={} alpha={} beta={} iterations={} converged={} objective={:.6e}",
            f.components, f.alpha, f.beta, f.iterations_run, f.converged, f.final_objective
        );
    }
    if let Some(p) = &r.prune {
        println!("prune: {} survivors at threshold {}", p.survivors, p.threshold);
    }
    if let Some(rec) = &r.recovery {
        println!(
            "recovery: min |cos| {:.4}, min IoU {:.3}, {} extra(s) ({})",
            rec.min_abs_cosine,
            rec.min_support_iou,
            rec.extra_norms.len(),
            flag(Some(rec.pass))
        );
    }
    if let Some(c) = &r.cluster {
        println!("clusters (k={}, {}): {:?}", c.k, c.metric, c.labels);
    }
    println!("all criteria: {}", if r.all_pass { "pass" } else { "FAIL" });
}

/// One CSV per component: the U column laid out as `rows × (product of the
/// remaining target dimensions)`.
fn write_grids(dir: &Path, u: &DMatrix<f64>, shape: &[usize]) -> Result<()> {
    let rows = shape.first().copied().unwrap_or(u.nrows()).max(1);
    let cols = u.nrows() / rows;
    for (p, col) in u.column_iter().enumerate() {
        let grid = DMatrix::from_row_slice(rows, cols, col.as_slice());
        io::save_matrix(&dir.join(format!("u_{p:03}.csv")), &grid, "component-grid", None)?;
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
