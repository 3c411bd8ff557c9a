//! Config-driven end-to-end runs and (α, β) sweeps.
//!
//! A pipeline config is a JSON document naming an oracle world and an
//! ordered list of stages. Each stage writes its outputs and a
//! [`RunManifest`] into `<out>/<NN>-<stage>/`; the run directory gets a
//! top-level `report.json` and `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{cut_clusters, dissimilarity, to_dot, ward_linkage, Dendrogram, Metric};
use crate::direction::{attach_sigma, fit_direction, DifferenceSet, DirectionVector};
use crate::error::{Error, Result};
use crate::io::{self, MatrixMeta, RunManifest};
use crate::jacobian::{build_jacobian, JacobianMatrix};
use crate::latent::{sample_gaussian, RngSeed};
use crate::localized::{
    match_components, prune, solve, ComponentMatch, ComponentModel, L1Mode, SolveConfig,
    SolveReport, TracePoint, DEFAULT_PRUNE_THRESHOLD,
};
use crate::oracle::{make_world, ObservedPairs, OracleSpec, OracleWorld, Pairing};

pub const DIRECTION_MIN_ABS_COSINE: f64 = 0.999;
pub const JACOBIAN_MAX_RELATIVE_ERROR: f64 = 0.05;
pub const COMPONENT_MIN_ABS_COSINE: f64 = 0.95;
pub const COMPONENT_MIN_SUPPORT_IOU: f64 = 0.8;
/// Unmatched survivors must have ‖u‖ below this fraction of the smallest planted norm.
pub const EXTRA_NORM_FRACTION: f64 = 0.1;
/// Default size of the reference batch used to estimate σ_w.
pub const DEFAULT_REFERENCE_SAMPLES: usize = 4096;

pub const REPORT_FILE: &str = "report.json";

/// Oracle block of a config; the seed defaults to the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub d: usize,
    #[serde(alias = "S")]
    pub s: usize,
    pub p_true: usize,
    pub sparsity: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: Option<RngSeed>,
    #[serde(default)]
    pub semantics: Option<Vec<String>>,
}

impl OracleConfig {
    pub fn spec(&self, run_seed: RngSeed) -> OracleSpec {
        OracleSpec {
            d: self.d,
            s: self.s,
            p_true: self.p_true,
            sparsity: self.sparsity,
            noise_sigma: self.noise_sigma,
            seed: self.seed.unwrap_or(run_seed),
            semantics: self
                .semantics
                .clone()
                .unwrap_or_else(|| vec!["yaw".to_string(), "pitch".to_string()]),
        }
    }
}

fn default_pairs() -> usize {
    8192
}

fn default_reference() -> usize {
    DEFAULT_REFERENCE_SAMPLES
}

fn default_threshold() -> f64 {
    DEFAULT_PRUNE_THRESHOLD
}

fn default_k() -> usize {
    3
}

fn default_components() -> usize {
    8
}

fn default_one() -> f64 {
    1.0
}

fn default_lr() -> f64 {
    1e-4
}

fn default_iters() -> usize {
    500_000
}

fn default_tol() -> f64 {
    1e-6
}

fn default_window() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitParams {
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_one")]
    pub alpha: f64,
    #[serde(default = "default_one")]
    pub beta: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub l1_mode: L1Mode,
}

impl Default for FitParams {
    fn default() -> Self {
        FitParams {
            components: default_components(),
            alpha: 1.0,
            beta: 1.0,
            lr: default_lr(),
            max_iters: default_iters(),
            tol: default_tol(),
            window: default_window(),
            l1_mode: L1Mode::default(),
        }
    }
}

impl FitParams {
    pub fn solve_config(&self, seed: RngSeed) -> SolveConfig {
        SolveConfig {
            max_iters: self.max_iters,
            lr: self.lr,
            seed,
            tol: self.tol,
            window: self.window,
            l1_mode: self.l1_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Stage {
    Synth {},
    Observe {
        #[serde(default = "default_pairs")]
        pairs: usize,
        #[serde(default)]
        pairing: Pairing,
    },
    Direction {
        semantic: String,
        #[serde(default)]
        ridge: f64,
        #[serde(default = "default_reference")]
        reference_samples: usize,
    },
    Jacobian {
        #[serde(default)]
        target_shape: Option<Vec<usize>>,
        /// Load ΔW from a CSV file instead of the observe stage.
        #[serde(default)]
        dw: Option<PathBuf>,
        #[serde(default)]
        targets: Option<PathBuf>,
    },
    FitComponents {
        #[serde(flatten)]
        params: FitParams,
    },
    Prune {
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    Cluster {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default)]
        metric: Metric,
    },
    Report {},
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth { .. } => "synth",
            Stage::Observe { .. } => "observe",
            Stage::Direction { .. } => "direction",
            Stage::Jacobian { .. } => "jacobian",
            Stage::FitComponents { .. } => "fit-components",
            Stage::Prune { .. } => "prune",
            Stage::Cluster { .. } => "cluster",
            Stage::Report { .. } => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: RngSeed,
    pub oracle: OracleConfig,
    pub stages: Vec<Stage>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks stage ordering, referenced files and oracle parameters without
    /// touching the output directory.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("no stages declared".into()));
        }
        let spec = self.oracle.spec(self.seed);
        spec.validate().map_err(|e| Error::Config(format!("oracle: {e}")))?;
        let mut seen: Vec<&str> = Vec::new();
        let needs = |seen: &[&str], stage: &str, dep: &str| -> Result<()> {
            if seen.contains(&dep) {
                Ok(())
            } else {
                Err(Error::Config(format!("stage '{stage}' requires an earlier '{dep}' stage")))
            }
        };
        for stage in &self.stages {
            let name = stage.name();
            if seen.contains(&name) {
                return Err(Error::Config(format!("stage '{name}' declared twice")));
            }
            match stage {
                Stage::Synth {} | Stage::Report {} => {}
                Stage::Observe { pairs, .. } => {
                    needs(&seen, name, "synth")?;
                    if *pairs == 0 {
                        return Err(Error::Config("observe: pairs must be positive".into()));
                    }
                }
                Stage::Direction { semantic, .. } => {
                    needs(&seen, name, "observe")?;
                    if !spec.semantics.contains(semantic) {
                        return Err(Error::Config(format!(
                            "direction: semantic '{semantic}' is not planted in the oracle"
                        )));
                    }
                }
                Stage::Jacobian { dw, targets, .. } => match (dw, targets) {
                    (Some(dw), Some(targets)) => {
                        for f in [dw, targets] {
                            let p = base_dir.join(f);
                            if !p.is_file() {
                                return Err(Error::Config(format!(
                                    "jacobian: input file {} does not exist",
                                    p.display()
                                )));
                            }
                        }
                    }
                    (None, None) => needs(&seen, name, "observe")?,
                    _ => {
                        return Err(Error::Config(
                            "jacobian: give both 'dw' and 'targets' or neither".into(),
                        ))
                    }
                },
                Stage::FitComponents { params } => {
                    needs(&seen, name, "jacobian")?;
                    if params.components == 0 {
                        return Err(Error::Config("fit-components: components must be positive".into()));
                    }
                }
                Stage::Prune { .. } => needs(&seen, name, "fit-components")?,
                Stage::Cluster { k, .. } => {
                    needs(&seen, name, "fit-components")?;
                    if *k == 0 {
                        return Err(Error::Config("cluster: k must be positive".into()));
                    }
                }
            }
            seen.push(name);
        }
        Ok(())
    }

    fn fit_params(&self) -> Option<&FitParams> {
        self.stages.iter().find_map(|s| match s {
            Stage::FitComponents { params } => Some(params),
            _ => None,
        })
    }

    fn observe_params(&self) -> (usize, Pairing) {
        self.stages
            .iter()
            .find_map(|s| match s {
                Stage::Observe { pairs, pairing } => Some((*pairs, *pairing)),
                _ => None,
            })
            .unwrap_or((default_pairs(), Pairing::Independent))
    }

    fn prune_threshold(&self) -> f64 {
        self.stages
            .iter()
            .find_map(|s| match s {
                Stage::Prune { threshold } => Some(*threshold),
                _ => None,
            })
            .unwrap_or(DEFAULT_PRUNE_THRESHOLD)
    }
}

// Independent sub-streams of the run seed.
const STREAM_OBSERVE: u64 = 1;
const STREAM_REFERENCE: u64 = 2;
const STREAM_SOLVE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSummary {
    pub semantic: String,
    pub direction: DirectionVector,
    pub abs_cosine: Option<f64>,
    pub pass: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianSummary {
    pub rows: usize,
    pub cols: usize,
    pub relative_error: Option<f64>,
    pub pass: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub components: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iterations_run: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub objective_trace: Vec<TracePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub threshold: f64,
    pub survivors: usize,
    pub mean_l1: f64,
    pub max_offdiag: f64,
    pub norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub matches: Vec<ComponentMatch>,
    pub min_abs_cosine: f64,
    pub min_support_iou: f64,
    /// ‖u‖ of the survivors that were not matched to a planted component.
    pub extra_norms: Vec<f64>,
    pub smallest_planted_norm: f64,
    pub survivor_count_ok: bool,
    pub extras_small: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub k: usize,
    pub metric: String,
    pub labels: Vec<usize>,
    pub dendrogram: Dendrogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: RngSeed,
    pub stages: Vec<String>,
    pub direction: Option<DirectionSummary>,
    pub jacobian: Option<JacobianSummary>,
    pub fit: Option<FitSummary>,
    pub prune: Option<PruneSummary>,
    pub recovery: Option<RecoverySummary>,
    pub cluster: Option<ClusterSummary>,
    /// True when every recovery check that ran passed.
    pub all_pass: bool,
}

#[derive(Default)]
struct RunState {
    world: Option<OracleWorld>,
    observed: Option<ObservedPairs>,
    jacobian: Option<JacobianMatrix>,
    fitted: Option<(ComponentModel, SolveReport)>,
    pruned: Option<ComponentModel>,
}

/// Loads, validates and runs a pipeline config.
pub fn pipeline_run(config_path: &Path, out_dir: &Path) -> Result<PipelineReport> {
    let config = PipelineConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    config.validate(base)?;
    let manifest = RunManifest::new("pipeline", config.seed)
        .param("config", &config)
        .input(config_path)?;
    run_validated(&config, base, out_dir, manifest)
}

/// Runs an in-memory config; file references resolve against `base_dir`.
pub fn run_config(config: &PipelineConfig, base_dir: &Path, out_dir: &Path) -> Result<PipelineReport> {
    config.validate(base_dir)?;
    let manifest = RunManifest::new("pipeline", config.seed).param("config", config);
    run_validated(config, base_dir, out_dir, manifest)
}

fn run_validated(
    config: &PipelineConfig,
    base_dir: &Path,
    out_dir: &Path,
    manifest: RunManifest,
) -> Result<PipelineReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = RunState::default();
    let mut report = PipelineReport {
        seed: config.seed,
        stages: config.stages.iter().map(|s| s.name().to_string()).collect(),
        direction: None,
        jacobian: None,
        fit: None,
        prune: None,
        recovery: None,
        cluster: None,
        all_pass: true,
    };
    for (idx, stage) in config.stages.iter().enumerate() {
        let dir = out_dir.join(format!("{:02}-{}", idx + 1, stage.name()));
        run_stage(config, base_dir, stage, &dir, out_dir, &mut state, &mut report).map_err(
            |source| Error::Stage {
                stage: stage.name().to_string(),
                source: Box::new(source),
            },
        )?;
    }
    report.all_pass = [
        report.direction.as_ref().and_then(|d| d.pass),
        report.jacobian.as_ref().and_then(|j| j.pass),
        report.recovery.as_ref().map(|r| r.pass),
    ]
    .into_iter()
    .flatten()
    .all(|ok| ok);
    io::write_json(&out_dir.join(REPORT_FILE), &report)?;
    manifest.write_to(out_dir)?;
    Ok(report)
}

fn stage_manifest(config: &PipelineConfig, stage: &Stage) -> RunManifest {
    let mut m = RunManifest::new(stage.name(), config.seed);
    if let serde_json::Value::Object(map) = serde_json::to_value(stage).unwrap_or_default() {
        m.parameters = map.into_iter().filter(|(k, _)| k != "stage").collect();
    }
    m
}

/// Records hashes of earlier stage outputs, keyed relative to the run directory.
fn add_inputs(mut m: RunManifest, run_dir: &Path, files: &[PathBuf]) -> Result<RunManifest> {
    for f in files {
        let hash = io::hash_file(&run_dir.join(f))?;
        m.input_hashes.insert(f.display().to_string(), hash);
    }
    Ok(m)
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    config: &PipelineConfig,
    base_dir: &Path,
    stage: &Stage,
    dir: &Path,
    run_dir: &Path,
    state: &mut RunState,
    report: &mut PipelineReport,
) -> Result<()> {
    let seed = config.seed;
    let mut manifest = stage_manifest(config, stage);
    match stage {
        Stage::Synth {} => {
            let spec = config.oracle.spec(seed);
            let world = make_world(&spec)?;
            write_world(dir, &world)?;
            manifest.seed = spec.seed;
            state.world = Some(world);
        }
        Stage::Observe { pairs, pairing } => {
            let world = state.world.as_ref().expect("validated: synth ran");
            let mut rng = seed.derive(STREAM_OBSERVE).rng();
            let obs = world.simulate_pairs(*pairs, *pairing, &mut rng)?;
            write_observations(dir, &obs, Some(seed))?;
            state.observed = Some(obs);
        }
        Stage::Direction {
            semantic,
            ridge,
            reference_samples,
        } => {
            let obs = state.observed.as_ref().expect("validated: observe ran");
            let dy = obs
                .delta_scalars
                .get(semantic)
                .ok_or_else(|| Error::UnknownSemantic(semantic.clone()))?;
            let diffs = DifferenceSet::new(obs.delta_w.clone(), dy.clone())?;
            let reference = sample_gaussian(*reference_samples, obs.delta_w.ncols(), seed.derive(STREAM_REFERENCE))?;
            let dir_vec = attach_sigma(&fit_direction(&diffs, *ridge)?, &reference)?;
            io::write_json(&dir.join("direction.json"), &dir_vec)?;
            let abs_cosine = state
                .world
                .as_ref()
                .and_then(|w| w.direction(semantic).ok())
                .map(|truth| truth.dot(&dir_vec.v).abs());
            report.direction = Some(DirectionSummary {
                semantic: semantic.clone(),
                direction: dir_vec,
                abs_cosine,
                pass: abs_cosine.map(|c| c >= DIRECTION_MIN_ABS_COSINE),
            });
        }
        Stage::Jacobian {
            target_shape,
            dw,
            targets,
        } => {
            let (delta_w, delta_targets) = match (dw, targets) {
                (Some(dw), Some(targets)) => {
                    let (dw_m, _) = io::read_matrix(&base_dir.join(dw))?;
                    let (t_m, _) = io::read_matrix(&base_dir.join(targets))?;
                    manifest = manifest.input(&base_dir.join(dw))?.input(&base_dir.join(targets))?;
                    (dw_m, t_m)
                }
                _ => {
                    let obs = state.observed.as_ref().expect("validated: observe ran");
                    manifest = add_inputs(
                        manifest,
                        run_dir,
                        &observe_files(&config.stages),
                    )?;
                    (obs.delta_w.clone(), obs.delta_targets.clone())
                }
            };
            let j = build_jacobian(&delta_w, &delta_targets, target_shape.clone())?;
            write_jacobian(&dir.join("J.csv"), &j, Some(seed))?;
            let relative_error = state.world.as_ref().filter(|_| dw.is_none()).map(|w| {
                let truth = w.jacobian_truth();
                (j.data() - &truth).norm() / truth.norm()
            });
            report.jacobian = Some(JacobianSummary {
                rows: j.targets(),
                cols: j.latent_dim(),
                relative_error,
                pass: relative_error.map(|e| e < JACOBIAN_MAX_RELATIVE_ERROR),
            });
            state.jacobian = Some(j);
        }
        Stage::FitComponents { params } => {
            let j = state.jacobian.as_ref().expect("validated: jacobian ran");
            let cfg = params.solve_config(seed.derive(STREAM_SOLVE));
            let (model, solve_report) = solve(j, params.components, params.alpha, params.beta, &cfg)?;
            write_model(dir, &model, &solve_report, Some(seed))?;
            if let Some(jrel) = stage_dir_of(&config.stages, "jacobian") {
                manifest = add_inputs(manifest, run_dir, &[jrel.join("J.csv")])?;
            }
            report.fit = Some(FitSummary {
                components: params.components,
                alpha: params.alpha,
                beta: params.beta,
                iterations_run: solve_report.iterations_run,
                converged: solve_report.converged,
                final_objective: solve_report.objective_trace.last().map_or(f64::NAN, |t| t.total),
                objective_trace: solve_report.objective_trace.clone(),
            });
            state.fitted = Some((model, solve_report));
        }
        Stage::Prune { threshold } => {
            let (model, _) = state.fitted.as_ref().expect("validated: fit ran");
            let pruned = prune(model, *threshold)?;
            write_model_matrices(dir, &pruned, Some(seed))?;
            if let Some(frel) = stage_dir_of(&config.stages, "fit-components") {
                manifest = add_inputs(manifest, run_dir, &[frel.join("U.csv"), frel.join("Vhat.csv")])?;
            }
            report.prune = Some(prune_summary(&pruned, *threshold));
            if let Some(world) = &state.world {
                report.recovery = Some(recovery_summary(world, &pruned, model.components())?);
            }
            state.pruned = Some(pruned);
        }
        Stage::Cluster { k, metric } => {
            let model = state
                .pruned
                .as_ref()
                .or(state.fitted.as_ref().map(|(m, _)| m))
                .expect("validated: fit ran");
            let p = model.components();
            if p < 2 {
                return Err(Error::InvalidArgument(format!(
                    "only {p} component(s) left, nothing to cluster"
                )));
            }
            let k = (*k).min(p);
            let dist = dissimilarity(&model.v_hat, *metric)?;
            let dendrogram = ward_linkage(&dist)?;
            let labels = cut_clusters(&dendrogram, k)?;
            let summary = ClusterSummary {
                k,
                metric: metric.tag().to_string(),
                labels,
                dendrogram,
            };
            io::write_json(&dir.join("clusters.json"), &summary)?;
            io::write_text(&dir.join("dendrogram.dot"), &to_dot(&summary.dendrogram))?;
            report.cluster = Some(summary);
        }
        Stage::Report {} => {
            io::write_json(&dir.join("summary.json"), &*report)?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.write_to(dir)
}

fn stage_dir_of(stages: &[Stage], name: &str) -> Option<PathBuf> {
    stages
        .iter()
        .position(|s| s.name() == name)
        .map(|i| PathBuf::from(format!("{:02}-{}", i + 1, name)))
}

fn observe_files(stages: &[Stage]) -> Vec<PathBuf> {
    stage_dir_of(stages, "observe")
        .map(|d| vec![d.join("dw.csv"), d.join("targets.csv")])
        .unwrap_or_default()
}

pub fn prune_summary(pruned: &ComponentModel, threshold: f64) -> PruneSummary {
    PruneSummary {
        threshold,
        survivors: pruned.components(),
        mean_l1: pruned.mean_l1(),
        max_offdiag: pruned.max_offdiag_overlap(),
        norms: pruned.component_norms(),
    }
}

/// Scores a pruned model against the planted components of `world`.
pub fn recovery_summary(
    world: &OracleWorld,
    pruned: &ComponentModel,
    fitted_components: usize,
) -> Result<RecoverySummary> {
    let truth = ComponentModel::new(world.u_star.clone(), world.v_star.clone(), 0.0, 0.0)?;
    let planted = truth.components();
    let smallest_planted_norm = truth
        .component_norms()
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if pruned.components() < planted {
        return Ok(RecoverySummary {
            matches: Vec::new(),
            min_abs_cosine: 0.0,
            min_support_iou: 0.0,
            extra_norms: Vec::new(),
            smallest_planted_norm,
            survivor_count_ok: false,
            extras_small: false,
            pass: false,
        });
    }
    let matching = match_components(pruned, &truth)?;
    let norms = pruned.component_norms();
    let extra_norms: Vec<f64> = matching
        .unmatched(pruned.components())
        .into_iter()
        .map(|i| norms[i])
        .collect();
    let survivor_count_ok = (planted..=fitted_components).contains(&pruned.components())
        && pruned.components() - planted <= 2;
    let extras_small = extra_norms
        .iter()
        .all(|n| *n < EXTRA_NORM_FRACTION * smallest_planted_norm);
    let min_abs_cosine = matching.min_abs_cosine();
    let min_support_iou = matching.min_support_iou();
    let pass = survivor_count_ok
        && extras_small
        && min_abs_cosine >= COMPONENT_MIN_ABS_COSINE
        && min_support_iou >= COMPONENT_MIN_SUPPORT_IOU;
    Ok(RecoverySummary {
        matches: matching.pairs,
        min_abs_cosine,
        min_support_iou,
        extra_norms,
        smallest_planted_norm,
        survivor_count_ok,
        extras_small,
        pass,
    })
}

pub fn write_world(dir: &Path, world: &OracleWorld) -> Result<()> {
    let seed = Some(world.spec.seed);
    io::save_matrix(&dir.join("u_star.csv"), &world.u_star, "u_star", seed)?;
    io::save_matrix(&dir.join("v_star.csv"), &world.v_star, "v_star", seed)?;
    let bias = DMatrix::from_column_slice(world.bias.len(), 1, world.bias.as_slice());
    io::save_matrix(&dir.join("bias.csv"), &bias, "bias", seed)?;
    let directions: BTreeMap<&str, &[f64]> = world
        .direction_truths
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_slice()))
        .collect();
    io::write_json(&dir.join("directions.json"), &directions)?;
    io::write_json(&dir.join("spec.json"), &world.spec)
}

pub fn write_observations(dir: &Path, obs: &ObservedPairs, seed: Option<RngSeed>) -> Result<()> {
    io::save_matrix(&dir.join("dw.csv"), &obs.delta_w, "delta_w", seed)?;
    io::save_matrix(&dir.join("targets.csv"), &obs.delta_targets, "delta_targets", seed)?;
    for (name, dy) in &obs.delta_scalars {
        let m = DMatrix::from_column_slice(dy.len(), 1, dy.as_slice());
        io::save_matrix(&dir.join(format!("dy_{name}.csv")), &m, "delta_y", seed)?;
    }
    Ok(())
}

pub fn write_jacobian(path: &Path, j: &JacobianMatrix, seed: Option<RngSeed>) -> Result<()> {
    let meta = MatrixMeta {
        rows: j.targets(),
        cols: j.latent_dim(),
        role: "jacobian".into(),
        seed,
        target_shape: Some(j.target_shape().to_vec()),
    };
    io::write_matrix(path, j.data(), &meta)
}

pub fn read_jacobian(path: &Path) -> Result<JacobianMatrix> {
    let (m, meta) = io::read_matrix(path)?;
    match meta.and_then(|m| m.target_shape) {
        Some(shape) => JacobianMatrix::new(m, shape),
        None => JacobianMatrix::flat(m),
    }
}

/// Hyper-parameters stored next to a model's matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelParams {
    alpha: f64,
    beta: f64,
    components: usize,
}

pub fn write_model_matrices(dir: &Path, model: &ComponentModel, seed: Option<RngSeed>) -> Result<()> {
    io::save_matrix(&dir.join("U.csv"), &model.u, "U", seed)?;
    io::save_matrix(&dir.join("Vhat.csv"), &model.v_hat, "Vhat", seed)?;
    io::write_json(
        &dir.join("model.json"),
        &ModelParams {
            alpha: model.alpha,
            beta: model.beta,
            components: model.components(),
        },
    )
}

pub fn write_model(
    dir: &Path,
    model: &ComponentModel,
    report: &SolveReport,
    seed: Option<RngSeed>,
) -> Result<()> {
    write_model_matrices(dir, model, seed)?;
    io::write_json(&dir.join(REPORT_FILE), report)
}

pub fn read_model(dir: &Path) -> Result<ComponentModel> {
    let (u, _) = io::read_matrix(&dir.join("U.csv"))?;
    let (v_hat, _) = io::read_matrix(&dir.join("Vhat.csv"))?;
    let params_path = dir.join("model.json");
    let (alpha, beta) = if params_path.exists() {
        let p: ModelParams = io::read_json(&params_path)?;
        (p.alpha, p.beta)
    } else {
        (0.0, 0.0)
    };
    ComponentModel::new(u, v_hat, alpha, beta)
}

/// Runs a config's synth → observe → jacobian chain with `seed` replacing
/// both the run seed and the oracle seed.
pub fn prepare_oracle_jacobian(config: &PipelineConfig, seed: RngSeed) -> Result<(OracleWorld, JacobianMatrix)> {
    let spec = OracleSpec {
        seed,
        ..config.oracle.spec(seed)
    };
    let world = make_world(&spec)?;
    let (pairs, pairing) = config.observe_params();
    let mut rng = seed.derive(STREAM_OBSERVE).rng();
    let obs = world.simulate_pairs(pairs, pairing, &mut rng)?;
    let shape = config.stages.iter().find_map(|s| match s {
        Stage::Jacobian { target_shape, .. } => target_shape.clone(),
        _ => None,
    });
    let j = build_jacobian(&obs.delta_w, &obs.delta_targets, shape)?;
    Ok((world, j))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// One summary per (α, β) grid point; `*_std` are sample standard deviations
/// across seeds (0 for a single seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub seeds: usize,
    pub survivors: f64,
    pub survivors_std: f64,
    pub mean_l1: f64,
    pub mean_l1_std: f64,
    pub max_offdiag: f64,
    pub max_offdiag_std: f64,
    pub objective: f64,
    pub objective_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Solves the config's factorization for every grid point and seed.
pub fn sweep(config: &PipelineConfig, grid: &SweepGrid, seeds: &[RngSeed]) -> Result<Vec<SweepRow>> {
    if grid.alpha.is_empty() || grid.beta.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep grid and seed list must be non-empty".into()));
    }
    let params = config.fit_params().cloned().unwrap_or_default();
    let threshold = config.prune_threshold();
    let jacobians: Vec<JacobianMatrix> = seeds
        .par_iter()
        .map(|&s| prepare_oracle_jacobian(config, s).map(|(_, j)| j))
        .collect::<Result<_>>()?;

    let points: Vec<(f64, f64)> = grid
        .alpha
        .iter()
        .flat_map(|&a| grid.beta.iter().map(move |&b| (a, b)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..seeds.len()).map(move |s| (p, s)))
        .collect();
    let results: Vec<[f64; 4]> = jobs
        .par_iter()
        .map(|&(p, s)| {
            let (alpha, beta) = points[p];
            let cfg = params.solve_config(seeds[s].derive(STREAM_SOLVE));
            let (model, report) = solve(&jacobians[s], params.components, alpha, beta, &cfg)?;
            let pruned = prune(&model, threshold)?;
            let objective = report.objective_trace.last().map_or(f64::NAN, |t| t.total);
            Ok([
                pruned.components() as f64,
                pruned.mean_l1(),
                pruned.max_offdiag_overlap(),
                objective,
            ])
        })
        .collect::<Result<_>>()?;

    Ok(points
        .iter()
        .enumerate()
        .map(|(p, &(alpha, beta))| {
            let col = |k: usize| -> Vec<f64> {
                jobs.iter()
                    .zip(&results)
                    .filter(|((jp, _), _)| *jp == p)
                    .map(|(_, r)| r[k])
                    .collect()
            };
            let (survivors, survivors_std) = mean_std(&col(0));
            let (mean_l1, mean_l1_std) = mean_std(&col(1));
            let (max_offdiag, max_offdiag_std) = mean_std(&col(2));
            let (objective, objective_std) = mean_std(&col(3));
            SweepRow {
                alpha,
                beta,
                seeds: seeds.len(),
                survivors,
                survivors_std,
                mean_l1,
                mean_l1_std,
                max_offdiag,
                max_offdiag_std,
                objective,
                objective_std,
            }
        })
        .collect())
}

pub const SWEEP_HEADER: &str = "alpha,beta,seeds,survivors,survivors_std,mean_l1,mean_l1_std,max_offdiag,max_offdiag_std,objective,objective_std";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let fields = [
            io::format_value(r.alpha),
            io::format_value(r.beta),
            r.seeds.to_string(),
            io::format_value(r.survivors),
            io::format_value(r.survivors_std),
            io::format_value(r.mean_l1),
            io::format_value(r.mean_l1_std),
            io::format_value(r.max_offdiag),
            io::format_value(r.max_offdiag_std),
            io::format_value(r.objective),
            io::format_value(r.objective_std),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// The bundled end-to-end oracle config.
pub const ORACLE_E2E_CONFIG: &str = include_str!("../configs/oracle-e2e.json");
