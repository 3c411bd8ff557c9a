//! End-to-end acceptance checks. Run with
//! `cargo test -p ldis-core --test acceptance`; prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use ldis_core::cluster::{abs_cosine_dissimilarity, cut_clusters, ward_linkage, DissimilarityMatrix};
use ldis_core::decorr::{decorr_grad_with, decorr_loss, VarianceTerm};
use ldis_core::direction::{attach_sigma, fit_direction, manipulate, AugmentationScale, DifferenceSet, DirectionVector};
use ldis_core::jacobian::build_jacobian;
use ldis_core::latent::{gaussian_matrix, sample_gaussian};
use ldis_core::localized::{prune, solve};
use ldis_core::oracle::{make_world, OracleSpec, Pairing};
use ldis_core::pipeline::{
    pipeline_run, prepare_oracle_jacobian, recovery_summary, sweep, PipelineConfig, Stage, SweepGrid, SweepRow,
    ORACLE_E2E_CONFIG,
};
use ldis_core::{LatentBatch, RngSeed};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, budget_secs: f64) -> bool {
    elapsed.as_secs_f64() < budget_secs
}

fn oracle_spec(d: usize, s: usize, p_true: usize, noise: f64, seed: u64) -> OracleSpec {
    OracleSpec {
        d,
        s,
        p_true,
        sparsity: 0.1,
        noise_sigma: noise,
        seed: RngSeed(seed),
        semantics: vec!["yaw".into(), "pitch".into()],
    }
}

fn bundled() -> PipelineConfig {
    PipelineConfig::from_json(ORACLE_E2E_CONFIG).expect("bundled config parses")
}

fn decorr_gradient() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for b in 0..100u64 {
        let batch = sample_gaussian(32, 6, RngSeed(1000 + b)).map_err(|e| e.to_string())?;
        for term in [VarianceTerm::Mean, VarianceTerm::Sum] {
            let analytic = decorr_grad_with(&batch, term).map_err(|e| e.to_string())?;
            let numeric = common::decorr_central_difference(&batch, term, 1e-5);
            worst = worst.max(common::normwise_relative_error(&analytic, &numeric));
        }
    }
    let t = start.elapsed();
    check(worst < 1e-5 && within(t, 10.0), format!("max rel err {worst:.2e}, {t:.2?}"))
}

fn decorr_reference_values() -> Outcome {
    let square = LatentBatch::from_rows(&[vec![1., 1.], vec![1., -1.], vec![-1., 1.], vec![-1., -1.]]).unwrap();
    let zero = decorr_loss(&square).map_err(|e| e.to_string())?.total;
    let c = 0.75f64.sqrt();
    let half = LatentBatch::from_rows(&[
        vec![1.0, 0.5 + c],
        vec![1.0, 0.5 - c],
        vec![-1.0, -0.5 + c],
        vec![-1.0, -0.5 - c],
    ])
    .unwrap();
    let corr = decorr_loss(&half).map_err(|e| e.to_string())?.corr_term;
    check(
        zero.abs() < 1e-12 && (corr - 1.3862943611).abs() < 1e-9,
        format!("zero case {zero:.1e}, rho=0.5 corr_term {corr:.10}"),
    )
}

fn direction_recovery() -> Outcome {
    let start = Instant::now();
    let world = make_world(&oracle_spec(32, 16, 2, 0.01, 31)).map_err(|e| e.to_string())?;
    let mut rng = RngSeed(32).rng();
    let obs = world.simulate_pairs(4096, Pairing::Independent, &mut rng).map_err(|e| e.to_string())?;
    let diffs = DifferenceSet::new(obs.delta_w, obs.delta_scalars["yaw"].clone()).map_err(|e| e.to_string())?;
    let fitted = fit_direction(&diffs, 0.0).map_err(|e| e.to_string())?;
    let cos = fitted.v.dot(world.direction("yaw").unwrap()).abs();
    let t = start.elapsed();

    let hand = DifferenceSet::new(
        DMatrix::from_row_slice(3, 2, &[1., 0., 0., 1., 1., 1.]),
        DVector::from_vec(vec![1., 2., 3.]),
    )
    .unwrap();
    let v = fit_direction(&hand, 0.0).map_err(|e| e.to_string())?.v;
    let expected = DVector::from_vec(vec![1.0, 2.0]) / 5f64.sqrt();
    let hand_err = (v - expected).amax();
    check(
        cos >= 0.999 && hand_err < 1e-12 && within(t, 1.0),
        format!("|cos| {cos:.6}, hand example err {hand_err:.1e}, {t:.2?}"),
    )
}

fn manipulation_identity() -> Outcome {
    let d = 32;
    let mut rng = RngSeed(44).rng();
    let mut v = DVector::from_iterator(d, gaussian_matrix(d, 1, &mut rng).iter().copied());
    v.normalize_mut();
    let reference = sample_gaussian(4096, d, RngSeed(45)).map_err(|e| e.to_string())?;
    let dir = attach_sigma(&DirectionVector { v, sigma_w: 0.0, residual_rms: 0.0 }, &reference)
        .map_err(|e| e.to_string())?;
    let scale = AugmentationScale::default();
    let (mut proj_err, mut idem_err) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let w = DVector::from_iterator(d, gaussian_matrix(d, 1, &mut rng).iter().map(|x| x * rng.random_range(0.1..5.0)));
        let s = scale.sample(&mut rng);
        let once = manipulate(&w, &dir, s).map_err(|e| e.to_string())?;
        let twice = manipulate(&once, &dir, s).map_err(|e| e.to_string())?;
        proj_err = proj_err.max((once.dot(&dir.v) - s * dir.sigma_w).abs());
        idem_err = idem_err.max((twice - &once).amax());
    }
    check(
        proj_err < 1e-12 && idem_err < 1e-12,
        format!("projection err {proj_err:.1e}, idempotence err {idem_err:.1e}"),
    )
}

fn jacobian_recovery() -> Outcome {
    let start = Instant::now();
    let world = make_world(&oracle_spec(32, 256, 6, 0.01, 51)).map_err(|e| e.to_string())?;
    let mut rng = RngSeed(52).rng();
    let obs = world.simulate_pairs(8192, Pairing::Independent, &mut rng).map_err(|e| e.to_string())?;
    let j = build_jacobian(&obs.delta_w, &obs.delta_targets, Some(vec![16, 16])).map_err(|e| e.to_string())?;
    let truth = world.jacobian_truth();
    let err = (j.data() - &truth).norm() / truth.norm();
    let t = start.elapsed();
    check(err < 0.05 && within(t, 30.0), format!("relative Frobenius error {err:.2e}, {t:.2?}"))
}

fn planted_recovery() -> Outcome {
    let config = bundled();
    let params = config
        .stages
        .iter()
        .find_map(|s| match s {
            Stage::FitComponents { params } => Some(params.clone()),
            _ => None,
        })
        .ok_or("bundled config has no fit-components stage")?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let result = pool.install(|| -> ldis_core::Result<_> {
        let (world, j) = prepare_oracle_jacobian(&config, config.seed)?;
        let cfg = params.solve_config(config.seed.derive(3));
        let (model, report) = solve(&j, params.components, params.alpha, params.beta, &cfg)?;
        let pruned = prune(&model, 0.01)?;
        Ok((recovery_summary(&world, &pruned, params.components)?, report.iterations_run, pruned.components()))
    });
    let t = start.elapsed();
    let (rec, iters, survivors) = result.map_err(|e| e.to_string())?;
    check(
        rec.pass && (6..=8).contains(&survivors) && within(t, 300.0),
        format!(
            "{survivors} survivors, min |cos| {:.4}, min IoU {:.3}, extras {:?}, {iters} iters, {t:.2?}",
            rec.min_abs_cosine, rec.min_support_iou, rec.extra_norms
        ),
    )
}

fn non_increasing(rows: &[SweepRow], value: impl Fn(&SweepRow) -> (f64, f64)) -> bool {
    rows.windows(2).all(|w| {
        let (m0, s0) = value(&w[0]);
        let (m1, s1) = value(&w[1]);
        m1 <= m0 + s0.max(s1)
    })
}

fn sensitivity_sweeps() -> Outcome {
    let config = bundled();
    let seeds = [RngSeed(101), RngSeed(202), RngSeed(303)];
    let alpha_rows = sweep(&config, &SweepGrid { alpha: vec![0.3, 1.0, 3.0], beta: vec![1.0] }, &seeds)
        .map_err(|e| e.to_string())?;
    let beta_rows = sweep(&config, &SweepGrid { alpha: vec![1.0], beta: vec![0.01, 1.0, 100.0] }, &seeds)
        .map_err(|e| e.to_string())?;
    let survivors_ok = non_increasing(&alpha_rows, |r| (r.survivors, r.survivors_std));
    let l1_ok = non_increasing(&alpha_rows, |r| (r.mean_l1, r.mean_l1_std));
    let overlap_ok = non_increasing(&beta_rows, |r| (r.max_offdiag, r.max_offdiag_std));
    let fmt = |rows: &[SweepRow], f: &dyn Fn(&SweepRow) -> f64| {
        rows.iter().map(|r| format!("{:.3}", f(r))).collect::<Vec<_>>().join("/")
    };
    check(
        survivors_ok && l1_ok && overlap_ok,
        format!(
            "survivors {} | mean l1 {} over alpha; max overlap {} over beta",
            fmt(&alpha_rows, &|r| r.survivors),
            fmt(&alpha_rows, &|r| r.mean_l1),
            fmt(&beta_rows, &|r| r.max_offdiag),
        ),
    )
}

fn ward_equivalence() -> Outcome {
    let mut rng = RngSeed(88).rng();
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let p = rng.random_range(2..=16);
        let dim = rng.random_range(1..=5);
        let dist = common::random_dissimilarity(p, dim, &mut rng);
        let fast = ward_linkage(&dist).map_err(|e| e.to_string())?;
        let slow = common::ward_bruteforce(dist.data());
        for (f, s) in fast.merges.iter().zip(&slow) {
            if (f.a, f.b, f.size) != (s.a, s.b, s.size) {
                return Err(format!("case {case}: merge {:?} vs oracle {:?}", f, s));
            }
            worst = worst.max((f.height - s.height).abs() / s.height.max(1e-300));
        }
    }
    let hand = DissimilarityMatrix::new(
        DMatrix::from_row_slice(3, 3, &[0., 0.1, 0.9, 0.1, 0., 0.9, 0.9, 0.9, 0.]),
        "hand",
    )
    .unwrap();
    let h = ward_linkage(&hand).map_err(|e| e.to_string())?.merges[1].height;
    check(
        worst < 1e-12 && (h - 1.0376).abs() < 1e-4,
        format!("200 cases, max height rel diff {worst:.1e}; hand second merge {h:.5}"),
    )
}

fn planted_partition() -> Outcome {
    let mut rng = RngSeed(99).rng();
    for trial in 0..20 {
        let (v, truth) = common::planted_blocks(16, 3, 5, 0.01, &mut rng);
        let cos = v.transpose() * &v;
        for i in 0..truth.len() {
            for j in 0..truth.len() {
                let c = cos[(i, j)].abs();
                if (truth[i] == truth[j] && c < 0.95) || (truth[i] != truth[j] && c > 0.1) {
                    return Err(format!("trial {trial}: construction violates block structure"));
                }
            }
        }
        let dist = abs_cosine_dissimilarity(&v).map_err(|e| e.to_string())?;
        let labels = cut_clusters(&ward_linkage(&dist).map_err(|e| e.to_string())?, 3).map_err(|e| e.to_string())?;
        if !common::same_partition(&labels, &truth) {
            return Err(format!("trial {trial}: labels {labels:?} vs blocks {truth:?}"));
        }
    }
    Ok("20 shuffled 3x5 block layouts recovered exactly".into())
}

fn csv_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(csv_files(&path));
        } else if path.extension().is_some_and(|e| e == "csv") {
            out.push(path);
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("oracle-e2e.json");
    std::fs::write(&config, ORACLE_E2E_CONFIG).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let report = pipeline_run(&config, &a).map_err(|e| e.to_string())?;
    pipeline_run(&config, &b).map_err(|e| e.to_string())?;
    let files = csv_files(&a);
    for f in &files {
        let other = b.join(f.strip_prefix(&a).unwrap());
        if std::fs::read(f).ok() != std::fs::read(&other).ok() {
            return Err(format!("{} differs between runs", other.display()));
        }
    }
    let reports_equal = std::fs::read(a.join("report.json")).ok() == std::fs::read(b.join("report.json")).ok();
    check(
        files.len() >= 8 && reports_equal && report.all_pass,
        format!("{} CSV files byte-identical, report all_pass={}", files.len(), report.all_pass),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("decorrelation gradient vs finite differences", decorr_gradient),
        ("decorrelation reference values", decorr_reference_values),
        ("direction recovery", direction_recovery),
        ("manipulation identity", manipulation_identity),
        ("jacobian recovery", jacobian_recovery),
        ("planted component recovery", planted_recovery),
        ("alpha/beta monotonicity", sensitivity_sweeps),
        ("ward equivalence", ward_equivalence),
        ("planted-partition clustering", planted_partition),
        ("pipeline determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("[PASS] {:>2}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {:>2}. {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
