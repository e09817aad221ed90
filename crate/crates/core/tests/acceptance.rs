//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! cargo test -p fedclip-core --test acceptance

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fedclip_core::config::{Algorithm, RunConfig, TrainSettings, REFERENCE_FULL_MODEL_PARAMS};
use fedclip_core::data::{generate_synthetic_suite, write_feature_file, FeatureDataset, SynthSpec};
use fedclip_core::evaluation::{
    comprehensive_accuracy, evaluate_run, predict, reports_to_csv, run_experiment, MultiSeedReport, Predictor,
};
use fedclip_core::federation::{aggregate, run_federation, CommLedger, TrainedModels, TrainedRun};
use fedclip_core::loss::{gather_text_batch, loss_and_grad, loss_value, DEFAULT_SCALE};
use fedclip_core::numerics::{finite_diff_grad, max_relative_error};
use fedclip_core::{parameter_count, AdapterParams, Matrix};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn uniform_params(rng: &mut ChaCha8Rng, d: usize) -> AdapterParams {
    let flat: Vec<f64> = (0..parameter_count(d)).map(|_| rng.random_range(-1.0..1.0)).collect();
    AdapterParams::unflatten(&flat, d).unwrap()
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (k, (d, b)) in [4usize, 8, 16]
        .iter()
        .flat_map(|&d| [2usize, 4, 8].map(|b| (d, b)))
        .cycle()
        .take(27)
        .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        let c = b + 2;
        let p = uniform_params(&mut rng, d);
        let x = normal_matrix(&mut rng, b, d);
        let classes = normal_matrix(&mut rng, c, d);
        let labels: Vec<usize> = rand::seq::index::sample(&mut rng, c, b).into_vec();
        let t = gather_text_batch(&classes, &labels).map_err(|e| e.to_string())?;
        let analytic = loss_and_grad(&p, &x, &t, DEFAULT_SCALE).map_err(|e| e.to_string())?;
        let numeric = finite_diff_grad(
            |v| loss_value(&AdapterParams::unflatten(v, d).unwrap(), &x, &t, DEFAULT_SCALE).unwrap(),
            &p.flatten(),
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        let err = max_relative_error(&analytic.grad, &numeric, 1e-6);
        worst = worst.max(err);
        if err.is_nan() || err >= 1e-4 {
            return Err(format!("instance {k} (d={d}, B={b}) relative error {err:.3e}"));
        }
        count += 1;
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(10) {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!("{count} instances, max rel err {worst:.2e}, {elapsed:.2?}"))
}

fn zero_shot_at_init() -> Outcome {
    for k in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + k);
        let d = rng.random_range(2..=64);
        let n = rng.random_range(1..=40);
        let c = rng.random_range(2..=12);
        let x = normal_matrix(&mut rng, n, d);
        let text = normal_matrix(&mut rng, c, d);
        let p = AdapterParams::init(d, &mut rng).map_err(|e| e.to_string())?;
        let zs = predict(Predictor::ZeroShot, &x, &text, DEFAULT_SCALE).map_err(|e| e.to_string())?;
        let ad = predict(Predictor::Adapter(&p), &x, &text, DEFAULT_SCALE).map_err(|e| e.to_string())?;
        if zs != ad {
            return Err(format!("instance {k} (d={d}, N={n}, C={c}) predictions differ"));
        }
    }
    Ok("100 instances identical".into())
}

/// Weighted mean written independently of the library: explicit
/// normalized weights, per coordinate.
fn reference_weighted_mean(params: &[Vec<f64>], weights: &[usize]) -> Vec<f64> {
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    (0..params[0].len())
        .map(|j| {
            params
                .iter()
                .zip(weights)
                .map(|(p, &w)| p[j] * (w as f64 / total))
                .sum()
        })
        .collect()
}

fn aggregation_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + k);
        let clients = rng.random_range(1..=8);
        let len = rng.random_range(1..=64);
        let params: Vec<Vec<f64>> = (0..clients)
            .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let weights: Vec<usize> = (0..clients).map(|_| rng.random_range(1..=1000)).collect();
        let got = aggregate(&params, &weights).map_err(|e| e.to_string())?;
        let want = reference_weighted_mean(&params, &weights);
        for j in 0..len {
            let diff = (got[j] - want[j]).abs();
            worst = worst.max(diff);
            if diff > 1e-12 {
                return Err(format!("case {k} coordinate {j}: {} vs {}", got[j], want[j]));
            }
            let lo = params.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min);
            let hi = params.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max);
            if got[j] < lo || got[j] > hi {
                return Err(format!("case {k} coordinate {j}: {} outside [{lo}, {hi}]", got[j]));
            }
        }

        let single = aggregate(&params[..1], &weights[..1]).map_err(|e| e.to_string())?;
        if single != params[0] {
            return Err(format!("case {k}: single client not returned unchanged"));
        }
        let equal = aggregate(&params, &vec![weights[0]; clients]).map_err(|e| e.to_string())?;
        let plain: Vec<f64> = (0..len)
            .map(|j| params.iter().map(|p| p[j]).sum::<f64>() / clients as f64)
            .collect();
        if equal != plain {
            return Err(format!("case {k}: equal weights differ from the plain mean"));
        }
    }
    Ok(format!("200 cases, max abs diff {worst:.2e}; single-client and equal-weight exact"))
}

fn small_suite(seed: u64) -> Vec<FeatureDataset> {
    generate_synthetic_suite(&SynthSpec {
        n_domains: 4,
        n_per_domain: 60,
        dim: 8,
        n_classes: 3,
        shift: 0.5,
        seed,
    })
    .unwrap()
}

fn accounting() -> Outcome {
    let p512 = parameter_count(512);
    if p512 != 525_312 {
        return Err(format!("parameter_count(512) = {p512}"));
    }
    let ratio = CommLedger::new(512, REFERENCE_FULL_MODEL_PARAMS).compression_ratio();
    if ratio < 280.0 {
        return Err(format!("compression ratio {ratio:.1}"));
    }
    let suite = small_suite(5);
    let settings = TrainSettings {
        rounds: 5,
        ..TrainSettings::default()
    };
    let run = run_federation(&suite[..3], &settings, 0).map_err(|e| e.to_string())?;
    let p = parameter_count(8) as u64;
    let expected = 5 * 3 * 2 * p * 4;
    let summary = run.ledger.summary();
    let total = summary.total_uploaded_bytes + summary.total_downloaded_bytes;
    if total != expected {
        return Err(format!("ledger total {total} bytes, expected {expected}"));
    }
    Ok(format!("P(512) = {p512}, ratio {ratio:.1}, R=5 N=3 ledger {total} bytes"))
}

fn model_bits(run: &TrainedRun) -> Vec<u64> {
    match &run.models {
        TrainedModels::Shared(p) => p.flatten().iter().map(|v| v.to_bits()).collect(),
        _ => Vec::new(),
    }
}

fn fedprox_degeneracy() -> Outcome {
    let suite = small_suite(9);
    let base = TrainSettings {
        rounds: 8,
        lr: 2e-3,
        ..TrainSettings::default()
    };
    let prox = TrainSettings {
        algorithm: Algorithm::FedproxAdapter,
        mu: 0.0,
        ..base.clone()
    };
    for seed in [0, 1] {
        let a = run_federation(&suite[..3], &base, seed).map_err(|e| e.to_string())?;
        let b = run_federation(&suite[..3], &prox, seed).map_err(|e| e.to_string())?;
        if model_bits(&a).is_empty() || model_bits(&a) != model_bits(&b) {
            return Err(format!("seed {seed}: selected adapters differ"));
        }
        let hist = |r: &TrainedRun| serde_json::to_string(&r.history).unwrap();
        if hist(&a) != hist(&b) || a.selected_rounds != b.selected_rounds {
            return Err(format!("seed {seed}: round histories differ"));
        }
    }
    Ok("selected adapters and histories bit-identical for seeds 0, 1".into())
}

fn execute(cfg: &RunConfig) -> Result<(String, String), String> {
    let (clients, target) = cfg.load_datasets().map_err(|e| e.to_string())?;
    let mut reports: Vec<MultiSeedReport> = Vec::new();
    let mut json = String::new();
    for alg in Algorithm::all() {
        let mut c = cfg.clone();
        c.train.algorithm = alg;
        let exp = run_experiment(&c, &clients, target.as_ref()).map_err(|e| e.to_string())?;
        json.push_str(&exp.report.to_json());
        reports.push(exp.report);
    }
    Ok((reports_to_csv(&reports), json))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let suite = small_suite(13);
    let mut paths = Vec::new();
    for ds in &suite {
        let path = dir.path().join(format!("{}.fcf", ds.domain_name));
        write_feature_file(ds, &path).map_err(|e| e.to_string())?;
        paths.push(path);
    }
    let mut cfg = RunConfig::new(paths[..3].to_vec(), Some(paths[3].clone()));
    cfg.seeds = vec![0, 1];
    cfg.train.rounds = 6;
    cfg.train.lr = 2e-3;
    let first = execute(&cfg)?;
    let second = execute(&cfg)?;
    if first != second {
        return Err("two executions produced different reports".into());
    }
    cfg.train.workers = Some(1);
    let serial = execute(&cfg)?;
    cfg.train.workers = Some(4);
    let wide = execute(&cfg)?;
    if serial != first || wide != first {
        return Err("reports depend on the worker count".into());
    }
    Ok(format!(
        "CSV ({} bytes) and JSON ({} bytes) identical across runs and 1/4 workers",
        first.0.len(),
        first.1.len()
    ))
}

/// Mean generalization accuracy per held-out domain, recorded from the
/// first run of this experiment: (zero-shot, local-only, fedclip).
const DESK_FIXTURES: [(f64, f64, f64); 4] = [
    (0.755, 0.8066666666666666, 0.8166666666666665),
    (0.79, 0.826111111111111, 0.8316666666666667),
    (0.755, 0.7872222222222223, 0.7916666666666666),
    (0.77, 0.7927777777777778, 0.8033333333333333),
];

fn desk_experiment() -> Outcome {
    let start = Instant::now();
    let suite = generate_synthetic_suite(&SynthSpec {
        n_domains: 4,
        n_per_domain: 200,
        dim: 32,
        n_classes: 4,
        shift: 0.5,
        seed: 7,
    })
    .map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for target in 0..suite.len() {
        let clients: Vec<FeatureDataset> = (0..suite.len())
            .filter(|&i| i != target)
            .map(|i| suite[i].clone())
            .collect();
        let mut gen = [0.0; 3];
        for (slot, alg) in [Algorithm::ZeroShot, Algorithm::LocalOnly, Algorithm::Fedclip]
            .into_iter()
            .enumerate()
        {
            let settings = TrainSettings {
                algorithm: alg,
                rounds: 50,
                ..TrainSettings::default()
            };
            let mut runs = Vec::new();
            for seed in 0..3 {
                let run = run_federation(&clients, &settings, seed).map_err(|e| e.to_string())?;
                runs.push(evaluate_run(&run, "desk", &clients, Some(&suite[target])).map_err(|e| e.to_string())?);
            }
            let rep = MultiSeedReport::from_runs(runs).map_err(|e| e.to_string())?;
            gen[slot] = rep.mean.generalization.as_ref().unwrap().accuracy;
        }
        let [zs, local, fed] = gen;
        let name = &suite[target].domain_name;
        lines.push(format!("{name}: fedclip {fed:.4} local-only {local:.4} zero-shot {zs:.4}"));
        if !(fed > zs && fed > local) {
            failures.push(format!("{name}: fedclip {fed} does not beat zero-shot {zs} and local-only {local}"));
        }
        let (pz, pl, pf) = DESK_FIXTURES[target];
        let pinned = |got: f64, want: f64| (got - want).abs() <= 1e-12;
        if !(pinned(zs, pz) && pinned(local, pl) && pinned(fed, pf)) {
            failures.push(format!("{name}: values moved from the pinned fixtures ({zs:?}, {local:?}, {fed:?})"));
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(60) {
        failures.push(format!("took {elapsed:?}"));
    }
    for l in &lines {
        println!("    {l}");
    }
    if failures.is_empty() {
        Ok(format!("4 held-out domains, 3 seeds, R=50, {elapsed:.2?}"))
    } else {
        Err(failures.join("; "))
    }
}

fn comprehensive_identity() -> Outcome {
    // Reported per-domain accuracies (%) and the reported comprehensive value.
    let rows: [(&str, [f64; 4], f64); 4] = [
        ("A", [96.34, 97.65, 99.40, 86.75], 95.04),
        ("C", [97.91, 96.33, 99.10, 86.88], 95.06),
        ("P", [99.76, 97.56, 97.65, 86.75], 95.43),
        ("S", [85.59, 97.31, 97.65, 99.40], 94.99),
    ];
    let mut parts = Vec::new();
    for (name, values, reported) in rows {
        let got = comprehensive_accuracy(Some(values[0]), &values[1..]).map_err(|e| e.to_string())?;
        let diff = (got - reported).abs();
        // Two rows sit exactly on the rounding boundary; allow for binary
        // representation of the decimal inputs.
        if diff > 0.005 + 1e-9 {
            return Err(format!("{name}: {got} vs {reported}"));
        }
        parts.push(format!("{name} {got:.4}"));
    }
    Ok(parts.join(", "))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", gradient_check),
        ("zero-shot at init", zero_shot_at_init),
        ("aggregation oracle", aggregation_oracle),
        ("parameter/communication accounting", accounting),
        ("fedprox degeneracy", fedprox_degeneracy),
        ("determinism", determinism),
        ("desk-scale synthetic experiment", desk_experiment),
        ("comprehensive-metric identity", comprehensive_identity),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
