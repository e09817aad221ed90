//! Prediction, accuracy, model selection, and the personalization /
//! generalization / comprehensive reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::config::{check_compatible, RunConfig, TrainSettings};
use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::federation::{client_split, run_federation, CommLedger, LedgerSummary, RoundReport, TrainedModels, TrainedRun};
use crate::numerics::{matmul_transposed, rowwise_l2_normalize, Matrix};

/// What produces the image embedding that is compared against class text.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    ZeroShot,
    Adapter(&'a AdapterParams),
}

/// Argmax over classes of the cosine similarity between each (adapted or
/// raw) image feature and each class text feature. Ties go to the lowest
/// class index.
///
/// The logit scale does not change the argmax; it is accepted so callers can
/// pass the same settings they train with.
pub fn predict(
    predictor: Predictor<'_>,
    features: &Matrix,
    class_text_features: &Matrix,
    scale: f64,
) -> Result<Vec<usize>> {
    if features.cols() != class_text_features.cols() {
        return Err(Error::shape(format!(
            "features have width {}, class text {}",
            features.cols(),
            class_text_features.cols()
        )));
    }
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::param(format!("scale must be positive, got {scale}")));
    }
    if class_text_features.rows() == 0 {
        return Err(Error::shape("class table is empty"));
    }
    let image = match predictor {
        Predictor::ZeroShot => rowwise_l2_normalize(features)?,
        Predictor::Adapter(p) => rowwise_l2_normalize(&p.forward(features)?.adapted)?,
    };
    let text = rowwise_l2_normalize(class_text_features)?;
    let sims = matmul_transposed(&image, &text)?;
    Ok(sims
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Fraction of exact matches.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::param("accuracy of an empty prediction list"));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Accuracy of `predictor` on the given rows of a dataset.
pub fn accuracy_on(
    predictor: Predictor<'_>,
    ds: &FeatureDataset,
    indices: Option<&[usize]>,
    scale: f64,
) -> Result<f64> {
    let (features, labels) = match indices {
        Some(idx) => ds.subset(idx),
        None => (ds.features.clone(), ds.labels.clone()),
    };
    let pred = predict(predictor, &features, &ds.class_text_features, scale)?;
    accuracy(&pred, &labels)
}

/// Index of the highest score; ties resolve to the earliest index.
pub fn argmax_first(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::param("cannot select from an empty history"));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Round with the best mean validation accuracy, earliest on ties.
pub fn select_best_round(history: &[RoundReport]) -> Result<usize> {
    let scores: Vec<f64> = history.iter().map(|r| r.mean_valid_accuracy).collect();
    argmax_first(&scores).map(|i| history[i].round)
}

/// Unweighted mean of the target accuracy (when present) and every
/// participant's test accuracy.
pub fn comprehensive_accuracy(generalization: Option<f64>, personalization: &[f64]) -> Result<f64> {
    let values: Vec<f64> = generalization.into_iter().chain(personalization.iter().copied()).collect();
    if values.is_empty() {
        return Err(Error::param("no accuracies to average"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedAccuracy {
    pub name: String,
    pub accuracy: f64,
}

/// Results of one trained run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub algorithm: String,
    pub seed: u64,
    /// Test-split accuracy of each participating client.
    pub personalization: Vec<NamedAccuracy>,
    /// Accuracy on the full unseen target domain. For per-client models this
    /// is the mean over the clients' adapters.
    pub generalization: Option<NamedAccuracy>,
    /// Target accuracy of each client's own adapter (per-client models only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generalization_by_client: Vec<NamedAccuracy>,
    pub comprehensive: f64,
    pub selected_rounds: Vec<usize>,
    pub ledger: LedgerSummary,
}

impl EvalReport {
    pub fn personalization_mean(&self) -> f64 {
        mean(self.personalization.iter().map(|a| a.accuracy))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Evaluates the selected model(s) of a run on each participant's test split
/// and on the whole target domain.
pub fn evaluate_run(
    run: &TrainedRun,
    task: &str,
    clients: &[FeatureDataset],
    target: Option<&FeatureDataset>,
) -> Result<EvalReport> {
    if clients.len() != run.splits.len() {
        return Err(Error::shape(format!(
            "run was trained with {} clients, got {}",
            run.splits.len(),
            clients.len()
        )));
    }
    let scale = run.settings.scale;
    let predictor_for = |i: usize| -> Predictor<'_> {
        match &run.models {
            TrainedModels::ZeroShot => Predictor::ZeroShot,
            TrainedModels::Shared(p) => Predictor::Adapter(p),
            TrainedModels::PerClient(ps) => Predictor::Adapter(&ps[i]),
        }
    };

    let mut personalization = Vec::with_capacity(clients.len());
    for (i, (ds, split)) in clients.iter().zip(&run.splits).enumerate() {
        personalization.push(NamedAccuracy {
            name: ds.domain_name.clone(),
            accuracy: accuracy_on(predictor_for(i), ds, Some(&split.test), scale)?,
        });
    }

    let mut generalization_by_client = Vec::new();
    let generalization = match target {
        None => None,
        Some(t) => {
            let acc = match &run.models {
                TrainedModels::PerClient(ps) => {
                    for (ds, p) in clients.iter().zip(ps) {
                        generalization_by_client.push(NamedAccuracy {
                            name: ds.domain_name.clone(),
                            accuracy: accuracy_on(Predictor::Adapter(p), t, None, scale)?,
                        });
                    }
                    mean(generalization_by_client.iter().map(|a| a.accuracy))
                }
                _ => accuracy_on(predictor_for(0), t, None, scale)?,
            };
            Some(NamedAccuracy {
                name: t.domain_name.clone(),
                accuracy: acc,
            })
        }
    };

    let pers: Vec<f64> = personalization.iter().map(|a| a.accuracy).collect();
    let comprehensive = comprehensive_accuracy(generalization.as_ref().map(|g| g.accuracy), &pers)?;
    Ok(EvalReport {
        task: task.to_string(),
        algorithm: run.settings.algorithm.as_str().to_string(),
        seed: run.seed,
        personalization,
        generalization,
        generalization_by_client,
        comprehensive,
        selected_rounds: run.selected_rounds.clone(),
        ledger: run.ledger.summary(),
    })
}

/// Evaluates one saved adapter as if it were the shared model of a run with
/// `settings` and `seed`; the seed fixes the clients' test splits.
pub fn evaluate_adapter(
    adapter: &AdapterParams,
    round: usize,
    settings: &TrainSettings,
    seed: u64,
    task: &str,
    clients: &[FeatureDataset],
    target: Option<&FeatureDataset>,
) -> Result<EvalReport> {
    check_compatible(clients, target, Some(adapter.dim()))?;
    let splits = clients
        .iter()
        .enumerate()
        .map(|(i, ds)| client_split(i, ds, seed))
        .collect::<Result<Vec<_>>>()?;
    let run = TrainedRun {
        settings: settings.clone(),
        seed,
        models: TrainedModels::Shared(adapter.clone()),
        selected_rounds: vec![round],
        history: Vec::new(),
        ledger: CommLedger::new(adapter.dim(), settings.reference_full_model_params),
        splits,
    };
    evaluate_run(&run, task, clients, target)
}

/// Per-seed reports of one task/algorithm and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub task: String,
    pub algorithm: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<EvalReport>,
    pub mean: MeanReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub personalization: Vec<NamedAccuracy>,
    pub personalization_average: f64,
    pub generalization: Option<NamedAccuracy>,
    pub comprehensive: f64,
}

impl MultiSeedReport {
    pub fn from_runs(runs: Vec<EvalReport>) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::param("no runs to aggregate"))?;
        for r in &runs {
            let names = |r: &EvalReport| -> Vec<String> {
                r.personalization.iter().map(|a| a.name.clone()).collect()
            };
            if r.task != first.task
                || r.algorithm != first.algorithm
                || names(r) != names(first)
                || r.generalization.as_ref().map(|g| &g.name)
                    != first.generalization.as_ref().map(|g| &g.name)
            {
                return Err(Error::Validation(format!(
                    "seed {} does not describe the same task/algorithm/clients as seed {}",
                    r.seed, first.seed
                )));
            }
        }
        let personalization = first
            .personalization
            .iter()
            .enumerate()
            .map(|(i, a)| NamedAccuracy {
                name: a.name.clone(),
                accuracy: mean(runs.iter().map(|r| r.personalization[i].accuracy)),
            })
            .collect();
        let generalization = first.generalization.as_ref().map(|g| NamedAccuracy {
            name: g.name.clone(),
            accuracy: mean(runs.iter().map(|r| r.generalization.as_ref().unwrap().accuracy)),
        });
        let mean_report = MeanReport {
            personalization,
            personalization_average: mean(runs.iter().map(EvalReport::personalization_mean)),
            generalization,
            comprehensive: mean(runs.iter().map(|r| r.comprehensive)),
        };
        Ok(MultiSeedReport {
            task: first.task.clone(),
            algorithm: first.algorithm.clone(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            runs,
            mean: mean_report,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("bad report JSON: {e}")))
    }
}

/// Every seed of one configuration, trained and evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub report: MultiSeedReport,
    pub runs: Vec<TrainedRun>,
}

/// Trains `cfg.train` once per seed in `cfg.seeds` on already loaded data.
pub fn run_experiment(
    cfg: &RunConfig,
    clients: &[FeatureDataset],
    target: Option<&FeatureDataset>,
) -> Result<Experiment> {
    cfg.validate()?;
    let task = cfg.task_name(target);
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    let mut evals = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = run_federation(clients, &cfg.train, seed)?;
        evals.push(evaluate_run(&run, &task, clients, target)?);
        runs.push(run);
    }
    Ok(Experiment {
        report: MultiSeedReport::from_runs(evals)?,
        runs,
    })
}

pub const CSV_HEADER: &str = "task,seed,metric_type,name,accuracy";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn push_csv_rows(
    out: &mut String,
    task: &str,
    seed: &str,
    pers: &[NamedAccuracy],
    gen: Option<&NamedAccuracy>,
    comprehensive: f64,
) {
    let task = csv_field(task);
    for a in pers {
        let _ = writeln!(out, "{task},{seed},personalization,{},{}", csv_field(&a.name), a.accuracy);
    }
    if let Some(g) = gen {
        let _ = writeln!(out, "{task},{seed},generalization,{},{}", csv_field(&g.name), g.accuracy);
    }
    let _ = writeln!(out, "{task},{seed},comprehensive,all,{comprehensive}");
}

/// CSV with one row per metric per seed, followed by rows for the means
/// (seed column `mean`).
pub fn reports_to_csv(reports: &[MultiSeedReport]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for rep in reports {
        let task = format!("{}:{}", rep.task, rep.algorithm);
        for r in &rep.runs {
            push_csv_rows(
                &mut out,
                &task,
                &r.seed.to_string(),
                &r.personalization,
                r.generalization.as_ref(),
                r.comprehensive,
            );
        }
        push_csv_rows(
            &mut out,
            &task,
            "mean",
            &rep.mean.personalization,
            rep.mean.generalization.as_ref(),
            rep.mean.comprehensive,
        );
    }
    out
}

/// Pretty JSON array of reports, newline terminated.
pub fn reports_to_json(reports: &[MultiSeedReport]) -> String {
    let mut s = serde_json::to_string_pretty(reports).expect("reports serialise");
    s.push('\n');
    s
}

pub fn reports_from_json(text: &str) -> Result<Vec<MultiSeedReport>> {
    serde_json::from_str(text).map_err(|e| Error::Validation(format!("bad report JSON: {e}")))
}

/// One row in a parsed CSV report.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub task: String,
    pub seed: String,
    pub metric_type: String,
    pub name: String,
    pub accuracy: f64,
}

/// Parses CSV written by [`reports_to_csv`]. Quoted fields are not expected
/// in names produced by this crate and are rejected.
pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::Validation(format!("unexpected CSV header {other:?}"))),
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 || l.contains('"') {
                return Err(Error::Validation(format!("malformed CSV row {l:?}")));
            }
            Ok(CsvRow {
                task: f[0].to_string(),
                seed: f[1].to_string(),
                metric_type: f[2].to_string(),
                name: f[3].to_string(),
                accuracy: f[4]
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad accuracy in {l:?}")))?,
            })
        })
        .collect()
}

fn pct(v: f64) -> String {
    format!("{:6.2}", 100.0 * v)
}

/// Human-readable table of a multi-seed report.
pub fn render_table(rep: &MultiSeedReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "task {} / {}", rep.task, rep.algorithm);
    let mut header = String::from("seed  ");
    for a in &rep.mean.personalization {
        let _ = write!(header, " {:>10}", truncate(&a.name, 10));
    }
    header.push_str("   pers.avg");
    if let Some(g) = &rep.mean.generalization {
        let _ = write!(header, " {:>10}", format!("*{}", truncate(&g.name, 9)));
    }
    header.push_str("     comp.");
    let _ = writeln!(out, "{header}");
    let line = |label: &str, pers: Vec<f64>, avg: f64, gen: Option<f64>, comp: f64| {
        let mut s = format!("{label:<6}");
        for p in pers {
            let _ = write!(s, "     {}", pct(p));
        }
        let _ = write!(s, "     {}", pct(avg));
        if let Some(g) = gen {
            let _ = write!(s, "     {}", pct(g));
        }
        let _ = write!(s, "    {}", pct(comp));
        s
    };
    for r in &rep.runs {
        let _ = writeln!(
            out,
            "{}",
            line(
                &r.seed.to_string(),
                r.personalization.iter().map(|a| a.accuracy).collect(),
                r.personalization_mean(),
                r.generalization.as_ref().map(|g| g.accuracy),
                r.comprehensive,
            )
        );
    }
    let _ = writeln!(
        out,
        "{}",
        line(
            "mean",
            rep.mean.personalization.iter().map(|a| a.accuracy).collect(),
            rep.mean.personalization_average,
            rep.mean.generalization.as_ref().map(|g| g.accuracy),
            rep.mean.comprehensive,
        )
    );
    out.push_str("(accuracies in %; * marks the unseen target domain)\n");
    out
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::CommLedger;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn predicts_matching_class_vector() {
        let table = Matrix::identity(4);
        let x = Matrix::from_rows(&[[0.0, 0.0, 3.0, 0.0]]).unwrap();
        assert_eq!(predict(Predictor::ZeroShot, &x, &table, 100.0).unwrap(), vec![2]);
    }

    #[test]
    fn picks_higher_cosine_and_breaks_ties_low() {
        // cosines with class 0 / class 1: 0.9 and 0.1 (unit rows)
        let table = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[[0.9, 0.1], [0.5, 0.5]]).unwrap();
        assert_eq!(predict(Predictor::ZeroShot, &x, &table, 1.0).unwrap(), vec![0, 0]);
    }

    #[test]
    fn fresh_adapter_predicts_like_zero_shot() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = 12;
        let p = AdapterParams::init(d, &mut rng).unwrap();
        let rand_m = |rng: &mut ChaCha8Rng, r: usize| {
            Matrix::new(r, d, (0..r * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = rand_m(&mut rng, 50);
        let t = rand_m(&mut rng, 5);
        assert_eq!(
            predict(Predictor::Adapter(&p), &x, &t, 100.0).unwrap(),
            predict(Predictor::ZeroShot, &x, &t, 100.0).unwrap()
        );
    }

    #[test]
    fn prediction_ignores_row_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::new(20, 6, (0..120).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let t = Matrix::new(3, 6, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let scaled = Matrix::new(
            20,
            6,
            x.row_iter()
                .enumerate()
                .flat_map(|(i, r)| r.iter().map(move |v| v * (0.5 + i as f64)))
                .collect(),
        )
        .unwrap();
        assert_eq!(
            predict(Predictor::ZeroShot, &x, &t, 1.0).unwrap(),
            predict(Predictor::ZeroShot, &scaled, &t, 1.0).unwrap()
        );
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Parameter(_))));
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(Error::Shape(_))));
    }

    fn history(scores: &[f64]) -> Vec<RoundReport> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| RoundReport {
                round: i,
                client_valid_accuracy: vec![s],
                mean_valid_accuracy: s,
                uploaded_bytes: 0,
                downloaded_bytes: 0,
                best_so_far: false,
            })
            .collect()
    }

    #[test]
    fn best_round_selection() {
        assert_eq!(select_best_round(&history(&[0.1, 0.2, 0.3])).unwrap(), 2);
        assert_eq!(select_best_round(&history(&[0.5, 0.9, 0.9])).unwrap(), 1);
        assert_eq!(select_best_round(&history(&[0.4])).unwrap(), 0);
        assert!(matches!(select_best_round(&[]), Err(Error::Parameter(_))));
    }

    #[test]
    fn comprehensive_on_table_values() {
        let c = comprehensive_accuracy(Some(96.34), &[97.65, 99.40, 86.75]).unwrap();
        assert!((c - 95.035).abs() < 1e-9);
        assert_eq!(comprehensive_accuracy(Some(0.75), &[0.75, 0.75]).unwrap(), 0.75);
        assert!((comprehensive_accuracy(Some(0.8), &[0.8, 0.8]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(comprehensive_accuracy(None, &[0.5, 0.7]).unwrap(), 0.6);
        assert!(comprehensive_accuracy(None, &[]).is_err());
    }

    fn report(seed: u64, pers: &[f64], gen: f64) -> EvalReport {
        let personalization: Vec<NamedAccuracy> = pers
            .iter()
            .enumerate()
            .map(|(i, &a)| NamedAccuracy {
                name: format!("c{i}"),
                accuracy: a,
            })
            .collect();
        EvalReport {
            task: "t".into(),
            algorithm: "fedclip".into(),
            seed,
            comprehensive: comprehensive_accuracy(Some(gen), pers).unwrap(),
            personalization,
            generalization: Some(NamedAccuracy {
                name: "tgt".into(),
                accuracy: gen,
            }),
            generalization_by_client: vec![],
            selected_rounds: vec![0],
            ledger: CommLedger::new(4, 100).summary(),
        }
    }

    #[test]
    fn multi_seed_means() {
        let runs = vec![
            report(0, &[0.5, 0.75], 0.25),
            report(1, &[1.0, 0.5], 0.5),
            report(2, &[0.75, 1.0], 0.75),
        ];
        let m = MultiSeedReport::from_runs(runs).unwrap();
        assert_eq!(m.seeds, vec![0, 1, 2]);
        assert!((m.mean.personalization[0].accuracy - 0.75).abs() < 1e-12);
        assert!((m.mean.personalization[1].accuracy - 0.75).abs() < 1e-12);
        assert!((m.mean.generalization.as_ref().unwrap().accuracy - 0.5).abs() < 1e-12);
        let expected_comp = m.runs.iter().map(|r| r.comprehensive).sum::<f64>() / 3.0;
        assert!((m.mean.comprehensive - expected_comp).abs() < 1e-12);

        let back = MultiSeedReport::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);

        let csv = reports_to_csv(std::slice::from_ref(&m));
        let rows = parse_csv(&csv).unwrap();
        // 3 seeds + mean, each with 2 personalization + 1 generalization + 1 comprehensive
        assert_eq!(rows.len(), 16);
        assert!(rows.iter().any(|r| r.seed == "mean" && r.metric_type == "generalization"));
        assert!(render_table(&m).contains("mean"));
    }

    #[test]
    fn mismatched_runs_are_rejected() {
        let mut other = report(1, &[0.5, 0.5], 0.5);
        other.task = "different".into();
        assert!(MultiSeedReport::from_runs(vec![report(0, &[0.5, 0.5], 0.5), other]).is_err());
        assert!(MultiSeedReport::from_runs(vec![]).is_err());
    }
}
