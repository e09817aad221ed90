//! Client/server orchestration: local adapter training, sample-weighted
//! adapter averaging, the round loop with validation-based model selection,
//! and exact accounting of the bytes exchanged.
//!
//! Only adapter parameters travel between server and clients. Optimizer
//! moments stay with each client and persist across rounds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{parameter_count, AdapterParams};
use crate::config::{check_compatible, Algorithm, TrainSettings};
use crate::data::{derive_seed, make_batches, split_60_20_20, write_atomic, FeatureDataset, SplitDataset};
use crate::error::{Error, ErrorKind, Result};
use crate::evaluation::{accuracy_on, Predictor};
use crate::loss::{gather_text_batch, loss_and_grad};
use crate::optim::{apply_prox, AdamState};

/// Bytes per transmitted parameter (32-bit reals on the wire).
pub const BYTES_PER_VALUE: u64 = 4;

const INIT_STREAM: u64 = 0x1A17;
const SPLIT_STREAM: u64 = 0x5B11_0000;
const BATCH_STREAM: u64 = 0xBA7C_0000;

/// The train/valid/test split client `id` uses under training seed `seed`.
pub fn client_split(id: usize, dataset: &FeatureDataset, seed: u64) -> Result<SplitDataset> {
    split_60_20_20(dataset.len(), derive_seed(seed, SPLIT_STREAM + id as u64))
        .map_err(|e| Error::Config(format!("client {} ({}): {e}", id, dataset.domain_name)))
}

/// One participant: its data, split, current adapter, optimizer and RNG.
#[derive(Debug, Clone)]
pub struct ClientState<'a> {
    pub id: usize,
    pub dataset: &'a FeatureDataset,
    pub split: SplitDataset,
    pub adapter: AdapterParams,
    pub optimizer: AdamState,
    rng: ChaCha8Rng,
}

impl<'a> ClientState<'a> {
    /// Builds a client with a seeded split and batch stream. The adapter
    /// starts as `initial`.
    pub fn new(
        id: usize,
        dataset: &'a FeatureDataset,
        initial: &AdapterParams,
        settings: &TrainSettings,
        seed: u64,
    ) -> Result<Self> {
        if dataset.dim() != initial.dim() {
            return Err(Error::shape(format!(
                "client {id} has feature width {}, adapter has {}",
                dataset.dim(),
                initial.dim()
            )));
        }
        if dataset.num_classes() < 2 {
            return Err(Error::Config(format!(
                "client {} ({}) needs at least 2 classes",
                id, dataset.domain_name
            )));
        }
        let split = client_split(id, dataset, seed)?;
        Ok(ClientState {
            id,
            dataset,
            split,
            adapter: initial.clone(),
            optimizer: AdamState::new(initial.parameter_count(), settings.adam()),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, BATCH_STREAM + id as u64)),
        })
    }

    /// `n_i`, the weight of this client in aggregation.
    pub fn n_train(&self) -> usize {
        self.split.train.len()
    }

    /// Starts from `global`, runs `local_epochs` epochs of mini-batch Adam on
    /// the contrastive loss (plus the proximal pull towards `global` when
    /// `mu > 0`), and returns the resulting adapter.
    pub fn local_update(
        &mut self,
        global: &AdapterParams,
        local_epochs: usize,
        batch_size: usize,
        mu: f64,
        scale: f64,
    ) -> Result<AdapterParams> {
        if global.dim() != self.dataset.dim() {
            return Err(Error::shape(format!(
                "global adapter width {} does not match client {} width {}",
                global.dim(),
                self.id,
                self.dataset.dim()
            )));
        }
        if local_epochs == 0 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        if self.split.train.is_empty() {
            return Err(Error::Config(format!("client {} has an empty training split", self.id)));
        }
        let d = global.dim();
        let anchor = global.flatten();
        let mut params = anchor.clone();
        let mut current = global.clone();
        for _ in 0..local_epochs {
            for batch in make_batches(&self.split.train, batch_size, &mut self.rng) {
                let (x, labels) = self.dataset.subset(&batch);
                let text = gather_text_batch(&self.dataset.class_text_features, &labels)?;
                let lg = loss_and_grad(&current, &x, &text, scale)?;
                let grad = if mu > 0.0 {
                    apply_prox(&lg.grad, &params, &anchor, mu)?
                } else {
                    lg.grad
                };
                self.optimizer.step(&mut params, &grad)?;
                current = AdapterParams::unflatten(&params, d)?;
            }
        }
        self.adapter = current;
        Ok(self.adapter.clone())
    }

    pub fn valid_accuracy(&self, adapter: &AdapterParams, scale: f64) -> Result<f64> {
        accuracy_on(Predictor::Adapter(adapter), self.dataset, Some(&self.split.valid), scale)
    }
}

/// Coordinate-wise `Σ n_i · w_i / Σ n_i`, accumulated in client order.
///
/// Weights are divided by their common factor first, so equal weights give
/// exactly the plain mean and a single client gets its own vector back.
pub fn aggregate<V: AsRef<[f64]>>(params: &[V], weights: &[usize]) -> Result<Vec<f64>> {
    let first = params
        .first()
        .ok_or_else(|| Error::shape("cannot aggregate an empty client list"))?
        .as_ref();
    if weights.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameter vectors but {} weights",
            params.len(),
            weights.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| p.as_ref().len() != first.len()) {
        return Err(Error::shape(format!(
            "parameter vectors differ in length: {} vs {}",
            first.len(),
            p.as_ref().len()
        )));
    }
    if weights.contains(&0) {
        return Err(Error::param("every client weight must be at least 1"));
    }
    let g = weights.iter().fold(0, |a, &b| gcd(a, b));
    let total = weights.iter().map(|&n| n / g).sum::<usize>() as f64;
    let mut out = vec![0.0; first.len()];
    for (p, &n) in params.iter().zip(weights) {
        let m = (n / g) as f64;
        for (o, v) in out.iter_mut().zip(p.as_ref()) {
            *o += m * v;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTraffic {
    pub round: usize,
    pub uploaded_bytes: u64,
    pub downloaded_bytes: u64,
}

/// Bytes exchanged per round, with the full-model reference for comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub parameter_count: u64,
    pub reference_full_model_params: u64,
    pub rounds: Vec<RoundTraffic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub parameter_count: u64,
    pub rounds: usize,
    pub bytes_per_round: u64,
    pub total_uploaded_bytes: u64,
    pub total_downloaded_bytes: u64,
    pub reference_full_model_params: u64,
    pub compression_ratio: f64,
}

impl CommLedger {
    pub fn new(dim: usize, reference_full_model_params: u64) -> Self {
        CommLedger {
            parameter_count: parameter_count(dim) as u64,
            reference_full_model_params,
            rounds: Vec::new(),
        }
    }

    /// Bytes one client sends (or receives) per round.
    pub fn bytes_per_transfer(&self) -> u64 {
        self.parameter_count * BYTES_PER_VALUE
    }

    /// Every client downloads the global adapter and uploads its update.
    pub fn record_exchange(&mut self, round: usize, n_clients: usize) -> RoundTraffic {
        let bytes = n_clients as u64 * self.bytes_per_transfer();
        let t = RoundTraffic {
            round,
            uploaded_bytes: bytes,
            downloaded_bytes: bytes,
        };
        self.rounds.push(t);
        t
    }

    /// A round in which nothing is exchanged.
    pub fn record_silent(&mut self, round: usize) -> RoundTraffic {
        let t = RoundTraffic {
            round,
            uploaded_bytes: 0,
            downloaded_bytes: 0,
        };
        self.rounds.push(t);
        t
    }

    pub fn total_uploaded(&self) -> u64 {
        self.rounds.iter().map(|r| r.uploaded_bytes).sum()
    }

    pub fn total_downloaded(&self) -> u64 {
        self.rounds.iter().map(|r| r.downloaded_bytes).sum()
    }

    /// How many times more parameters the full model has than the adapter.
    pub fn compression_ratio(&self) -> f64 {
        self.reference_full_model_params as f64 / self.parameter_count as f64
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            parameter_count: self.parameter_count,
            rounds: self.rounds.len(),
            bytes_per_round: self
                .rounds
                .first()
                .map_or(0, |r| r.uploaded_bytes + r.downloaded_bytes),
            total_uploaded_bytes: self.total_uploaded(),
            total_downloaded_bytes: self.total_downloaded(),
            reference_full_model_params: self.reference_full_model_params,
            compression_ratio: self.compression_ratio(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 0 is the untrained starting point; round `r` follows `r` rounds.
    pub round: usize,
    pub client_valid_accuracy: Vec<f64>,
    pub mean_valid_accuracy: f64,
    pub uploaded_bytes: u64,
    pub downloaded_bytes: u64,
    pub best_so_far: bool,
}

/// The model(s) a run ends with.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModels {
    ZeroShot,
    Shared(AdapterParams),
    PerClient(Vec<AdapterParams>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun {
    pub settings: TrainSettings,
    pub seed: u64,
    /// Selected model(s): best mean validation accuracy for shared models,
    /// best own validation accuracy per client otherwise.
    pub models: TrainedModels,
    /// One entry for shared models, one per client for per-client models.
    pub selected_rounds: Vec<usize>,
    pub history: Vec<RoundReport>,
    pub ledger: CommLedger,
    pub splits: Vec<SplitDataset>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// One round of adapter-only federated averaging.
///
/// Clients update in parallel from `global`; the server averages the
/// returned adapters by training-set size and reports the mean validation
/// accuracy of the averaged adapter.
pub fn run_round(
    clients: &mut [ClientState<'_>],
    global: &AdapterParams,
    settings: &TrainSettings,
    round: usize,
) -> Result<(AdapterParams, RoundReport)> {
    if clients.is_empty() {
        return Err(Error::Config("a round needs at least one client".into()));
    }
    let mu = settings.effective_mu();
    let updates: Vec<Vec<f64>> = clients
        .par_iter_mut()
        .map(|c| {
            c.local_update(global, settings.local_epochs, settings.batch_size, mu, settings.scale)
                .map(|p| p.flatten())
        })
        .collect::<Result<_>>()?;
    let weights: Vec<usize> = clients.iter().map(ClientState::n_train).collect();
    let merged = AdapterParams::unflatten(&aggregate(&updates, &weights)?, global.dim())?;
    let valid = clients
        .par_iter()
        .map(|c| c.valid_accuracy(&merged, settings.scale))
        .collect::<Result<Vec<_>>>()?;
    let bytes = clients.len() as u64 * parameter_count(global.dim()) as u64 * BYTES_PER_VALUE;
    let report = RoundReport {
        round,
        mean_valid_accuracy: mean(&valid),
        client_valid_accuracy: valid,
        uploaded_bytes: bytes,
        downloaded_bytes: bytes,
        best_so_far: false,
    };
    Ok((merged, report))
}

fn tag_round(round: usize, err: Error) -> Error {
    if err.kind() == ErrorKind::Numeric {
        Error::RoundFailed {
            round,
            source: Box::new(err),
        }
    } else {
        err
    }
}

/// Trains according to `settings.algorithm` for `settings.rounds` rounds
/// and returns the selected model(s), the round history and the ledger.
///
/// Output depends only on the datasets, settings and seed, never on how
/// many workers run the client updates.
pub fn run_federation(
    clients: &[FeatureDataset],
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainedRun> {
    settings.validate()?;
    check_compatible(clients, None, None)?;
    let d = clients[0].dim();
    let initial = AdapterParams::init(d, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM)))?;
    let mut states = clients
        .iter()
        .enumerate()
        .map(|(i, ds)| ClientState::new(i, ds, &initial, settings, seed))
        .collect::<Result<Vec<_>>>()?;
    let splits = states.iter().map(|c| c.split.clone()).collect();
    let ledger = CommLedger::new(d, settings.reference_full_model_params);

    let (models, selected_rounds, history, ledger) = with_pool(settings.workers, || match settings.algorithm {
        Algorithm::ZeroShot => zero_shot(&states, settings, ledger),
        Algorithm::Fedclip | Algorithm::FedproxAdapter => shared_rounds(&mut states, initial, settings, ledger),
        Algorithm::LocalOnly => local_rounds(&mut states, settings, ledger),
    })??;

    Ok(TrainedRun {
        settings: settings.clone(),
        seed,
        models,
        selected_rounds,
        history,
        ledger,
        splits,
    })
}

type RoundsOutcome = (TrainedModels, Vec<usize>, Vec<RoundReport>, CommLedger);

fn zero_shot(states: &[ClientState<'_>], settings: &TrainSettings, ledger: CommLedger) -> Result<RoundsOutcome> {
    let valid = states
        .iter()
        .map(|c| accuracy_on(Predictor::ZeroShot, c.dataset, Some(&c.split.valid), settings.scale))
        .collect::<Result<Vec<_>>>()?;
    let report = RoundReport {
        round: 0,
        mean_valid_accuracy: mean(&valid),
        client_valid_accuracy: valid,
        uploaded_bytes: 0,
        downloaded_bytes: 0,
        best_so_far: true,
    };
    Ok((TrainedModels::ZeroShot, vec![0], vec![report], ledger))
}

fn shared_rounds(
    states: &mut [ClientState<'_>],
    initial: AdapterParams,
    settings: &TrainSettings,
    mut ledger: CommLedger,
) -> Result<RoundsOutcome> {
    let valid = states
        .par_iter()
        .map(|c| c.valid_accuracy(&initial, settings.scale))
        .collect::<Result<Vec<_>>>()?;
    let mut best_score = mean(&valid);
    let mut history = vec![RoundReport {
        round: 0,
        mean_valid_accuracy: best_score,
        client_valid_accuracy: valid,
        uploaded_bytes: 0,
        downloaded_bytes: 0,
        best_so_far: true,
    }];
    let mut best = initial.clone();
    let mut best_round = 0;
    let mut global = initial;
    for round in 1..=settings.rounds {
        let (next, mut report) = run_round(states, &global, settings, round).map_err(|e| tag_round(round, e))?;
        ledger.record_exchange(round, states.len());
        if report.mean_valid_accuracy > best_score {
            best_score = report.mean_valid_accuracy;
            best = next.clone();
            best_round = round;
            report.best_so_far = true;
        }
        history.push(report);
        global = next;
    }
    Ok((TrainedModels::Shared(best), vec![best_round], history, ledger))
}

fn local_rounds(states: &mut [ClientState<'_>], settings: &TrainSettings, mut ledger: CommLedger) -> Result<RoundsOutcome> {
    let scale = settings.scale;
    let mut best: Vec<AdapterParams> = states.iter().map(|c| c.adapter.clone()).collect();
    let mut best_valid = states
        .par_iter()
        .map(|c| c.valid_accuracy(&c.adapter, scale))
        .collect::<Result<Vec<_>>>()?;
    let mut best_rounds = vec![0; states.len()];
    let mut best_mean = mean(&best_valid);
    let mut history = vec![RoundReport {
        round: 0,
        mean_valid_accuracy: best_mean,
        client_valid_accuracy: best_valid.clone(),
        uploaded_bytes: 0,
        downloaded_bytes: 0,
        best_so_far: true,
    }];
    for round in 1..=settings.rounds {
        let valid = states
            .par_iter_mut()
            .map(|c| {
                let own = c.adapter.clone();
                let p = c.local_update(&own, settings.local_epochs, settings.batch_size, 0.0, scale)?;
                c.valid_accuracy(&p, scale)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| tag_round(round, e))?;
        for (i, &v) in valid.iter().enumerate() {
            if v > best_valid[i] {
                best_valid[i] = v;
                best[i] = states[i].adapter.clone();
                best_rounds[i] = round;
            }
        }
        ledger.record_silent(round);
        let m = mean(&valid);
        let best_so_far = m > best_mean;
        if best_so_far {
            best_mean = m;
        }
        history.push(RoundReport {
            round,
            mean_valid_accuracy: m,
            client_valid_accuracy: valid,
            uploaded_bytes: 0,
            downloaded_bytes: 0,
            best_so_far,
        });
    }
    Ok((TrainedModels::PerClient(best), best_rounds, history, ledger))
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Saved adapter: `FCK1`, version u32, d u32, round u32, config hash u64,
/// value count u64, then the flat adapter as little-endian f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: u32,
    pub config_hash: u64,
    pub adapter: AdapterParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let flat = self.adapter.flatten();
        let mut out = Vec::with_capacity(32 + 8 * flat.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.adapter.dim() as u32).to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for v in flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 32;
        if bytes.len() < HEADER {
            return Err(Error::format(bytes.len() as u64, "truncated checkpoint header"));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(4) != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {}", u32_at(4))));
        }
        let d = u32_at(8) as usize;
        let round = u32_at(12);
        let config_hash = u64_at(16);
        let count = u64_at(24);
        if d == 0 || count != parameter_count(d) as u64 {
            return Err(Error::format(24, format!("{count} values do not fit an adapter of width {d}")));
        }
        let payload = &bytes[HEADER..];
        if payload.len() as u64 != count * 8 {
            return Err(Error::format(
                HEADER as u64,
                format!("expected {} payload bytes, found {}", count * 8, payload.len()),
            ));
        }
        let flat: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let adapter = AdapterParams::unflatten(&flat, d)
            .map_err(|e| Error::format(HEADER as u64, e.to_string()))?;
        Ok(Checkpoint {
            round,
            config_hash,
            adapter,
        })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
