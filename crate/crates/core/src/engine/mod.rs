//! Round orchestration for the knowledge-cache protocol and its baselines.
//!
//! Clients are always visited in ascending id order and every random choice
//! is keyed by `(seed, stream, round, client)`, so a config fully determines
//! every metric, ledger entry and cached record.

mod training;

pub use training::{
    accuracy, gate, local_train_epoch, personalized_train_epoch, records_to_dataset, train_epoch,
    train_objective, Teachers,
};

use log::warn;

use crate::cache::KnowledgeCache;
use crate::config::{Algorithm, DatasetSpec, RunConfig};
use crate::data::{label_frequency, load_csv, make_synthetic, partition_dirichlet, ClientDataset, Dataset, LabelProfile};
use crate::distill::{
    distill_dataset, init_prototypes, min_distance_to_local, resample_sigma, DistillParams, DistilledRecord,
};
use crate::error::{Error, Result};
use crate::model::{build_model, ArchSpec, ModelBundle};
use crate::numerics::{dot, Matrix};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::transport::{draw_availability, send, CommLedger, Direction, PayloadKind};

/// Per-client state carried across rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub model: ModelBundle,
    pub data: ClientDataset,
    pub profile: LabelProfile,
    pub best_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub online: Vec<bool>,
    pub accuracy: Vec<f64>,
    pub best_so_far: Vec<f64>,
    pub average_ua: f64,
    pub cum_bytes_up: u64,
    pub cum_bytes_down: u64,
}

/// Diagnostics from one client's distillation in one round.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillLogEntry {
    pub round: usize,
    pub client: usize,
    /// Whether the prototypes started from a cache entry.
    pub from_cache: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Distance from each distilled input to the nearest raw local input.
    pub min_distance: Vec<f64>,
    pub failed: bool,
}

/// Mean over clients of best-so-far test accuracy.
pub fn evaluate_average_ua(clients: &[ClientState]) -> f64 {
    if clients.is_empty() {
        return 0.0;
    }
    clients.iter().map(|c| c.best_accuracy).sum::<f64>() / clients.len() as f64
}

/// Loads or synthesizes the full dataset named by the config.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            classes,
            dim,
            per_class,
            spread,
        } => make_synthetic(*classes, *dim, *per_class, *spread, cfg.seed),
        DatasetSpec::Csv { path, skip_header } => load_csv(path, *skip_header),
    }
}

/// Logits-cache baseline state: latest uploaded logits per `(client, sample)`
/// and, per local training sample, the related samples on other clients.
#[derive(Clone, Debug, Default)]
struct LogitsCache {
    logits: Vec<Vec<Option<Vec<f64>>>>,
    related: Vec<Vec<Vec<(usize, usize)>>>,
}

/// A running simulation of one algorithm under one config.
pub struct Simulation {
    cfg: RunConfig,
    algorithm: Algorithm,
    classes: usize,
    dim: usize,
    pub clients: Vec<ClientState>,
    pub cache: KnowledgeCache,
    pub ledger: CommLedger,
    pub metrics: Vec<RoundMetrics>,
    pub distill_log: Vec<DistillLogEntry>,
    logits_cache: LogitsCache,
    round: usize,
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub algorithm: Algorithm,
    pub cfg: RunConfig,
    pub metrics: Vec<RoundMetrics>,
    pub ledger: CommLedger,
    pub cache_snapshot: Vec<DistilledRecord>,
    pub distill_log: Vec<DistillLogEntry>,
    pub param_counts: Vec<usize>,
    pub archs: Vec<String>,
}

impl RunResult {
    pub fn final_average_ua(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.average_ua)
    }
}

impl Simulation {
    /// Builds the dataset, partitions it, creates client models and performs
    /// the initialization exchange (label profiles to the server for the
    /// cache protocol). Records round-0 metrics.
    pub fn new(cfg: RunConfig, algorithm: Algorithm) -> Result<Self> {
        cfg.validate()?;
        if algorithm == Algorithm::ParamAvg && !cfg.arch.is_homogeneous() {
            return Err(Error::config(
                "arch",
                "param_avg needs every client on the same architecture",
            ));
        }
        let dataset = build_dataset(&cfg)?;
        let classes = dataset.num_classes;
        let dim = dataset.dim();
        let parts = partition_dirichlet(&dataset, cfg.clients, cfg.alpha, cfg.test_fraction, cfg.seed)?;

        let mut clients = Vec::with_capacity(parts.len());
        for data in parts {
            let k = data.client_id;
            let arch = ArchSpec::preset(cfg.arch.for_client(k), dim, classes)?;
            // parameter averaging starts every client from one shared init
            let init_tag = if algorithm == Algorithm::ParamAvg { 0 } else { k as u64 };
            let model = build_model(&arch, derive_seed(cfg.seed, Stream::ModelInit, &[init_tag]));
            let profile = label_frequency(&data)?;
            clients.push(ClientState {
                client_id: k,
                model,
                data,
                profile,
                best_accuracy: 0.0,
            });
        }

        let mut sim = Self {
            cache: KnowledgeCache::new(cfg.clients, classes),
            ledger: CommLedger::new(cfg.byte_widths.clone()),
            cfg,
            algorithm,
            classes,
            dim,
            clients,
            metrics: Vec::new(),
            distill_log: Vec::new(),
            logits_cache: LogitsCache::default(),
            round: 0,
        };

        match algorithm {
            Algorithm::FedCache2 => {
                for c in &sim.clients {
                    send(
                        &mut sim.ledger,
                        PayloadKind::LabelProfile,
                        Direction::Uplink,
                        0,
                        c.client_id,
                        c.profile.clone(),
                    )?;
                }
            }
            Algorithm::LogitsCache => sim.logits_cache = build_relations(&sim.clients, sim.cfg.related),
            Algorithm::ParamAvg | Algorithm::LocalOnly => {}
        }
        let online = vec![true; sim.clients.len()];
        sim.record_metrics(0, online)?;
        Ok(sim)
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn current_round(&self) -> usize {
        self.round
    }

    /// Online mask for `round`.
    pub fn availability(&self, round: usize) -> Vec<bool> {
        (0..self.clients.len())
            .map(|k| draw_availability(round, k, self.cfg.participation_rate, self.cfg.seed))
            .collect()
    }

    /// Runs the next round of the configured algorithm.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let round = self.round + 1;
        let online = self.availability(round);
        match self.algorithm {
            Algorithm::FedCache2 => self.run_round(round, &online)?,
            Algorithm::LogitsCache => self.baseline_logits_cache_round(round, &online)?,
            Algorithm::ParamAvg => self.baseline_param_avg_round(round, &online)?,
            Algorithm::LocalOnly => self.local_only_round(round, &online)?,
        }
        self.round = round;
        self.record_metrics(round, online)
    }

    fn record_metrics(&mut self, round: usize, online: Vec<bool>) -> Result<RoundMetrics> {
        let mut acc = Vec::with_capacity(self.clients.len());
        for c in &mut self.clients {
            let a = accuracy(&c.model, &c.data.test)?;
            c.best_accuracy = c.best_accuracy.max(a);
            acc.push(a);
        }
        let m = RoundMetrics {
            round,
            online,
            accuracy: acc,
            best_so_far: self.clients.iter().map(|c| c.best_accuracy).collect(),
            average_ua: evaluate_average_ua(&self.clients),
            cum_bytes_up: self.ledger.cumulative(Direction::Uplink, round),
            cum_bytes_down: self.ledger.cumulative(Direction::Downlink, round),
        };
        self.metrics.push(m.clone());
        Ok(m)
    }

    fn distill_params(&self) -> DistillParams {
        DistillParams {
            steps: self.cfg.distill_steps,
            lr: self.cfg.distill_lr,
            lambda: self.cfg.lambda,
            batch: self.cfg.batch,
            noise_sigma: self.cfg.augment_sigma,
        }
    }

    fn training_rng(&self, round: usize, client: usize, epoch: usize) -> rand_chacha::ChaCha8Rng {
        stream_rng(
            self.cfg.seed,
            Stream::Training,
            &[round as u64, client as u64, epoch as u64],
        )
    }

    /// One round of the knowledge-cache protocol. For every online client in
    /// id order: the server hands over the replacement entry, the client
    /// distills and uploads, the server updates the cache and samples it for
    /// the client, and the client trains on local data plus the sample.
    ///
    /// The replacement entry used to seed prototypes is not charged to the
    /// ledger; only the upload and the τ-controlled download are.
    pub fn run_round(&mut self, round: usize, online: &[bool]) -> Result<()> {
        let sigma = resample_sigma(
            self.clients.len(),
            (round - 1) / self.cfg.sigma_period,
            self.cfg.seed,
        );
        let params = self.distill_params();
        for k in 0..self.clients.len() {
            if !online[k] {
                continue;
            }
            let source = self.cache.fetch_by_client(sigma.target(k))?;
            let from_cache = !source.is_empty();
            let client = &self.clients[k];
            let protos = init_prototypes(k, &client.data, &source, round, self.cfg.seed)?;
            match distill_dataset(&client.model, &client.data, protos, &params, round, self.cfg.seed) {
                Ok(out) => {
                    let dist = min_distance_to_local(&out.records, &client.data.train.inputs);
                    self.distill_log.push(DistillLogEntry {
                        round,
                        client: k,
                        from_cache,
                        initial_loss: out.loss_trace.first().copied().unwrap_or(f64::NAN),
                        final_loss: out.loss_trace.last().copied().unwrap_or(f64::NAN),
                        min_distance: dist,
                        failed: false,
                    });
                    let uploaded = send(
                        &mut self.ledger,
                        PayloadKind::DistilledData,
                        Direction::Uplink,
                        round,
                        k,
                        out.records,
                    )?;
                    self.cache.update_client_entry(k, uploaded)?;
                }
                Err(e) => {
                    warn!("round {round}: client {k} distillation failed, keeping previous entry: {e}");
                    self.distill_log.push(DistillLogEntry {
                        round,
                        client: k,
                        from_cache,
                        initial_loss: f64::NAN,
                        final_loss: f64::NAN,
                        min_distance: Vec::new(),
                        failed: true,
                    });
                }
            }

            let sampled = self.cache.sample_for_device_with(
                &self.clients[k].profile,
                self.cfg.tau,
                self.cfg.seed,
                round,
                self.cfg.sampling,
            )?;
            let sampled = send(
                &mut self.ledger,
                PayloadKind::DistilledData,
                Direction::Downlink,
                round,
                k,
                sampled,
            )?;
            let own = self.cache.fetch_by_client(k)?;
            for epoch in 0..self.cfg.local_epochs {
                let mut rng = self.training_rng(round, k, epoch);
                let c = &mut self.clients[k];
                personalized_train_epoch(&mut c.model, &c.data.train, &sampled, &own, self.cfg.lr, self.cfg.batch, &mut rng)?;
            }
        }
        Ok(())
    }

    /// Logits-cache baseline round: download averaged related logits, train
    /// with CE + β·KL, then upload fresh logits for every training sample.
    pub fn baseline_logits_cache_round(&mut self, round: usize, online: &[bool]) -> Result<()> {
        for k in 0..self.clients.len() {
            if !online[k] {
                continue;
            }
            let n = self.clients[k].data.train.len();
            let mut teacher = Matrix::zeros(n, self.classes);
            let mut present = vec![false; n];
            let mut downloaded: Vec<f64> = Vec::new();
            for i in 0..n {
                let mut count = 0usize;
                for &(l, j) in &self.logits_cache.related[k][i] {
                    if let Some(z) = &self.logits_cache.logits[l][j] {
                        downloaded.extend_from_slice(z);
                        for (t, v) in teacher.row_mut(i).iter_mut().zip(z) {
                            *t += v;
                        }
                        count += 1;
                    }
                }
                if count > 0 {
                    present[i] = true;
                    for t in teacher.row_mut(i) {
                        *t /= count as f64;
                    }
                }
            }
            send(&mut self.ledger, PayloadKind::Logits, Direction::Downlink, round, k, downloaded)?;

            for epoch in 0..self.cfg.local_epochs {
                let mut rng = self.training_rng(round, k, epoch);
                let teachers = Teachers {
                    logits: &teacher,
                    present: &present,
                    beta: self.cfg.beta,
                };
                let c = &mut self.clients[k];
                train_epoch(&mut c.model, &c.data.train, Some(&teachers), self.cfg.lr, self.cfg.batch, &mut rng)?;
            }

            let c = &self.clients[k];
            let logits = c.model.forward_logits(&c.data.train.inputs)?;
            let logits = send(&mut self.ledger, PayloadKind::Logits, Direction::Uplink, round, k, logits)?;
            send(
                &mut self.ledger,
                PayloadKind::SampleIndex,
                Direction::Uplink,
                round,
                k,
                c.data.train_index.clone(),
            )?;
            for i in 0..n {
                self.logits_cache.logits[k][i] = Some(logits.row(i).to_vec());
            }
        }
        Ok(())
    }

    /// Parameter-averaging baseline round: local training, full-parameter
    /// upload, unweighted server average, full-parameter download.
    pub fn baseline_param_avg_round(&mut self, round: usize, online: &[bool]) -> Result<()> {
        let mut uploads: Vec<Vec<f64>> = Vec::new();
        for k in 0..self.clients.len() {
            if !online[k] {
                continue;
            }
            for epoch in 0..self.cfg.local_epochs {
                let mut rng = self.training_rng(round, k, epoch);
                let c = &mut self.clients[k];
                local_train_epoch(&mut c.model, &c.data.train, self.cfg.lr, self.cfg.batch, &mut rng)?;
            }
            let params = self.clients[k].model.flat_params();
            uploads.push(send(&mut self.ledger, PayloadKind::ModelParams, Direction::Uplink, round, k, params)?);
        }
        if uploads.is_empty() {
            return Ok(());
        }
        let global = average_params(&uploads)?;
        for k in 0..self.clients.len() {
            if !online[k] {
                continue;
            }
            let received = send(
                &mut self.ledger,
                PayloadKind::ModelParams,
                Direction::Downlink,
                round,
                k,
                global.clone(),
            )?;
            self.clients[k].model.set_flat_params(&received)?;
        }
        Ok(())
    }

    /// No communication: online clients train on their own data.
    pub fn local_only_round(&mut self, round: usize, online: &[bool]) -> Result<()> {
        for k in 0..self.clients.len() {
            if !online[k] {
                continue;
            }
            for epoch in 0..self.cfg.local_epochs {
                let mut rng = self.training_rng(round, k, epoch);
                let c = &mut self.clients[k];
                local_train_epoch(&mut c.model, &c.data.train, self.cfg.lr, self.cfg.batch, &mut rng)?;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> RunResult {
        RunResult {
            algorithm: self.algorithm,
            cache_snapshot: self.cache.snapshot(),
            param_counts: self.clients.iter().map(|c| c.model.param_count()).collect(),
            archs: self.clients.iter().map(|c| c.model.arch.name.clone()).collect(),
            cfg: self.cfg,
            metrics: self.metrics,
            ledger: self.ledger,
            distill_log: self.distill_log,
        }
    }
}

/// Element-wise mean of equally sized parameter vectors.
pub fn average_params(uploads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Input("nothing to average".into()))?;
    if uploads.iter().any(|u| u.len() != first.len()) {
        return Err(Error::config("arch", "parameter vectors differ in length"));
    }
    let n = uploads.len() as f64;
    Ok((0..first.len())
        .map(|i| uploads.iter().map(|u| u[i]).sum::<f64>() / n)
        .collect())
}

/// For each training sample, the `related` most cosine-similar training
/// samples with the same label on other clients. Ties break by
/// `(client, index)`.
fn build_relations(clients: &[ClientState], related: usize) -> LogitsCache {
    let norms: Vec<Vec<f64>> = clients
        .iter()
        .map(|c| {
            (0..c.data.train.len())
                .map(|i| {
                    let r = c.data.train.inputs.row(i);
                    dot(r, r).sqrt().max(1e-12)
                })
                .collect()
        })
        .collect();
    let mut out = LogitsCache {
        logits: clients.iter().map(|c| vec![None; c.data.train.len()]).collect(),
        related: Vec::with_capacity(clients.len()),
    };
    for (k, c) in clients.iter().enumerate() {
        let mut per_sample = Vec::with_capacity(c.data.train.len());
        for i in 0..c.data.train.len() {
            let xi = c.data.train.inputs.row(i);
            let yi = c.data.train.labels[i];
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (l, other) in clients.iter().enumerate() {
                if l == k {
                    continue;
                }
                for j in 0..other.data.train.len() {
                    if other.data.train.labels[j] != yi {
                        continue;
                    }
                    let sim = dot(xi, other.data.train.inputs.row(j)) / (norms[k][i] * norms[l][j]);
                    cands.push((sim, l, j));
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            per_sample.push(cands.into_iter().take(related).map(|(_, l, j)| (l, j)).collect());
        }
        out.related.push(per_sample);
    }
    out
}

/// Runs `cfg.rounds` rounds of `algorithm` from scratch.
pub fn run_experiment(cfg: &RunConfig, algorithm: Algorithm) -> Result<RunResult> {
    let mut sim = Simulation::new(cfg.clone(), algorithm)?;
    for _ in 0..cfg.rounds {
        sim.step()?;
    }
    Ok(sim.finish())
}

/// Cumulative bytes (up + down) at the first round whose average UA reaches
/// `target`, or `None` when the run never gets there.
pub fn bytes_to_reach(metrics: &[RoundMetrics], target: f64) -> Option<u64> {
    metrics
        .iter()
        .find(|m| m.average_ua >= target)
        .map(|m| m.cum_bytes_up + m.cum_bytes_down)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("clients", "4"),
            ("classes", "3"),
            ("dim", "8"),
            ("per_class", "40"),
            ("rounds", "2"),
            ("local_epochs", "1"),
            ("distill_steps", "5"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn average_params_examples() {
        assert_eq!(average_params(&[vec![1.0, -2.0]]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(average_params(&[vec![1.5, -2.0], vec![-1.5, 2.0]]).unwrap(), vec![0.0, 0.0]);
        assert!(average_params(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn average_ua_is_mean_of_best() {
        let mut sim = Simulation::new(tiny_cfg(), Algorithm::LocalOnly).unwrap();
        sim.clients[0].best_accuracy = 0.4;
        sim.clients[1].best_accuracy = 0.6;
        assert!((evaluate_average_ua(&sim.clients[..2]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn best_so_far_never_decreases() {
        let mut sim = Simulation::new(tiny_cfg(), Algorithm::LocalOnly).unwrap();
        sim.step().unwrap();
        let best = sim.clients[0].best_accuracy;
        // wreck the model: current accuracy drops, best-so-far must not
        let zeros = vec![0.0; sim.clients[0].model.param_count()];
        sim.clients[0].model.set_flat_params(&zeros).unwrap();
        let m = sim.record_metrics(99, vec![true; 4]).unwrap();
        assert!(m.best_so_far[0] >= best);
        assert_eq!(m.best_so_far[0], best.max(m.accuracy[0]));
    }

    #[test]
    fn first_round_prototypes_come_from_local_data() {
        let mut sim = Simulation::new(tiny_cfg(), Algorithm::FedCache2).unwrap();
        sim.step().unwrap();
        // clients run in id order, so only client 0 is guaranteed an empty cache
        assert!(!sim.distill_log[0].from_cache);
        assert_eq!(sim.distill_log[0].client, 0);
        sim.step().unwrap();
        assert!(sim.distill_log.iter().filter(|e| e.round == 2).all(|e| e.from_cache));
    }

    #[test]
    fn tau_one_downlink_closed_form() {
        let mut cfg = tiny_cfg();
        cfg.set("tau", "1").unwrap();
        let mut sim = Simulation::new(cfg, Algorithm::FedCache2).unwrap();
        sim.step().unwrap();
        sim.step().unwrap();
        // round 2 with every client online in round 1: the cache is full
        // before anyone samples, so everybody downloads all of it
        let records = sim.cache.len() as u64;
        assert_eq!(
            sim.ledger.round_total(Direction::Downlink, 2),
            4 * records * (8 + 1) * 4
        );
    }

    #[test]
    fn param_avg_needs_homogeneous_models() {
        let mut cfg = tiny_cfg();
        cfg.set("arch", "cycle").unwrap();
        assert!(matches!(
            Simulation::new(cfg, Algorithm::ParamAvg),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn logits_baseline_first_round_is_plain_ce() {
        let cfg = tiny_cfg();
        let mut sim = Simulation::new(cfg.clone(), Algorithm::LogitsCache).unwrap();
        let mut local = Simulation::new(cfg, Algorithm::LocalOnly).unwrap();
        sim.step().unwrap();
        local.step().unwrap();
        // round 1 sees an empty logits cache, so client 0 trains exactly like
        // the local-only control
        assert_eq!(sim.clients[0].model, local.clients[0].model);
        assert_ne!(sim.clients[3].model, local.clients[3].model);
    }

    #[test]
    fn relations_stay_within_label_and_skip_self() {
        let sim = Simulation::new(tiny_cfg(), Algorithm::LogitsCache).unwrap();
        for (k, per_sample) in sim.logits_cache.related.iter().enumerate() {
            for (i, rel) in per_sample.iter().enumerate() {
                assert!(rel.len() <= 16);
                for &(l, j) in rel {
                    assert_ne!(l, k);
                    assert_eq!(sim.clients[l].data.train.labels[j], sim.clients[k].data.train.labels[i]);
                }
            }
        }
    }

    #[test]
    fn single_related_teacher_is_that_logit() {
        let mut cfg = tiny_cfg();
        cfg.set("clients", "2").unwrap();
        cfg.set("related", "1").unwrap();
        cfg.set("alpha", "100").unwrap();
        let mut sim = Simulation::new(cfg, Algorithm::LogitsCache).unwrap();
        sim.step().unwrap();
        let (l, j) = sim.logits_cache.related[0][0][0];
        assert_eq!(l, 1);
        let z = sim.logits_cache.logits[l][j].clone().unwrap();
        let c = &sim.clients[l];
        let fresh = c.model.forward_logits(&c.data.train.inputs.select_rows(&[j])).unwrap();
        assert_eq!(z, fresh.row(0).to_vec());
    }
}
