//! On-device dataset distillation.
//!
//! Each client optimizes a handful of prototype inputs (one per class it
//! holds) so that kernel ridge regression in its own feature space, with the
//! prototypes as support set, predicts the labels of its local data. The
//! feature extractor is frozen during this loop; only prototype inputs move.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index;
use rand::Rng;

use crate::data::{augment_batch, ClientDataset};
use crate::error::{Error, Result};
use crate::model::{Adam, ModelBundle};
use crate::numerics::{solve_spd_regularized, Matrix, Tape, Var};
use crate::rng::{derive_seed, stream_rng, Stream};

/// One synthetic sample held in the knowledge cache.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledRecord {
    pub producer: usize,
    pub label: usize,
    pub input: Vec<f64>,
    pub round: usize,
}

/// Prototypes being optimized on one client. Labels are pairwise distinct.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    records: Vec<DistilledRecord>,
}

impl PrototypeSet {
    pub fn new(records: Vec<DistilledRecord>) -> Result<Self> {
        check_distinct_labels(&records)?;
        Ok(Self { records })
    }

    pub fn records(&self) -> &[DistilledRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn inputs(&self) -> Matrix {
        let dim = self.records.first().map_or(0, |r| r.input.len());
        let data = self.records.iter().flat_map(|r| r.input.iter().copied()).collect();
        Matrix::new(self.records.len(), dim, data).expect("uniform record width")
    }

    pub fn into_records(self) -> Vec<DistilledRecord> {
        self.records
    }
}

pub(crate) fn check_distinct_labels(records: &[DistilledRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.label) {
            return Err(Error::Input(format!(
                "duplicate label {} among prototypes of client {}",
                r.label, r.producer
            )));
        }
    }
    Ok(())
}

/// Random replacement function assigning every client a source entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SigmaMapping {
    pub round: usize,
    pub map: Vec<usize>,
}

impl SigmaMapping {
    pub fn target(&self, client: usize) -> usize {
        self.map[client]
    }
}

/// Independent uniform draw per client; fixed for `(clients, round, seed)`.
pub fn resample_sigma(clients: usize, round: usize, seed: u64) -> SigmaMapping {
    let mut rng = stream_rng(seed, Stream::Sigma, &[round as u64]);
    SigmaMapping {
        round,
        map: (0..clients).map(|_| rng.random_range(0..clients.max(1))).collect(),
    }
}

/// Starting prototypes for client `client`.
///
/// When `cache_entry` is nonempty its records are copied (restricted to
/// classes the client holds locally) and any remaining local class is seeded
/// from a random local sample. With an empty entry every local class is
/// seeded from a random local sample.
pub fn init_prototypes(
    client: usize,
    cd: &ClientDataset,
    cache_entry: &[DistilledRecord],
    round: usize,
    seed: u64,
) -> Result<PrototypeSet> {
    if cd.train.is_empty() {
        return Err(Error::Input(format!("client {client} has no training data")));
    }
    let dim = cd.train.dim();
    let counts = cd.train.class_counts();
    let mut rng = stream_rng(seed, Stream::Prototype, &[client as u64, round as u64]);

    let mut records: Vec<DistilledRecord> = Vec::new();
    for r in cache_entry {
        if r.input.len() != dim {
            return Err(Error::Input(format!(
                "cached record has width {}, client data has {dim}",
                r.input.len()
            )));
        }
        if r.label < counts.len() && counts[r.label] > 0 && !records.iter().any(|p| p.label == r.label) {
            records.push(DistilledRecord {
                producer: client,
                label: r.label,
                input: r.input.clone(),
                round,
            });
        }
    }
    for (class, &n) in counts.iter().enumerate() {
        if n == 0 || records.iter().any(|p| p.label == class) {
            continue;
        }
        let pick = rng.random_range(0..n);
        let row = cd
            .train
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .nth(pick)
            .map(|(i, _)| i)
            .expect("class count is positive");
        records.push(DistilledRecord {
            producer: client,
            label: class,
            input: cd.train.inputs.row(row).to_vec(),
            round,
        });
    }
    records.sort_by_key(|r| r.label);
    PrototypeSet::new(records)
}

/// `K_bl = F_local·F_protoᵀ` and `K_bb = F_proto·F_protoᵀ`.
pub fn gram_pair(local_features: &Matrix, proto_features: &Matrix) -> Result<(Matrix, Matrix)> {
    if local_features.cols() != proto_features.cols() {
        return Err(Error::Input(format!(
            "feature width mismatch: local {}, prototypes {}",
            local_features.cols(),
            proto_features.cols()
        )));
    }
    Ok((
        local_features.matmul_nt(proto_features)?,
        proto_features.matmul_nt(proto_features)?,
    ))
}

/// How the ridge term is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaPolicy {
    /// `0.01 · mean(diag K_bb)`, floored at `1e-6`.
    Relative,
    Fixed(f64),
}

impl LambdaPolicy {
    pub fn resolve(self, k_bb: &Matrix) -> f64 {
        match self {
            LambdaPolicy::Fixed(v) => v,
            LambdaPolicy::Relative => {
                let n = k_bb.rows().max(1);
                let mean = (0..k_bb.rows()).map(|i| k_bb.get(i, i)).sum::<f64>() / n as f64;
                (0.01 * mean).max(1e-6)
            }
        }
    }
}

/// `½‖Y_local − K_bl·(K_bb + λI)⁻¹·Y_proto‖²`.
pub fn krr_loss(k_bl: &Matrix, k_bb: &Matrix, y_local: &Matrix, y_proto: &Matrix, lambda: f64) -> Result<f64> {
    let alpha = solve_spd_regularized(k_bb, lambda, y_proto)?;
    let pred = k_bl.matmul(&alpha)?;
    Ok(0.5 * y_local.sub(&pred)?.frobenius_sq())
}

/// Same objective recorded on a tape.
pub fn krr_loss_tape(
    tape: &mut Tape,
    k_bl: Var,
    k_bb: Var,
    y_local: Var,
    y_proto: Var,
    lambda: f64,
) -> Result<Var> {
    let alpha = tape.solve_spd(k_bb, lambda, y_proto)?;
    let pred = tape.matmul(k_bl, alpha)?;
    let resid = tape.sub(y_local, pred)?;
    Ok(tape.half_sum_sq(resid))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillParams {
    pub steps: usize,
    pub lr: f64,
    pub lambda: LambdaPolicy,
    pub batch: usize,
    pub noise_sigma: f64,
}

impl Default for DistillParams {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.001,
            lambda: LambdaPolicy::Relative,
            batch: 64,
            noise_sigma: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub records: Vec<DistilledRecord>,
    /// Loss before each optimization step.
    pub loss_trace: Vec<f64>,
}

/// Loss and prototype-input gradient for one distillation batch.
pub fn distill_loss_and_grad(
    model: &ModelBundle,
    local_inputs: &Matrix,
    local_labels: &[usize],
    protos: &Matrix,
    proto_labels: &[usize],
    lambda: LambdaPolicy,
) -> Result<(f64, Matrix)> {
    let classes = model.arch.num_classes;
    let local_features = model.forward_features(local_inputs)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xp = tape.leaf(protos.clone());
    let fp = model.features_tape(&bound, &mut tape, xp)?;
    let fl = tape.leaf(local_features);
    let k_bl = tape.matmul_nt(fl, fp)?;
    let k_bb = tape.matmul_nt(fp, fp)?;
    let lam = lambda.resolve(tape.value(k_bb));
    let yl = tape.leaf(Matrix::one_hot(local_labels, classes)?);
    let yp = tape.leaf(Matrix::one_hot(proto_labels, classes)?);
    let loss = krr_loss_tape(&mut tape, k_bl, k_bb, yl, yp, lam)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), grads.get_or_zeros(xp, protos)))
}

/// Runs `params.steps` Adam steps on the prototype inputs against the KRR
/// loss over augmented local mini-batches. Model parameters and local data
/// are read-only.
pub fn distill_dataset(
    model: &ModelBundle,
    cd: &ClientDataset,
    protos: PrototypeSet,
    params: &DistillParams,
    round: usize,
    seed: u64,
) -> Result<DistillOutcome> {
    if protos.is_empty() {
        return Err(Error::Input("no prototypes to distill".into()));
    }
    let labels = protos.labels();
    let mut x = protos.inputs();
    let n = cd.train.len();
    let batch = params.batch.clamp(1, n.max(1));
    let mut rng = stream_rng(seed, Stream::Distill, &[cd.client_id as u64, round as u64]);
    let mut adam = Adam::new();
    let mut trace = Vec::with_capacity(params.steps);

    for step in 0..params.steps {
        let mut idx = index::sample(&mut rng, n, batch).into_vec();
        idx.sort_unstable();
        let local = cd.train.inputs.select_rows(&idx);
        let local_labels: Vec<usize> = idx.iter().map(|&i| cd.train.labels[i]).collect();
        let aug_seed = derive_seed(seed, Stream::Augment, &[cd.client_id as u64, round as u64, step as u64]);
        let local = augment_batch(&local, params.noise_sigma, aug_seed)?;
        let (loss, grad) = distill_loss_and_grad(model, &local, &local_labels, &x, &labels, params.lambda)?;
        trace.push(loss);
        adam.step(&mut [&mut x], &[grad], params.lr)?;
    }
    if !x.is_finite() {
        return Err(Error::Consistency("distilled inputs became non-finite".into()));
    }

    let records = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| DistilledRecord {
            producer: cd.client_id,
            label,
            input: x.row(i).to_vec(),
            round,
        })
        .collect();
    Ok(DistillOutcome {
        records,
        loss_trace: trace,
    })
}

/// Euclidean distance from each record to its nearest raw local input.
pub fn min_distance_to_local(records: &[DistilledRecord], local: &Matrix) -> Vec<f64> {
    records
        .iter()
        .map(|r| {
            (0..local.rows())
                .map(|i| {
                    local
                        .row(i)
                        .iter()
                        .zip(&r.input)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// CSV rows `producer,round,label,x0,..,x{D-1}` with a header line.
pub fn write_records_csv<W: Write>(records: &[DistilledRecord], mut out: W) -> std::io::Result<()> {
    let dim = records.first().map_or(0, |r| r.input.len());
    write!(out, "producer,round,label")?;
    for j in 0..dim {
        write!(out, ",x{j}")?;
    }
    writeln!(out)?;
    for r in records {
        write!(out, "{},{},{}", r.producer, r.round, r.label)?;
        for v in &r.input {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
