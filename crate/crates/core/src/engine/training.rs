//! Local optimization: cross-entropy on local data plus gated cross-entropy
//! on cached knowledge, and the CE + KL objective of the logits baseline.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Dataset;
use crate::distill::DistilledRecord;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::numerics::{Matrix, Tape};

/// Passes `x` through when the client's own cache entry is nonempty and
/// yields zero otherwise.
pub fn gate(x: f64, own_entry: &[DistilledRecord]) -> f64 {
    if own_entry.is_empty() {
        0.0
    } else {
        x
    }
}

/// Knowledge records as a labeled matrix.
pub fn records_to_dataset(records: &[DistilledRecord], dim: usize, classes: usize) -> Result<Dataset> {
    if let Some(r) = records.iter().find(|r| r.input.len() != dim) {
        return Err(Error::Input(format!(
            "knowledge record width {} does not match model input {dim}",
            r.input.len()
        )));
    }
    let data = records.iter().flat_map(|r| r.input.iter().copied()).collect();
    Dataset::new(
        Matrix::new(records.len(), dim, data)?,
        records.iter().map(|r| r.label).collect(),
        classes,
    )
}

/// Summed training objective over the full local set and the knowledge set,
/// with the knowledge sum passed through the gate. Returns the loss and the
/// parameter gradients in [`ModelBundle::params`] order.
pub fn train_objective(
    model: &ModelBundle,
    local: &Dataset,
    knowledge: &[DistilledRecord],
    own_entry: &[DistilledRecord],
) -> Result<(f64, Vec<Matrix>)> {
    let kd = records_to_dataset(knowledge, model.arch.input_dim, model.arch.num_classes)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xl = tape.leaf(local.inputs.clone());
    let (_, ll) = model.forward_tape(&bound, &mut tape, xl)?;
    let mut loss = tape.cross_entropy(ll, &local.labels, &vec![1.0; local.len()])?;
    if !kd.is_empty() {
        let weight = gate(1.0, own_entry);
        let xk = tape.leaf(kd.inputs.clone());
        let (_, lk) = model.forward_tape(&bound, &mut tape, xk)?;
        let kl = tape.cross_entropy(lk, &kd.labels, &vec![weight; kd.len()])?;
        loss = tape.add(loss, kl)?;
    }
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), model.collect_grads(&bound, &grads)))
}

/// Per-row distillation targets for the logits baseline.
pub struct Teachers<'a> {
    /// Teacher logits, one row per training row.
    pub logits: &'a Matrix,
    /// Rows without a teacher contribute no KL term.
    pub present: &'a [bool],
    pub beta: f64,
}

/// One epoch of mini-batch Adam steps over `data` in a shuffled order.
/// Each batch minimizes mean CE (plus `β`·mean KL on rows that have a
/// teacher). Returns the loss of every batch before its step.
pub fn train_epoch<R: Rng>(
    model: &mut ModelBundle,
    data: &Dataset,
    teachers: Option<&Teachers<'_>>,
    lr: f64,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if data.dim() != model.arch.input_dim && !data.is_empty() {
        return Err(Error::Input(format!(
            "data has {} columns, model expects {}",
            data.dim(),
            model.arch.input_dim
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut trace = Vec::new();
    for chunk in order.chunks(batch.max(1)) {
        let x = data.inputs.select_rows(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let w = 1.0 / chunk.len() as f64;

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xv = tape.leaf(x);
        let (_, logits) = model.forward_tape(&bound, &mut tape, xv)?;
        let mut loss = tape.cross_entropy(logits, &labels, &vec![w; chunk.len()])?;
        if let Some(t) = teachers {
            let weights: Vec<f64> = chunk
                .iter()
                .map(|&i| if t.present[i] { w } else { 0.0 })
                .collect();
            if weights.iter().any(|&v| v > 0.0) && t.beta > 0.0 {
                let teacher = t.logits.select_rows(chunk);
                let kl = tape.kl_softmax(logits, &teacher, &weights)?;
                let kl = tape.scale(kl, t.beta);
                loss = tape.add(loss, kl)?;
            }
        }
        let grads = tape.backward(loss)?;
        trace.push(tape.scalar(loss));
        let grads = model.collect_grads(&bound, &grads);
        model.optimizer_step(&grads, lr)?;
    }
    Ok(trace)
}

/// One epoch on local data only.
pub fn local_train_epoch<R: Rng>(
    model: &mut ModelBundle,
    local: &Dataset,
    lr: f64,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    train_epoch(model, local, None, lr, batch, rng)
}

/// One epoch on the combined objective: sampled knowledge records are
/// appended to the local rows and the union is shuffled into batches. With a
/// closed gate the knowledge rows are dropped, which leaves exactly the
/// local-only epoch.
pub fn personalized_train_epoch<R: Rng>(
    model: &mut ModelBundle,
    local: &Dataset,
    sampled: &[DistilledRecord],
    own_entry: &[DistilledRecord],
    lr: f64,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let open = gate(1.0, own_entry) != 0.0;
    if sampled.is_empty() || !open {
        return train_epoch(model, local, None, lr, batch, rng);
    }
    let kd = records_to_dataset(sampled, model.arch.input_dim, model.arch.num_classes)?;
    let mut labels = local.labels.clone();
    labels.extend_from_slice(&kd.labels);
    let combined = Dataset::new(local.inputs.vstack(&kd.inputs)?, labels, local.num_classes)?;
    train_epoch(model, &combined, None, lr, batch, rng)
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(model: &ModelBundle, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let predicted = model.forward_logits(&data.inputs)?.argmax_rows();
    let correct = predicted.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::new(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = (0..n).map(|i| i % 3).collect();
        Dataset::new(x, y, 3).unwrap()
    }

    fn as_records(d: &Dataset) -> Vec<DistilledRecord> {
        (0..d.len())
            .map(|i| DistilledRecord {
                producer: 0,
                label: d.labels[i],
                input: d.inputs.row(i).to_vec(),
                round: 1,
            })
            .collect()
    }

    #[test]
    fn gate_cases() {
        let entry = as_records(&toy(1, 0));
        assert_eq!(gate(2.5, &entry), 2.5);
        assert_eq!(gate(2.5, &[]), 0.0);
        assert_eq!(gate(0.0, &entry), 0.0);
        assert_eq!(gate(0.0, &[]), 0.0);
    }

    #[test]
    fn empty_knowledge_reduces_to_local_objective() {
        let m = build_model(&ArchSpec::new("t", 3, vec![5], 3).unwrap(), 1);
        let local = toy(9, 2);
        let own = as_records(&toy(1, 3));
        let (a, ga) = train_objective(&m, &local, &[], &own).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let x = tape.leaf(local.inputs.clone());
        let (_, l) = m.forward_tape(&bound, &mut tape, x).unwrap();
        let loss = tape.cross_entropy(l, &local.labels, &[1.0; 9]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(a, tape.scalar(loss));
        assert_eq!(ga, m.collect_grads(&bound, &g));
    }

    #[test]
    fn duplicated_knowledge_equals_doubled_local_gradient() {
        let m = build_model(&ArchSpec::new("t", 3, vec![4], 3).unwrap(), 5);
        let local = toy(6, 7);
        let knowledge = as_records(&local);
        let (loss, grads) = train_objective(&m, &local, &knowledge, &knowledge).unwrap();
        let doubled = Dataset::new(
            local.inputs.vstack(&local.inputs).unwrap(),
            [local.labels.clone(), local.labels.clone()].concat(),
            3,
        )
        .unwrap();
        let (loss2, grads2) = train_objective(&m, &doubled, &[], &[]).unwrap();
        assert!((loss - loss2).abs() < 1e-12);
        for (a, b) in grads.iter().zip(&grads2) {
            assert!(a.sub(b).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn closed_gate_drops_knowledge() {
        let m = build_model(&ArchSpec::new("t", 3, vec![4], 3).unwrap(), 5);
        let local = toy(6, 7);
        let knowledge = as_records(&toy(4, 8));
        let (a, _) = train_objective(&m, &local, &knowledge, &[]).unwrap();
        let (b, _) = train_objective(&m, &local, &[], &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_small_step_lowers_fixed_batch_loss() {
        let mut improved = Vec::new();
        for seed in 0..20 {
            let mut m = build_model(&ArchSpec::new("t", 3, vec![8], 3).unwrap(), seed);
            let local = toy(16, seed + 100);
            let (before, grads) = train_objective(&m, &local, &[], &[]).unwrap();
            m.optimizer_step(&grads, 1e-3).unwrap();
            let (after, _) = train_objective(&m, &local, &[], &[]).unwrap();
            improved.push(before - after);
        }
        improved.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(improved[10] > 0.0);
    }

    #[test]
    fn personalized_with_empty_sample_matches_local_epoch() {
        let local = toy(23, 4);
        let base = build_model(&ArchSpec::new("t", 3, vec![6], 3).unwrap(), 2);
        let own = as_records(&toy(1, 9));
        let (mut a, mut b) = (base.clone(), base);
        let ta = personalized_train_epoch(&mut a, &local, &[], &own, 0.01, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let tb = local_train_epoch(&mut b, &local, 0.01, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        assert_eq!(ta.len(), 3);
    }

    #[test]
    fn knowledge_width_mismatch() {
        let mut m = build_model(&ArchSpec::new("t", 3, vec![6], 3).unwrap(), 2);
        let bad = vec![DistilledRecord {
            producer: 0,
            label: 0,
            input: vec![0.0; 5],
            round: 0,
        }];
        let local = toy(4, 1);
        let r = personalized_train_epoch(&mut m, &local, &bad, &bad, 0.01, 8, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(r.is_err());
    }

    #[test]
    fn uniform_logits_hit_chance_level() {
        let mut m = build_model(&ArchSpec::new("t", 3, vec![4], 4).unwrap(), 0);
        let zeros = vec![0.0; m.param_count()];
        m.set_flat_params(&zeros).unwrap();
        let n = 400;
        let d = Dataset::new(Matrix::zeros(n, 3), (0..n).map(|i| i % 4).collect(), 4).unwrap();
        assert!((accuracy(&m, &d).unwrap() - 0.25).abs() < 1e-12);
    }
}
