//! Datasets, non-IID client partitioning and label statistics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{stream_rng, Stream};

/// Labeled samples, one row of `inputs` per label.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape("Dataset::new", inputs.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    fn require_all_classes(&self) -> Result<()> {
        let counts = self.class_counts();
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Input(format!(
                "class {c} has no samples; every class 0..{} must appear",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// One client's local data. `train_index` / `test_index` record the
/// positions of the samples in the source dataset.
#[derive(Clone, Debug)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub train_index: Vec<usize>,
    pub test_index: Vec<usize>,
}

/// Local label distribution `p_c^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelProfile {
    pub client_id: usize,
    pub freqs: Vec<f64>,
}

/// Gaussian blobs, one per class. Class means are random directions rescaled
/// so that the closest pair sits at distance 1; `spread` is the per-coordinate
/// noise standard deviation.
pub fn make_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim < 2 || per_class < 1 {
        return Err(Error::Input(format!(
            "synthetic data needs C >= 2, D >= 2, per_class >= 1 (got {classes}, {dim}, {per_class})"
        )));
    }
    if !(spread >= 0.0) {
        return Err(Error::Input(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = stream_rng(seed, Stream::Dataset, &[]);
    let std = Normal::new(0.0, 1.0).expect("unit normal");

    let mut means = Matrix::zeros(classes, dim);
    for v in means.as_mut_slice() {
        *v = std.sample(&mut rng);
    }
    let mut min_dist = f64::INFINITY;
    for a in 0..classes {
        for b in (a + 1)..classes {
            let d: f64 = means
                .row(a)
                .iter()
                .zip(means.row(b))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    let means = means.scale(1.0 / min_dist);

    let n = classes * per_class;
    let mut inputs = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for i in 0..per_class {
            let row = inputs.row_mut(c * per_class + i);
            for (x, &m) in row.iter_mut().zip(means.row(c)) {
                *x = m + spread * std.sample(&mut rng);
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, classes)
}

/// Reads `D` real columns followed by one integer label column per line.
pub fn load_csv(path: impl AsRef<Path>, skip_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, skip_header).map_err(|e| match e {
        Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_csv(text: &str, skip_header: bool) -> Result<Dataset> {
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate().skip(usize::from(skip_header)) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Input(format!(
                "line {}: need at least one feature and a label",
                lineno + 1
            )));
        }
        let d = fields.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::Input(format!(
                    "line {}: expected {expected} feature columns, found {d}",
                    lineno + 1
                )))
            }
            _ => {}
        }
        for f in &fields[..d] {
            let v: f64 = f.parse().map_err(|_| {
                Error::Input(format!("line {}: `{f}` is not a real number", lineno + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Input(format!("line {}: non-finite value", lineno + 1)));
            }
            rows.push(v);
        }
        let y: usize = fields[d].parse().map_err(|_| {
            Error::Input(format!(
                "line {}: label `{}` is not a non-negative integer",
                lineno + 1,
                fields[d]
            ))
        })?;
        labels.push(y);
    }
    let dim = dim.ok_or_else(|| Error::Input("no data rows".into()))?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let ds = Dataset::new(Matrix::new(labels.len(), dim, rows)?, labels, classes)?;
    ds.require_all_classes()?;
    Ok(ds)
}

const PARTITION_RETRIES: usize = 100;

/// Splits `d` across `clients` with per-class Dirichlet(`alpha`) shares, then
/// carves a label-stratified test split out of each client's share.
///
/// Draws in which some client would end up with an empty train or test set
/// are discarded and redrawn, up to a fixed retry budget.
pub fn partition_dirichlet(
    d: &Dataset,
    clients: usize,
    alpha: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if clients < 1 {
        return Err(Error::Input("need at least one client".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Input(format!("alpha must be > 0, got {alpha}")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Input(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Input(e.to_string()))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.num_classes];
    for (i, &y) in d.labels.iter().enumerate() {
        by_class[y].push(i);
    }

    for attempt in 0..PARTITION_RETRIES {
        let mut rng = stream_rng(seed, Stream::Partition, &[attempt as u64]);
        let mut owned: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let shares = dirichlet(&gamma, clients, &mut rng);
            let n = members.len();
            let mut start = 0;
            let mut acc = 0.0;
            for (k, share) in shares.iter().enumerate() {
                acc += share;
                let end = if k + 1 == clients {
                    n
                } else {
                    ((acc * n as f64) as usize).clamp(start, n)
                };
                owned[k].extend_from_slice(&members[start..end]);
                start = end;
            }
        }

        let split: Vec<(Vec<usize>, Vec<usize>)> = owned
            .iter()
            .map(|idx| stratified_split(d, idx, test_fraction))
            .collect();
        let degenerate = split
            .iter()
            .any(|(train, test)| train.is_empty() || (test_fraction > 0.0 && test.is_empty()));
        if degenerate {
            continue;
        }
        return Ok(split
            .into_iter()
            .enumerate()
            .map(|(k, (train_index, test_index))| ClientDataset {
                client_id: k,
                train: d.subset(&train_index),
                test: d.subset(&test_index),
                train_index,
                test_index,
            })
            .collect());
    }
    Err(Error::Partition(format!(
        "no draw in {PARTITION_RETRIES} attempts gave every one of {clients} clients a nonempty \
         train and test set; use a larger dataset or a larger alpha (got {alpha})"
    )))
}

fn dirichlet<R: Rng>(gamma: &Gamma<f64>, k: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Test counts per class follow a largest-remainder apportionment of
/// `round(n·fraction)`, so the train and test label histograms stay
/// proportional. Within a class the first members (already shuffled) go to
/// test.
fn stratified_split(d: &Dataset, idx: &[usize], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n = idx.len();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); d.num_classes];
    for &i in idx {
        per_class[d.labels[i]].push(i);
    }
    let mut n_test = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        n_test = n_test.clamp(1, n - 1);
    }
    let quotas: Vec<f64> = per_class.iter().map(|m| m.len() as f64 * fraction).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest = n_test.saturating_sub(take.iter().sum());
    let mut order: Vec<usize> = (0..d.num_classes).collect();
    // largest remainder first, class index breaks ties
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(order.len() * 2) {
        if rest == 0 {
            break;
        }
        if take[c] < per_class[c].len() {
            take[c] += 1;
            rest -= 1;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (members, &t) in per_class.iter().zip(&take) {
        test.extend_from_slice(&members[..t]);
        train.extend_from_slice(&members[t..]);
    }
    (train, test)
}

/// Fraction of the client's training samples in each class.
pub fn label_frequency(cd: &ClientDataset) -> Result<LabelProfile> {
    let n = cd.train.len();
    if n == 0 {
        return Err(Error::Input(format!(
            "client {} has an empty train set",
            cd.client_id
        )));
    }
    let freqs = cd
        .train
        .class_counts()
        .into_iter()
        .map(|c| c as f64 / n as f64)
        .collect();
    Ok(LabelProfile {
        client_id: cd.client_id,
        freqs,
    })
}

/// Adds i.i.d. `N(0, noise_sigma²)` jitter to every entry.
pub fn augment_batch(x: &Matrix, noise_sigma: f64, seed: u64) -> Result<Matrix> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::Input(format!(
            "noise sigma must be >= 0, got {noise_sigma}"
        )));
    }
    if noise_sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Input(e.to_string()))?;
    let mut rng = stream_rng(seed, Stream::Augment, &[]);
    Ok(x.map(|v| v + normal.sample(&mut rng)))
}

/// Shannon entropy (nats) of a distribution.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn client(labels: &[usize], classes: usize) -> ClientDataset {
        let n = labels.len();
        let ds = Dataset::new(Matrix::zeros(n, 2), labels.to_vec(), classes).unwrap();
        ClientDataset {
            client_id: 0,
            train: ds.clone(),
            test: ds,
            train_index: (0..n).collect(),
            test_index: Vec::new(),
        }
    }

    #[test]
    fn zero_spread_sits_on_means() {
        let d = make_synthetic(2, 2, 1, 0.0, 4).unwrap();
        assert_eq!(d.len(), 2);
        let gap: f64 = d
            .inputs
            .row(0)
            .iter()
            .zip(d.inputs.row(1))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((gap - 1.0).abs() < 1e-12, "means must be unit separated");
    }

    #[test]
    fn synthetic_counts() {
        let d = make_synthetic(4, 16, 100, 0.5, 1).unwrap();
        assert_eq!(d.len(), 400);
        assert_eq!(d.class_counts(), vec![100; 4]);
    }

    #[test]
    fn low_spread_is_nearest_centroid_separable() {
        let d = make_synthetic(4, 16, 100, 0.1, 2).unwrap();
        let mut centroids = Matrix::zeros(4, 16);
        for (i, &y) in d.labels.iter().enumerate() {
            for (c, x) in centroids.row_mut(y).iter_mut().zip(d.inputs.row(i)) {
                *c += x / 100.0;
            }
        }
        let correct = (0..d.len())
            .filter(|&i| {
                let x = d.inputs.row(i);
                let best = (0..4)
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(centroids.row(a)).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = x.iter().zip(centroids.row(b)).map(|(p, q)| (p - q).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == d.labels[i]
            })
            .count();
        assert!(correct as f64 / d.len() as f64 > 0.99);
    }

    #[test]
    fn label_frequency_examples() {
        let p = label_frequency(&client(&[0, 0, 1, 2], 3)).unwrap();
        assert_eq!(p.freqs, vec![0.5, 0.25, 0.25]);
        let p = label_frequency(&client(&[1, 1, 1], 3)).unwrap();
        assert_eq!(p.freqs, vec![0.0, 1.0, 0.0]);
        assert!(label_frequency(&client(&[], 3)).is_err());
    }

    #[test]
    fn label_frequency_matches_direct_count() {
        let d = make_synthetic(5, 4, 60, 1.0, 3).unwrap();
        let parts = partition_dirichlet(&d, 6, 0.5, 0.2, 17).unwrap();
        for cd in &parts {
            let p = label_frequency(cd).unwrap();
            let n = cd.train.labels.len() as f64;
            for c in 0..5 {
                let count = cd.train.labels.iter().filter(|&&y| y == c).count() as f64;
                assert_eq!(p.freqs[c], count / n);
            }
            assert!((p.freqs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn augmentation_identity_and_statistics() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(augment_batch(&x, 0.0, 1).unwrap(), x);
        assert!(augment_batch(&x, -1.0, 1).is_err());

        let big = Matrix::zeros(1000, 4);
        let out = augment_batch(&big, 0.1, 9).unwrap();
        let n = out.len() as f64;
        let mean = out.sum() / n;
        let var = out.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((0.09..=0.11).contains(&std), "std {std}");
        assert_eq!(out, augment_batch(&big, 0.1, 9).unwrap());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let ds = parse_csv("x,y,label\n0.5,1.0,0\n-1,2,1\n", true).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels, vec![0, 1]);
        assert!(parse_csv("0.5,1.0,0\n1,2\n", false).is_err());
        assert!(parse_csv("0.5,abc,0\n", false).is_err());
        // class 1 missing
        assert!(parse_csv("0.5,1.0,0\n0.1,0.2,2\n", false).is_err());
    }

    #[test]
    fn near_infinite_alpha_is_uniform() {
        let d = make_synthetic(4, 4, 400, 1.0, 0).unwrap();
        let parts = partition_dirichlet(&d, 10, 1e6, 0.2, 3).unwrap();
        for cd in &parts {
            let p = label_frequency(cd).unwrap();
            for f in p.freqs {
                assert!((f - 0.25).abs() < 0.05, "freq {f}");
            }
        }
    }

    #[test]
    fn smaller_alpha_concentrates_labels() {
        let d = make_synthetic(10, 2, 100, 1.0, 0).unwrap();
        let mean_max_share = |alpha: f64| {
            let mut total = 0.0;
            for seed in 0..100 {
                let parts = partition_dirichlet(&d, 10, alpha, 0.2, seed).unwrap();
                let m: f64 = parts
                    .iter()
                    .map(|cd| {
                        label_frequency(cd)
                            .unwrap()
                            .freqs
                            .into_iter()
                            .fold(0.0, f64::max)
                    })
                    .sum::<f64>()
                    / parts.len() as f64;
                total += m;
            }
            total / 100.0
        };
        assert!(mean_max_share(0.5) > mean_max_share(2.0));
    }

    #[test]
    fn impossible_partition_reports_failure() {
        let d = make_synthetic(2, 2, 1, 1.0, 0).unwrap();
        match partition_dirichlet(&d, 5, 0.5, 0.2, 0) {
            Err(Error::Partition(msg)) => assert!(msg.contains("alpha")),
            other => panic!("expected partition failure, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn partition_is_exhaustive_and_disjoint(
            seed in 0u64..10_000,
            alpha in 0.2f64..5.0,
            clients in 2usize..8,
        ) {
            let d = make_synthetic(4, 3, 40, 1.0, seed).unwrap();
            let parts = partition_dirichlet(&d, clients, alpha, 0.2, seed).unwrap();
            let mut seen: Vec<usize> = parts
                .iter()
                .flat_map(|cd| cd.train_index.iter().chain(&cd.test_index).copied())
                .collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..d.len()).collect::<Vec<_>>());
            for cd in &parts {
                prop_assert!(!cd.train.is_empty());
                for (row, &src) in cd.train_index.iter().enumerate() {
                    prop_assert_eq!(cd.train.labels[row], d.labels[src]);
                }
            }
        }
    }
}
