//! Personalized client models: an MLP feature extractor followed by a linear
//! classifier.

mod optim;

pub use optim::Adam;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Matrix, Tape, Var};
use crate::rng::{stream_rng, Stream};

/// Size presets standing in for small / medium / large backbones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Preset {
    MlpS,
    MlpM,
    MlpL,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::MlpS, Preset::MlpM, Preset::MlpL];

    pub fn hidden(self) -> Vec<usize> {
        match self {
            Preset::MlpS => vec![32, 32],
            Preset::MlpM => vec![64, 64],
            Preset::MlpL => vec![128, 128],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::MlpS => "mlp-s",
            Preset::MlpM => "mlp-m",
            Preset::MlpL => "mlp-l",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-s" => Ok(Preset::MlpS),
            "mlp-m" => Ok(Preset::MlpM),
            "mlp-l" => Ok(Preset::MlpL),
            other => Err(Error::Input(format!(
                "unknown architecture `{other}` (expected mlp-s, mlp-m or mlp-l)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub name: String,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl ArchSpec {
    pub fn new(name: impl Into<String>, input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Input("hidden widths must be nonempty and positive".into()));
        }
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::Input("input dim and class count must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            input_dim,
            hidden,
            num_classes,
        })
    }

    pub fn preset(p: Preset, input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(p.name(), input_dim, p.hidden(), num_classes)
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("hidden is nonempty")
    }

    pub fn param_count(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut total = 0;
        for &h in self.hidden.iter().chain(std::iter::once(&self.num_classes)) {
            total += fan_in * h + h;
            fan_in = h;
        }
        total
    }
}

/// Fully connected layer `x·W + b`, `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight = Matrix::new(fan_in, fan_out, draw(fan_in * fan_out)).expect("sized");
        let bias = Matrix::new(1, fan_out, draw(fan_out)).expect("sized");
        Self { weight, bias }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        let bias = self.bias.as_slice();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(out)
    }
}

/// Parameters of a [`ModelBundle`] recorded on a tape.
pub struct BoundModel {
    features: Vec<(Var, Var)>,
    classifier: (Var, Var),
}

impl BoundModel {
    /// Parameter handles in the order used by [`ModelBundle::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        self.features
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: ArchSpec,
    /// Feature extractor: ReLU after every hidden layer.
    pub feature_layers: Vec<Dense>,
    /// Linear head, no activation.
    pub classifier: Dense,
    pub optimizer: Adam,
}

/// Builds a model with fan-in scaled uniform initialization.
pub fn build_model(arch: &ArchSpec, seed: u64) -> ModelBundle {
    let mut rng = stream_rng(seed, Stream::ModelInit, &[]);
    let mut fan_in = arch.input_dim;
    let mut feature_layers = Vec::with_capacity(arch.hidden.len());
    for &h in &arch.hidden {
        feature_layers.push(Dense::init(fan_in, h, &mut rng));
        fan_in = h;
    }
    let classifier = Dense::init(fan_in, arch.num_classes, &mut rng);
    ModelBundle {
        arch: arch.clone(),
        feature_layers,
        classifier,
        optimizer: Adam::new(),
    }
}

impl ModelBundle {
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.feature_layers
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.feature_layers
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// All parameters flattened in [`Self::params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.as_slice().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("set_flat_params", self.param_count(), flat.len()));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::Input(format!(
                "model `{}` expects {} input columns, got {}",
                self.arch.name,
                self.arch.input_dim,
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn forward_features(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.feature_layers {
            h = layer.apply(&h)?.map(|v| v.max(0.0));
        }
        Ok(h)
    }

    pub fn classify(&self, features: &Matrix) -> Result<Matrix> {
        self.classifier.apply(features)
    }

    /// Features `F_f(X)` and logits `F_c(F_f(X))`.
    pub fn forward_split(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let features = self.forward_features(x)?;
        let logits = self.classify(&features)?;
        Ok((features, logits))
    }

    pub fn forward_logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_split(x)?.1)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let features = self
            .feature_layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        let classifier = (
            tape.leaf(self.classifier.weight.clone()),
            tape.leaf(self.classifier.bias.clone()),
        );
        BoundModel {
            features,
            classifier,
        }
    }

    /// Differentiable forward pass; returns `(features, logits)` nodes.
    pub fn forward_tape(&self, bound: &BoundModel, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let f = self.features_tape(bound, tape, x)?;
        let (w, b) = bound.classifier;
        let z = tape.matmul(f, w)?;
        let logits = tape.add_row(z, b)?;
        Ok((f, logits))
    }

    pub fn features_tape(&self, bound: &BoundModel, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        for &(w, b) in &bound.features {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    /// Parameter gradients in [`Self::params`] order.
    pub fn collect_grads(&self, bound: &BoundModel, grads: &Gradients) -> Vec<Matrix> {
        bound
            .param_vars()
            .into_iter()
            .zip(self.params())
            .map(|(v, p)| grads.get_or_zeros(v, p))
            .collect()
    }

    /// One adaptive-moment step with the bundle's own optimizer state.
    pub fn optimizer_step(&mut self, grads: &[Matrix], lr: f64) -> Result<()> {
        let mut optimizer = std::mem::take(&mut self.optimizer);
        let result = optimizer.step(&mut self.params_mut(), grads, lr);
        self.optimizer = optimizer;
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn param_count_small_mlp() {
        let arch = ArchSpec::new("tiny", 4, vec![8], 3).unwrap();
        assert_eq!(arch.param_count(), 67);
        assert_eq!(build_model(&arch, 0).param_count(), 67);
    }

    #[test]
    fn presets_grow_in_size() {
        let counts: Vec<usize> = Preset::ALL
            .iter()
            .map(|&p| ArchSpec::preset(p, 16, 4).unwrap().param_count())
            .collect();
        // 16·32+32 + 32·32+32 + 32·4+4, and so on
        assert_eq!(counts, vec![1732, 5508, 19204]);
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_hidden_rejected() {
        assert!(ArchSpec::new("x", 4, vec![], 3).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let arch = ArchSpec::preset(Preset::MlpS, 16, 4).unwrap();
        assert_eq!(build_model(&arch, 9), build_model(&arch, 9));
        assert_ne!(build_model(&arch, 9).flat_params(), build_model(&arch, 10).flat_params());
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let arch = ArchSpec::new("z", 3, vec![5, 4], 3).unwrap();
        let mut m = build_model(&arch, 0);
        let zeros = vec![0.0; m.param_count()];
        m.set_flat_params(&zeros).unwrap();
        let (f, l) = m.forward_split(&random_input(4, 3, 1)).unwrap();
        assert!(f.as_slice().iter().all(|&v| v == 0.0));
        assert!(l.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_rows_are_independent() {
        let arch = ArchSpec::preset(Preset::MlpS, 6, 3).unwrap();
        let m = build_model(&arch, 2);
        let x = random_input(1, 6, 3);
        let xx = x.vstack(&x).unwrap();
        let one = m.forward_logits(&x).unwrap();
        let two = m.forward_logits(&xx).unwrap();
        assert_eq!(one.row(0), two.row(0));
        assert_eq!(one.row(0), two.row(1));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = build_model(&ArchSpec::preset(Preset::MlpS, 6, 3).unwrap(), 0);
        assert!(m.forward_split(&Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn tape_forward_matches_direct_and_split() {
        let m = build_model(&ArchSpec::preset(Preset::MlpM, 5, 4).unwrap(), 4);
        let x = random_input(7, 5, 5);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let (f, l) = m.forward_tape(&bound, &mut tape, xv).unwrap();
        let (fd, ld) = m.forward_split(&x).unwrap();
        assert_eq!(tape.value(f), &fd);
        assert_eq!(tape.value(l), &ld);
        assert_eq!(m.classify(&fd).unwrap(), ld);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = build_model(&ArchSpec::new("g", 4, vec![6], 3).unwrap(), 7);
        let x0 = random_input(3, 4, 8);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let xv = tape.leaf(x0.clone());
        let (_, l) = m.forward_tape(&bound, &mut tape, xv).unwrap();
        let s = tape.sum(l);
        let g = tape.backward(s).unwrap();
        let fd = finite_diff_gradient(|x| Ok(m.forward_logits(x)?.sum()), &x0, 1e-5).unwrap();
        let err = g.get(xv).unwrap().sub(&fd).unwrap().frobenius() / fd.frobenius();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn optimizer_step_moves_params_and_counts() {
        let mut m = build_model(&ArchSpec::new("o", 2, vec![3], 2).unwrap(), 0);
        let before = m.flat_params();
        let grads: Vec<Matrix> = m.params().iter().map(|p| Matrix::filled(p.rows(), p.cols(), 1.0)).collect();
        m.optimizer_step(&grads, 0.01).unwrap();
        assert_eq!(m.optimizer.steps(), 1);
        for (a, b) in m.flat_params().iter().zip(&before) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
        assert!(m.optimizer_step(&grads[..1], 0.01).is_err());
    }
}
