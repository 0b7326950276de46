use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Result, TrfpError};

use super::activation;
use super::adam::AdamState;
use super::checkpoint::{NamedTensor, TensorStore};
use super::tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Mish,
    Identity,
}

impl Activation {
    fn code(self) -> f64 {
        match self {
            Activation::Identity => 0.0,
            Activation::Mish => 1.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Mish),
            _ => Err(TrfpError::Checkpoint(format!("unknown activation code {c}"))),
        }
    }
}

/// How the output layer is initialised. Hidden layers always use He-uniform
/// fan-in scaling with zero bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputInit {
    HeUniform,
    /// Weights uniform in `[-scale, scale]`, every bias set to `bias`.
    Small { scale: f64, bias: f64 },
}

/// Dense network: `x -> act(x W0 + b0) -> ... -> x Wn + bn`.
///
/// Parameters are stored flat as `[W0, b0, W1, b1, ...]`, with `W` shaped
/// `[in, out]` and `b` shaped `[1, out]`. The last layer is always linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    params: Vec<Array2<f64>>,
    hidden_activation: Activation,
    pub adam: AdamState,
}

/// Handles to an [`MlpParams`] copied onto a tape.
#[derive(Debug, Clone)]
pub struct MlpVars<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> MlpVars<'t> {
    pub fn grads(&self, g: &Gradients) -> Vec<Array2<f64>> {
        self.vars.iter().map(|v| g.wrt(*v)).collect()
    }
}

impl MlpParams {
    /// `sizes` lists every width including input and output, so
    /// `[4, 64, 64, 2]` has two hidden layers.
    pub fn new(
        sizes: &[usize],
        hidden_activation: Activation,
        output_init: OutputInit,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let n = sizes.len() - 1;
        let mut params = Vec::with_capacity(2 * n);
        for (i, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let last = i == n - 1;
            let (w, b) = match (last, output_init) {
                (true, OutputInit::Small { scale, bias }) => (
                    uniform((fan_in, fan_out), scale, rng),
                    Array2::from_elem((1, fan_out), bias),
                ),
                _ => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (uniform((fan_in, fan_out), bound, rng), Array2::zeros((1, fan_out)))
                }
            };
            params.push(w);
            params.push(b);
        }
        let adam = AdamState::for_params(&params);
        Self {
            params,
            hidden_activation,
            adam,
        }
    }

    /// Builds a network from explicit `(W, b)` pairs.
    pub fn from_layers(layers: Vec<(Array2<f64>, Array1<f64>)>, hidden_activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(TrfpError::Shape("an MLP needs at least one layer".into()));
        }
        let mut params = Vec::with_capacity(2 * layers.len());
        for (i, (w, b)) in layers.into_iter().enumerate() {
            if w.ncols() != b.len() {
                return Err(TrfpError::Shape(format!(
                    "layer {i}: weight has {} outputs but bias has {}",
                    w.ncols(),
                    b.len()
                )));
            }
            if let Some(prev) = params.last() {
                let prev: &Array2<f64> = prev;
                if prev.ncols() != w.nrows() {
                    return Err(TrfpError::Shape(format!(
                        "layer {i}: input width {} does not match previous output {}",
                        w.nrows(),
                        prev.ncols()
                    )));
                }
            }
            params.push(w);
            params.push(b.insert_axis(ndarray::Axis(0)));
        }
        let adam = AdamState::for_params(&params);
        Ok(Self {
            params,
            hidden_activation,
            adam,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.params.len() / 2
    }

    pub fn input_dim(&self) -> usize {
        self.params[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.params[self.params.len() - 1].ncols()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn weight(&self, layer: usize) -> &Array2<f64> {
        &self.params[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Array2<f64> {
        &self.params[2 * layer + 1]
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_dim() {
            return Err(TrfpError::Shape(format!(
                "MLP expects input width {}, got {}",
                self.input_dim(),
                width
            )));
        }
        Ok(())
    }

    /// Plain forward pass, nothing recorded.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let n = self.n_layers();
        let mut h = x.dot(&self.params[0]) + &self.params[1];
        for i in 1..n {
            if self.hidden_activation == Activation::Mish {
                h.mapv_inplace(activation::mish);
            }
            h = h.dot(&self.params[2 * i]) + &self.params[2 * i + 1];
        }
        Ok(h)
    }

    /// Copies the parameters onto `tape` as leaves.
    pub fn register<'t>(&self, tape: &'t Tape) -> MlpVars<'t> {
        MlpVars {
            vars: self.params.iter().map(|p| tape.leaf(p.clone())).collect(),
        }
    }

    /// Forward pass recorded on the tape that owns `vars`.
    pub fn forward_var<'t>(&self, vars: &MlpVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(x.shape().1)?;
        let n = self.n_layers();
        let mut h = x.matmul(vars.vars[0]).add_row(vars.vars[1]);
        for i in 1..n {
            if self.hidden_activation == Activation::Mish {
                h = h.mish();
            }
            h = h.matmul(vars.vars[2 * i]).add_row(vars.vars[2 * i + 1]);
        }
        Ok(h)
    }

    pub fn adam_step(&mut self, grads: &[Array2<f64>], lr: f64) -> Result<()> {
        self.adam.step(&mut self.params, grads, lr)
    }

    /// Polyak blend toward `online`: `self <- (1 - tau) self + tau online`.
    pub fn blend_toward(&mut self, online: &MlpParams, tau: f64) {
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            ndarray::Zip::from(t).and(o).for_each(|t, &o| *t = (1.0 - tau) * *t + tau * o);
        }
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = vec![
            NamedTensor::scalar(format!("{prefix}.layers"), self.n_layers() as f64),
            NamedTensor::scalar(format!("{prefix}.activation"), self.hidden_activation.code()),
        ];
        for (i, p) in self.params.iter().enumerate() {
            out.push(NamedTensor::matrix(format!("{prefix}.{}", param_name(i)), p));
        }
        out.push(NamedTensor::scalar(format!("{prefix}.adam_step"), self.adam.step as f64));
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            out.push(NamedTensor::matrix(format!("{prefix}.{}.adam_m", param_name(i)), m));
            out.push(NamedTensor::matrix(format!("{prefix}.{}.adam_v", param_name(i)), v));
        }
        out
    }

    pub fn from_tensors(store: &TensorStore, prefix: &str) -> Result<Self> {
        let n_layers = store.scalar(&format!("{prefix}.layers"))? as usize;
        let act = Activation::from_code(store.scalar(&format!("{prefix}.activation"))?)?;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let w = store.matrix(&format!("{prefix}.{}", param_name(2 * l)))?;
            let b = store.matrix(&format!("{prefix}.{}", param_name(2 * l + 1)))?;
            if b.nrows() != 1 {
                return Err(TrfpError::Checkpoint(format!("{prefix}: bias {l} must be a row")));
            }
            layers.push((w, b.row(0).to_owned()));
        }
        let mut mlp = MlpParams::from_layers(layers, act)?;
        mlp.adam.step = store.scalar(&format!("{prefix}.adam_step"))? as u64;
        for i in 0..mlp.params.len() {
            let m = store.matrix(&format!("{prefix}.{}.adam_m", param_name(i)))?;
            let v = store.matrix(&format!("{prefix}.{}.adam_v", param_name(i)))?;
            if m.dim() != mlp.params[i].dim() || v.dim() != mlp.params[i].dim() {
                return Err(TrfpError::Checkpoint(format!(
                    "{prefix}: Adam moments for {} have the wrong shape",
                    param_name(i)
                )));
            }
            mlp.adam.m[i] = m;
            mlp.adam.v[i] = v;
        }
        Ok(mlp)
    }
}

fn param_name(i: usize) -> String {
    if i % 2 == 0 {
        format!("w{}", i / 2)
    } else {
        format!("b{}", i / 2)
    }
}

fn uniform(shape: (usize, usize), bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    if bound == 0.0 {
        return Array2::zeros(shape);
    }
    let dist = Uniform::new(-bound, bound).expect("finite positive bound");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar-loop forward pass, independent of ndarray's `dot`.
    fn reference_forward(mlp: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in 0..mlp.n_layers() {
            let w = mlp.weight(l);
            let b = mlp.bias(l);
            let mut out = vec![0.0; w.ncols()];
            for (j, o) in out.iter_mut().enumerate() {
                let mut acc = b[[0, j]];
                for (i, hi) in h.iter().enumerate() {
                    acc += hi * w[[i, j]];
                }
                *o = if l + 1 < mlp.n_layers() {
                    let sp = if acc > 30.0 { acc } else { (1.0 + acc.exp()).ln() };
                    acc * sp.tanh()
                } else {
                    acc
                };
            }
            h = out;
        }
        h
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mlp = MlpParams::from_layers(vec![(Array2::eye(3), Array1::zeros(3))], Activation::Identity).unwrap();
        let x = array![[1.0, -2.0, 0.5]];
        assert_eq!(mlp.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_output_bias() {
        let mlp = MlpParams::from_layers(
            vec![
                (Array2::zeros((2, 4)), Array1::zeros(4)),
                (Array2::zeros((4, 2)), array![0.3, -0.7]),
            ],
            Activation::Mish,
        )
        .unwrap();
        let y = mlp.forward(&array![[5.0, 6.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(y, array![[0.3, -0.7], [0.3, -0.7]]);
    }

    #[test]
    fn forward_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = MlpParams::new(&[3, 5, 2], Activation::Mish, OutputInit::HeUniform, &mut rng);
        let x = [0.4, -1.1, 2.0];
        let y = mlp.forward(&array![[x[0], x[1], x[2]]]).unwrap();
        let r = reference_forward(&mlp, &x);
        for j in 0..2 {
            assert!((y[[0, j]] - r[j]).abs() < 1e-12);
        }
        let tape = Tape::new();
        let vars = mlp.register(&tape);
        let yv = mlp.forward_var(&vars, tape.constant(array![[x[0], x[1], x[2]]])).unwrap();
        assert_eq!(*yv.value(), y);
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = MlpParams::new(&[3, 4, 1], Activation::Mish, OutputInit::HeUniform, &mut rng);
        assert!(matches!(mlp.forward(&Array2::zeros((1, 2))), Err(TrfpError::Shape(_))));
        let bad = MlpParams::from_layers(
            vec![(Array2::zeros((2, 3)), Array1::zeros(3)), (Array2::zeros((4, 1)), Array1::zeros(1))],
            Activation::Mish,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn small_output_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = MlpParams::new(&[4, 8, 2], Activation::Mish, OutputInit::Small { scale: 0.01, bias: -1.5 }, &mut rng);
        assert!(mlp.weight(1).iter().all(|w| w.abs() <= 0.01));
        assert!(mlp.bias(1).iter().all(|&b| b == -1.5));
        assert!(mlp.bias(0).iter().all(|&b| b == 0.0));
    }

    #[test]
    fn tensor_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mlp = MlpParams::new(&[2, 3, 1], Activation::Mish, OutputInit::HeUniform, &mut rng);
        let grads: Vec<_> = mlp.params().iter().map(|p| p.mapv(|x| x + 0.5)).collect();
        mlp.adam_step(&grads, 1e-3).unwrap();
        let mut store = TensorStore::new();
        store.extend(mlp.to_tensors("q1"));
        let back = MlpParams::from_tensors(&store, "q1").unwrap();
        assert_eq!(back, mlp);
    }

    #[test]
    fn blend_is_exact_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let online = MlpParams::new(&[2, 3, 1], Activation::Mish, OutputInit::HeUniform, &mut rng);
        let mut target = MlpParams::new(&[2, 3, 1], Activation::Mish, OutputInit::HeUniform, &mut rng);
        let old = target.clone();
        target.blend_toward(&online, 0.25);
        for ((t, o), n) in target.params().iter().zip(old.params()).zip(online.params()) {
            for ((t, o), n) in t.iter().zip(o).zip(n) {
                assert_eq!(*t, 0.75 * o + 0.25 * n);
            }
        }
    }
}
