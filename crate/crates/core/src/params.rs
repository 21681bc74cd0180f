//! Convolution parameters, parameter storage, initialization and the
//! momentum update step.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Weights and bias of one convolution layer.
///
/// Weights have shape `(k_out, c_in, kh, kw)`; the bias holds one scalar per
/// output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Scalar> {
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor4<T>, bias: Vec<T>) -> Result<Self> {
        if weights.shape().n != bias.len() {
            return Err(Error::ShapeMismatch {
                op: "ConvParams::new",
                details: format!(
                    "weights {} expect {} bias entries, got {}",
                    weights.shape(),
                    weights.shape().n,
                    bias.len()
                ),
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn k_out(&self) -> usize {
        self.weights.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape().h, self.weights.shape().w)
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|&v| U::from_f64(Scalar::to_f64(v))).collect(),
        }
    }
}

/// Handle to one parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of all convolution parameters of a network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, ConvParams<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, params: ConvParams<T>) -> ParamId {
        self.entries.push((name.into(), params));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ConvParams<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ConvParams<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ConvParams<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (name, p))| (ParamId(i), name.as_str(), p))
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(name, p)| (name.clone(), p.cast()))
                .collect(),
        }
    }

    /// Total number of scalar parameters (weights plus biases).
    pub fn scalar_count(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, p)| p.weights.len() + p.bias.len())
            .sum()
    }
}

/// Per-parameter gradient buffers, shaped exactly like the [`ParamSet`] they
/// were computed for. Parameters untouched by the forward pass keep zeros.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    pub weights: Vec<Tensor4<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        let mut weights = Vec::with_capacity(params.len());
        let mut biases = Vec::with_capacity(params.len());
        for (_, _, p) in params.iter() {
            let s = p.weights.shape();
            weights.push(Tensor4::zeros(s.n, s.c, s.h, s.w));
            biases.push(vec![T::zero(); p.bias.len()]);
        }
        Self { weights, biases }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.all_finite())
            && self.biases.iter().flatten().all(|b| b.is_finite())
    }
}

/// Momentum state, one velocity buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct Velocity<T: Scalar> {
    pub weights: Vec<Tensor4<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> Velocity<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        let g = Gradients::zeros_like(params);
        Self {
            weights: g.weights,
            biases: g.biases,
        }
    }
}

/// Gaussian weight tensor with standard deviation `sqrt(2 / fan_in)` where
/// `fan_in = c_in * kh * kw`. Sampling happens in `f64` so the stream is the
/// same for both dtypes.
pub fn he_init<T: Scalar, R: Rng>(n: usize, c: usize, kh: usize, kw: usize, rng: &mut R) -> Tensor4<T> {
    let std = he_std(c, kh, kw);
    let mut t = Tensor4::zeros(n, c, kh, kw);
    for v in t.data_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *v = T::from_f64(g * std);
    }
    t
}

/// `sqrt(2 / N)` with `N = c_in * kh * kw`.
pub fn he_std(c_in: usize, kh: usize, kw: usize) -> f64 {
    let fan_in = (c_in * kh * kw) as f64;
    assert!(fan_in > 0.0, "he_std: fan-in must be positive");
    (2.0 / fan_in).sqrt()
}

/// Freshly initialized convolution layer: He Gaussian weights, zero bias.
pub fn init_conv<T: Scalar, R: Rng>(
    k_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    rng: &mut R,
) -> ConvParams<T> {
    ConvParams {
        weights: he_init(k_out, c_in, kh, kw, rng),
        bias: vec![T::zero(); k_out],
    }
}

/// Classical momentum update over every parameter in the set:
/// `v <- momentum * v - lr * g` then `w <- w + v`.
///
/// Rejects the whole step if any gradient entry is non-finite, leaving
/// parameters and velocity untouched.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    velocity: &mut Velocity<T>,
    lr: T,
    momentum: T,
) -> Result<()> {
    if lr < T::zero() || !lr.is_finite() {
        return Err(Error::BadArgument(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if momentum < T::zero() || momentum >= T::one() {
        return Err(Error::BadArgument(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    for id in params.ids() {
        if !grads.weights[id.0].all_finite() || !grads.biases[id.0].iter().all(|b| b.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: params.name(id).to_string(),
            });
        }
    }
    for id in params.ids() {
        let p = params.get_mut(id);
        let vw = velocity.weights[id.0].data_mut();
        for (i, w) in p.weights.data_mut().iter_mut().enumerate() {
            vw[i] = momentum * vw[i] - lr * grads.weights[id.0].data()[i];
            *w = *w + vw[i];
        }
        let vb = &mut velocity.biases[id.0];
        for (i, b) in p.bias.iter_mut().enumerate() {
            vb[i] = momentum * vb[i] - lr * grads.biases[id.0][i];
            *b = *b + vb[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param_set(w: &[f64]) -> ParamSet<f64> {
        let mut set = ParamSet::new();
        let n = w.len();
        set.push(
            "p",
            ConvParams::new(
                Tensor4::from_vec(n, 1, 1, 1, w.to_vec()).unwrap(),
                vec![0.0; n],
            )
            .unwrap(),
        );
        set
    }

    fn grads_of(set: &ParamSet<f64>, g: &[f64]) -> Gradients<f64> {
        let mut grads = Gradients::zeros_like(set);
        grads.weights[0].data_mut().copy_from_slice(g);
        grads
    }

    #[test]
    fn he_std_for_3x3_over_64_channels() {
        // fan-in 9 * 64 = 576
        assert_eq!(64 * 3 * 3, 576);
        let std = he_std(64, 3, 3);
        assert!((std - 0.05893).abs() < 1e-5, "std = {std}");
    }

    #[test]
    fn he_init_sample_variance_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // ~1.04e6 samples at fan-in 576
        let t: Tensor4<f64> = he_init(1800, 64, 3, 3, &mut rng);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want = 2.0 / 576.0;
        assert!((var - want).abs() / want < 0.05, "var {var} vs {want}");
    }

    #[test]
    fn momentum_zero_is_plain_sgd() {
        let mut set = one_param_set(&[1.0, -2.0]);
        let grads = grads_of(&set, &[0.5, 0.25]);
        let mut vel = Velocity::zeros_like(&set);
        sgd_momentum_step(&mut set, &grads, &mut vel, 0.1, 0.0).unwrap();
        let w = set.get(ParamId(0)).weights.data();
        assert_eq!(w, &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn zero_gradient_zero_velocity_is_identity() {
        let mut set = one_param_set(&[3.0]);
        let grads = grads_of(&set, &[0.0]);
        let mut vel = Velocity::zeros_like(&set);
        sgd_momentum_step(&mut set, &grads, &mut vel, 0.1, 0.99).unwrap();
        assert_eq!(set.get(ParamId(0)).weights.data(), &[3.0]);
    }

    #[test]
    fn two_steps_constant_gradient_unrolls() {
        // v1 = -lr g, v2 = 0.99 v1 - lr g; dw = v1 + v2 = -lr g (1 + 1.99)
        let mut set = one_param_set(&[0.0]);
        let grads = grads_of(&set, &[2.0]);
        let mut vel = Velocity::zeros_like(&set);
        let lr = 0.1;
        sgd_momentum_step(&mut set, &grads, &mut vel, lr, 0.99).unwrap();
        sgd_momentum_step(&mut set, &grads, &mut vel, lr, 0.99).unwrap();
        let want = -lr * 2.0 * (1.0 + (1.0 + 0.99));
        let got = set.get(ParamId(0)).weights.data()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut set = one_param_set(&[1.0]);
        let grads = grads_of(&set, &[f64::NAN]);
        let mut vel = Velocity::zeros_like(&set);
        let err = sgd_momentum_step(&mut set, &grads, &mut vel, 0.1, 0.9);
        assert!(err.is_err());
        assert_eq!(set.get(ParamId(0)).weights.data(), &[1.0]);
    }
}
