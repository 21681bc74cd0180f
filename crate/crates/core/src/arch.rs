//! The U-shaped network: construction, valid-size arithmetic and forward
//! passes.
//!
//! The topology is fixed by [`UNetConfig`]: a contracting path of
//! conv/ReLU/pool blocks that doubles channels at every downsampling step,
//! a two-conv bottom with dropout, and an expansive path of up-convolutions
//! with center-cropped skip concatenations. Because every convolution is
//! unpadded, only certain input sizes survive the pooling parity rules;
//! [`output_size`] runs that recurrence and is the basis for tile planning.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{init_conv, ParamId, ParamSet};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Scalar, Tensor4};

/// Hyperparameters fixing one network topology.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    /// Number of 2x2 pooling steps in the contracting path.
    pub depth: usize,
    /// Channels produced by the first convolution pair.
    pub base_channels: usize,
    /// Channels of the input image.
    pub in_channels: usize,
    /// Output classes (channels of the final 1x1 convolution).
    pub num_classes: usize,
    /// Dropout probability applied after each bottom convolution.
    pub dropout_rate: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 64,
            in_channels: 1,
            num_classes: 2,
            dropout_rate: 0.5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Channels entering the bottom convolutions' output.
    pub fn bottom_channels(&self) -> usize {
        self.base_channels << self.depth
    }

    pub fn output_size(&self, input: usize) -> Result<SizeTrace> {
        output_size(input, self.depth)
    }

    pub fn valid_input_sizes(&self, min: usize, max: usize) -> Vec<usize> {
        valid_input_sizes(min, max, self.depth)
    }

    /// Context pixels consumed on each side: `(input - output) / 2`.
    pub fn context_margin(&self, input: usize) -> Result<usize> {
        let trace = self.output_size(input)?;
        Ok((input - trace.output) / 2)
    }
}

/// Spatial sizes traced through the network for one input size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeTrace {
    pub input: usize,
    pub output: usize,
    /// Size entering the bottom convolutions, i.e. after the last pooling.
    pub lowest_resolution: usize,
}

/// Runs the valid-convolution size recurrence for one input size.
///
/// Contracting level: two 3x3 convolutions shrink by 4, pooling requires an
/// even size and halves it. Bottom: shrink by 4. Expansive level: the
/// up-convolution doubles, the skip crop must have an even size difference,
/// and two more convolutions shrink by 4. Any intermediate below 1 or any
/// odd pooling input makes the size invalid; the error names the level.
pub fn output_size(input: usize, depth: usize) -> Result<SizeTrace> {
    let invalid = |reason: String| Error::InvalidTileSize {
        size: input,
        depth,
        reason,
    };
    if input < 1 {
        return Err(invalid("input size must be >= 1".into()));
    }
    let mut s = input;
    let mut skips = Vec::with_capacity(depth);
    for level in 0..depth {
        if s < 5 {
            return Err(invalid(format!(
                "contracting level {level}: size {s} too small for two 3x3 convolutions"
            )));
        }
        s -= 4;
        skips.push(s);
        if s % 2 != 0 {
            return Err(invalid(format!("odd pooling input at level {level} (size {s})")));
        }
        s /= 2;
    }
    let lowest_resolution = s;
    if s < 5 {
        return Err(invalid(format!(
            "bottom: size {s} too small for two 3x3 convolutions"
        )));
    }
    s -= 4;
    for level in (0..depth).rev() {
        s *= 2;
        let skip = skips[level];
        if skip < s {
            return Err(invalid(format!(
                "expansive level {level}: skip size {skip} smaller than upsampled size {s}"
            )));
        }
        if (skip - s) % 2 != 0 {
            return Err(invalid(format!(
                "expansive level {level}: odd crop difference ({skip} vs {s})"
            )));
        }
        if s < 5 {
            return Err(invalid(format!(
                "expansive level {level}: size {s} too small for two 3x3 convolutions"
            )));
        }
        s -= 4;
    }
    Ok(SizeTrace {
        input,
        output: s,
        lowest_resolution,
    })
}

/// All input sizes in `[min, max]` that pass [`output_size`], ascending.
/// An empty range yields an empty list.
pub fn valid_input_sizes(min: usize, max: usize, depth: usize) -> Vec<usize> {
    (min..=max).filter(|&s| output_size(s, depth).is_ok()).collect()
}

/// One step in the fixed layer sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Conv3x3(ParamId),
    Relu,
    /// Remember the current value as the skip source for the matching
    /// expansive level (LIFO pairing with `CropConcat`).
    PushSkip,
    MaxPool,
    Dropout,
    Upconv(ParamId),
    CropConcat,
    Conv1x1(ParamId),
}

/// A built network: ordered layers plus parameter storage.
///
/// Immutable after construction except for parameter updates between
/// forward/backward passes. Concurrent read-only inference is fine.
#[derive(Debug, Clone)]
pub struct UNet<T: Scalar> {
    config: UNetConfig,
    layers: Vec<Layer>,
    params: ParamSet<T>,
}

impl<T: Scalar> UNet<T> {
    /// Builds the network, He-initializing every convolution weight and
    /// zeroing every bias. Parameter order (and therefore RNG consumption)
    /// is fixed, so a seeded generator reproduces the build bit-exactly.
    pub fn build<R: Rng>(config: &UNetConfig, rng: &mut R) -> Self {
        config.validate().expect("invalid network config");
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut c_in = config.in_channels;

        for level in 0..config.depth {
            let c = config.base_channels << level;
            let p1 = params.push(format!("enc{level}.conv1"), init_conv(c, c_in, 3, 3, rng));
            let p2 = params.push(format!("enc{level}.conv2"), init_conv(c, c, 3, 3, rng));
            layers.extend([
                Layer::Conv3x3(p1),
                Layer::Relu,
                Layer::Conv3x3(p2),
                Layer::Relu,
                Layer::PushSkip,
                Layer::MaxPool,
            ]);
            c_in = c;
        }

        let cb = config.bottom_channels();
        let b1 = params.push("bottom.conv1".to_string(), init_conv(cb, c_in, 3, 3, rng));
        let b2 = params.push("bottom.conv2".to_string(), init_conv(cb, cb, 3, 3, rng));
        layers.extend([
            Layer::Conv3x3(b1),
            Layer::Relu,
            Layer::Dropout,
            Layer::Conv3x3(b2),
            Layer::Relu,
            Layer::Dropout,
        ]);
        c_in = cb;

        for level in (0..config.depth).rev() {
            let c = config.base_channels << level;
            let up = params.push(format!("dec{level}.upconv"), init_conv(c, c_in, 2, 2, rng));
            let p1 = params.push(format!("dec{level}.conv1"), init_conv(c, 2 * c, 3, 3, rng));
            let p2 = params.push(format!("dec{level}.conv2"), init_conv(c, c, 3, 3, rng));
            layers.extend([
                Layer::Upconv(up),
                Layer::CropConcat,
                Layer::Conv3x3(p1),
                Layer::Relu,
                Layer::Conv3x3(p2),
                Layer::Relu,
            ]);
            c_in = c;
        }

        let fin = params.push("final.conv1x1".to_string(), init_conv(config.num_classes, c_in, 1, 1, rng));
        layers.push(Layer::Conv1x1(fin));

        Self {
            config: config.clone(),
            layers,
            params,
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Total number of convolutional layers (3x3, up- and 1x1 convolutions).
    pub fn conv_layer_count(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, input: &Tensor4<T>) -> Result<()> {
        let s = input.shape();
        if s.c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "forward",
                details: format!(
                    "input {s} has {} channels, network expects {}",
                    s.c, self.config.in_channels
                ),
            });
        }
        // reject invalid tiles before any computation
        output_size(s.h, self.config.depth)?;
        if s.w != s.h {
            output_size(s.w, self.config.depth)?;
        }
        Ok(())
    }

    /// Inference pass: dropout is the identity, nothing is recorded.
    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(input)?;
        let mut skips: Vec<Tensor4<T>> = Vec::with_capacity(self.config.depth);
        let mut cur = input.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv3x3(p) | Layer::Conv1x1(p) => ops::conv2d_valid(&cur, self.params.get(*p))?,
                Layer::Relu => ops::relu(&cur),
                Layer::PushSkip => {
                    skips.push(cur.clone());
                    cur
                }
                Layer::MaxPool => ops::maxpool2x2(&cur)?.0,
                Layer::Dropout => cur,
                Layer::Upconv(p) => ops::upconv2x2(&cur, self.params.get(*p))?,
                Layer::CropConcat => {
                    let skip = skips.pop().expect("skip stack balanced by construction");
                    ops::crop_concat(&skip, &cur)?
                }
            };
        }
        Ok(cur)
    }

    /// Training pass: records every operation on a fresh tape and applies
    /// dropout with the configured rate. Returns the tape and the logits id.
    pub fn forward_train<R: Rng>(&self, input: &Tensor4<T>, rng: &mut R) -> Result<(Tape<T>, ValueId)> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let mut skips: Vec<ValueId> = Vec::with_capacity(self.config.depth);
        let mut cur = tape.input(input.clone());
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv3x3(p) => tape.conv2d(cur, &self.params, *p)?,
                Layer::Conv1x1(p) => tape.conv1x1(cur, &self.params, *p)?,
                Layer::Relu => tape.relu(cur),
                Layer::PushSkip => {
                    skips.push(cur);
                    cur
                }
                Layer::MaxPool => tape.maxpool2x2(cur)?,
                Layer::Dropout => tape.dropout(cur, self.config.dropout_rate, rng)?,
                Layer::Upconv(p) => tape.upconv2x2(cur, &self.params, *p)?,
                Layer::CropConcat => {
                    let skip = skips.pop().expect("skip stack balanced by construction");
                    tape.crop_concat(skip, cur)?
                }
            };
        }
        Ok((tape, cur))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn thin(depth: usize) -> UNetConfig {
        UNetConfig {
            depth,
            base_channels: 2,
            in_channels: 1,
            num_classes: 2,
            dropout_rate: 0.0,
        }
    }

    /// Independent re-statement of the size rules, written step by step.
    /// Used as the brute-force oracle for `valid_input_sizes`.
    fn oracle_output_size(input: usize, depth: usize) -> Option<usize> {
        let conv_pair = |s: usize| -> Option<usize> { if s >= 5 { Some(s - 4) } else { None } };
        let mut sizes_before_pool = Vec::new();
        let mut s = input;
        for _ in 0..depth {
            s = conv_pair(s)?;
            if s % 2 != 0 {
                return None;
            }
            sizes_before_pool.push(s);
            s /= 2;
        }
        s = conv_pair(s)?;
        for level in (0..depth).rev() {
            s *= 2;
            let skip = sizes_before_pool[level];
            if skip < s || (skip - s) % 2 != 0 {
                return None;
            }
            s = conv_pair(s)?;
        }
        Some(s)
    }

    #[test]
    fn canonical_sizes_572_to_388_with_lowest_32() {
        let trace = output_size(572, 4).unwrap();
        assert_eq!(trace.output, 388);
        assert_eq!(trace.lowest_resolution, 32);
    }

    #[test]
    fn size_576_fails_at_level_2() {
        let err = output_size(576, 4).unwrap_err().to_string();
        assert!(err.contains("level 2"), "{err}");
    }

    #[test]
    fn size_188_shrinks_to_4() {
        assert_eq!(output_size(188, 4).unwrap().output, 4);
    }

    #[test]
    fn valid_sizes_between_560_and_600() {
        assert_eq!(valid_input_sizes(560, 600, 4), vec![572, 588]);
    }

    #[test]
    fn valid_sizes_match_independent_oracle() {
        for depth in 1..=4 {
            let got = valid_input_sizes(1, 200, depth);
            let want: Vec<usize> = (1..=200).filter(|&s| oracle_output_size(s, depth).is_some()).collect();
            assert_eq!(got, want, "depth {depth}");
            for &s in &got {
                assert_eq!(output_size(s, depth).unwrap().output, oracle_output_size(s, depth).unwrap());
            }
        }
    }

    #[test]
    fn depth_1_low_range_has_no_valid_sizes() {
        // 8..=12 all fail: the expansive path underflows
        assert!(valid_input_sizes(8, 12, 1).is_empty());
        assert!(valid_input_sizes(12, 8, 1).is_empty());
    }

    #[test]
    fn output_size_is_monotone_over_valid_sizes() {
        for depth in 1..=4 {
            let sizes = valid_input_sizes(1, 400, depth);
            for pair in sizes.windows(2) {
                let a = output_size(pair[0], depth).unwrap().output;
                let b = output_size(pair[1], depth).unwrap().output;
                assert!(a < b, "depth {depth}: {} -> {a}, {} -> {b}", pair[0], pair[1]);
            }
        }
    }

    #[test]
    fn conv_layer_count_is_23_at_depth_4() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net: UNet<f32> = UNet::build(&thin(4), &mut rng);
        assert_eq!(net.conv_layer_count(), 23);
    }

    #[test]
    fn conv_layer_count_is_8_at_depth_1() {
        // two contracting convs, two bottom convs, one up-convolution, two
        // expansive convs, one final 1x1
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net: UNet<f32> = UNet::build(&thin(1), &mut rng);
        assert_eq!(net.conv_layer_count(), 8);
    }

    #[test]
    fn channels_double_per_level_and_concat_doubles_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = thin(3);
        let net: UNet<f32> = UNet::build(&config, &mut rng);
        for (id, name, p) in net.params().iter() {
            let _ = id;
            if let Some(level) = name.strip_prefix("enc").and_then(|r| r.split('.').next()) {
                let level: usize = level.parse().unwrap();
                assert_eq!(p.k_out(), config.base_channels << level, "{name}");
            }
            if name.starts_with("dec") && name.ends_with("conv1") {
                assert_eq!(p.c_in(), 2 * p.k_out(), "{name}");
            }
            if name.ends_with("upconv") {
                assert_eq!(p.c_in(), 2 * p.k_out(), "{name}");
            }
        }
        assert_eq!(net.params().get(ParamId(0)).c_in(), 1);
    }

    #[test]
    fn bottom_channels_scale_with_base() {
        assert_eq!(thin(4).bottom_channels(), 32);
        let full = UNetConfig::default();
        assert_eq!(full.bottom_channels(), 1024);
    }

    #[test]
    fn build_is_reproducible_for_a_fixed_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(99);
        let mut b = ChaCha8Rng::seed_from_u64(99);
        let net_a: UNet<f32> = UNet::build(&thin(2), &mut a);
        let net_b: UNet<f32> = UNet::build(&thin(2), &mut b);
        for id in net_a.params().ids() {
            assert_eq!(net_a.params().get(id), net_b.params().get(id));
        }
    }

    #[test]
    fn forward_shape_follows_size_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = thin(2);
        let net: UNet<f32> = UNet::build(&config, &mut rng);
        for size in [44, 48, 56] {
            let out = net.forward(&Tensor4::zeros(1, 1, size, size)).unwrap();
            let want = output_size(size, 2).unwrap().output;
            assert_eq!(out.shape().h, want);
            assert_eq!(out.shape().w, want);
            assert_eq!(out.shape().c, 2);
        }
    }

    #[test]
    fn invalid_tile_rejected_before_compute() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net: UNet<f32> = UNet::build(&thin(2), &mut rng);
        assert!(net.forward(&Tensor4::zeros(1, 1, 45, 45)).is_err());
        assert!(net.forward(&Tensor4::zeros(1, 2, 44, 44)).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net: UNet<f64> = UNet::build(&thin(1), &mut rng);
        for id in net.params().ids() {
            let p = net.params_mut().get_mut(id);
            p.weights.data_mut().fill(0.0);
            p.bias.fill(0.0);
        }
        let out = net.forward(&Tensor4::filled(1, 1, 20, 20, 3.0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net: UNet<f32> = UNet::build(&thin(2), &mut rng);
        let data: Vec<f32> = (0..44 * 44).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = Tensor4::from_vec(1, 1, 44, 44, data).unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn train_forward_matches_inference_when_dropout_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net: UNet<f64> = UNet::build(&thin(2), &mut rng);
        let data: Vec<f64> = (0..44 * 44).map(|i| (i as f64 * 0.61).cos()).collect();
        let x = Tensor4::from_vec(1, 1, 44, 44, data).unwrap();
        let infer = net.forward(&x).unwrap();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let (tape, logits) = net.forward_train(&x, &mut drop_rng).unwrap();
        assert_eq!(tape.value(logits).data(), infer.data());
    }
}
