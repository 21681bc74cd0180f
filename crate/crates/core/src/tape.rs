//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Forward calls on [`Tape`] evaluate the corresponding kernel from
//! [`crate::ops`], stash the result in a value arena and append a node.
//! [`Tape::backward`] replays the nodes in exact reverse execution order,
//! accumulating adjoints per value and gradients per parameter.

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Gradients, ParamId, ParamSet};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Probabilities below this are clamped before the log in the pixel loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a value stored on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Node<T: Scalar> {
    Conv {
        input: usize,
        param: ParamId,
        output: usize,
    },
    Upconv {
        input: usize,
        param: ParamId,
        output: usize,
    },
    Relu {
        input: usize,
        output: usize,
    },
    MaxPool {
        input: usize,
        output: usize,
        argmax: Vec<u8>,
    },
    CropConcat {
        skip: usize,
        up: usize,
        output: usize,
    },
    Dropout {
        input: usize,
        output: usize,
        mask: Vec<T>,
    },
    Softmax {
        input: usize,
        output: usize,
    },
    /// Scalar `sum(v * coeffs)`; the reduction used to build test losses.
    WeightedSum {
        input: usize,
        output: usize,
        coeffs: Vec<T>,
    },
    /// Pixel-weighted cross entropy against per-pixel class labels.
    /// `classes` holds 0-based channel indices, one per `(n, y, x)`.
    PixelLoss {
        probs: usize,
        output: usize,
        classes: Vec<u32>,
        weights: Vec<T>,
    },
}

/// Execution record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    values: Vec<Tensor4<T>>,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Registers an external input value (no gradient rule).
    pub fn input(&mut self, value: Tensor4<T>) -> ValueId {
        self.push_value(value)
    }

    pub fn value(&self, id: ValueId) -> &Tensor4<T> {
        &self.values[id.0]
    }

    /// The single scalar held by a 1x1x1x1 value.
    pub fn scalar(&self, id: ValueId) -> T {
        debug_assert_eq!(self.values[id.0].len(), 1);
        self.values[id.0].data()[0]
    }

    pub fn num_ops(&self) -> usize {
        self.nodes.len()
    }

    fn push_value(&mut self, value: Tensor4<T>) -> ValueId {
        self.values.push(value);
        ValueId(self.values.len() - 1)
    }

    pub fn conv2d(&mut self, input: ValueId, params: &ParamSet<T>, pid: ParamId) -> Result<ValueId> {
        let out = ops::conv2d_valid(self.value(input), params.get(pid))?;
        let output = self.push_value(out);
        self.nodes.push(Node::Conv {
            input: input.0,
            param: pid,
            output: output.0,
        });
        Ok(output)
    }

    pub fn conv1x1(&mut self, input: ValueId, params: &ParamSet<T>, pid: ParamId) -> Result<ValueId> {
        let (kh, kw) = params.get(pid).kernel();
        if (kh, kw) != (1, 1) {
            return Err(Error::BadKernel { op: "conv1x1", kh, kw });
        }
        self.conv2d(input, params, pid)
    }

    pub fn upconv2x2(&mut self, input: ValueId, params: &ParamSet<T>, pid: ParamId) -> Result<ValueId> {
        let out = ops::upconv2x2(self.value(input), params.get(pid))?;
        let output = self.push_value(out);
        self.nodes.push(Node::Upconv {
            input: input.0,
            param: pid,
            output: output.0,
        });
        Ok(output)
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let out = ops::relu(self.value(input));
        let output = self.push_value(out);
        self.nodes.push(Node::Relu {
            input: input.0,
            output: output.0,
        });
        output
    }

    pub fn maxpool2x2(&mut self, input: ValueId) -> Result<ValueId> {
        let (out, argmax) = ops::maxpool2x2(self.value(input))?;
        let output = self.push_value(out);
        self.nodes.push(Node::MaxPool {
            input: input.0,
            output: output.0,
            argmax,
        });
        Ok(output)
    }

    pub fn crop_concat(&mut self, skip: ValueId, up: ValueId) -> Result<ValueId> {
        let out = ops::crop_concat(self.value(skip), self.value(up))?;
        let output = self.push_value(out);
        self.nodes.push(Node::CropConcat {
            skip: skip.0,
            up: up.0,
            output: output.0,
        });
        Ok(output)
    }

    pub fn dropout<R: rand::Rng>(&mut self, input: ValueId, rate: f64, rng: &mut R) -> Result<ValueId> {
        let (out, mask) = ops::dropout(self.value(input), rate, ops::Mode::Train, rng)?;
        let output = self.push_value(out);
        self.nodes.push(Node::Dropout {
            input: input.0,
            output: output.0,
            mask: mask.expect("train mode produces a mask"),
        });
        Ok(output)
    }

    pub fn softmax_channels(&mut self, input: ValueId) -> ValueId {
        let out = ops::softmax_channels(self.value(input));
        let output = self.push_value(out);
        self.nodes.push(Node::Softmax {
            input: input.0,
            output: output.0,
        });
        output
    }

    /// Scalar loss `sum(v * coeffs)`.
    pub fn weighted_sum(&mut self, input: ValueId, coeffs: Vec<T>) -> Result<ValueId> {
        let v = self.value(input);
        if coeffs.len() != v.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                details: format!("{} coefficients for {} elements", coeffs.len(), v.len()),
            });
        }
        let total = v.data().iter().zip(&coeffs).fold(T::zero(), |a, (&x, &r)| a + x * r);
        let output = self.push_value(Tensor4::from_vec(1, 1, 1, 1, vec![total])?);
        self.nodes.push(Node::WeightedSum {
            input: input.0,
            output: output.0,
            coeffs,
        });
        Ok(output)
    }

    /// Scalar loss `sum(v)`.
    pub fn sum_all(&mut self, input: ValueId) -> ValueId {
        let ones = vec![T::one(); self.value(input).len()];
        self.weighted_sum(input, ones).expect("lengths match")
    }

    /// Pixel-weighted cross entropy `-sum_x w(x) * ln(p_label(x))`.
    ///
    /// `classes` are 0-based channel indices and `weights` per-pixel loss
    /// weights, both of length `n * h * w` in row-major `(n, y, x)` order.
    /// Probabilities below [`PROB_CLAMP`] are clamped before the log;
    /// the second return value counts how many pixels were clamped.
    pub fn pixel_loss(&mut self, probs: ValueId, classes: Vec<u32>, weights: Vec<T>) -> Result<(ValueId, u64)> {
        let p = self.value(probs);
        let s = p.shape();
        let pixels = s.n * s.h * s.w;
        if classes.len() != pixels || weights.len() != pixels {
            return Err(Error::ShapeMismatch {
                op: "pixel_loss",
                details: format!(
                    "{} labels / {} weights for {} pixels of {}",
                    classes.len(),
                    weights.len(),
                    pixels,
                    s
                ),
            });
        }
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= s.c) {
            return Err(Error::BadArgument(format!(
                "pixel_loss: class index {bad} out of range for {} channels",
                s.c
            )));
        }
        let clamp = T::from_f64(PROB_CLAMP);
        let hw = s.h * s.w;
        let mut total = T::zero();
        let mut saturated = 0u64;
        for n in 0..s.n {
            for px in 0..hw {
                let c = classes[n * hw + px] as usize;
                let mut pv = p.data()[(n * s.c + c) * hw + px];
                if pv < clamp {
                    pv = clamp;
                    saturated += 1;
                }
                total = total - weights[n * hw + px] * pv.ln();
            }
        }
        let output = self.push_value(Tensor4::from_vec(1, 1, 1, 1, vec![total])?);
        self.nodes.push(Node::PixelLoss {
            probs: probs.0,
            output: output.0,
            classes,
            weights,
        });
        Ok((output, saturated))
    }

    /// Runs the chain rule from `loss` back to every parameter.
    ///
    /// Visits nodes in exact reverse execution order. Every parameter in
    /// `params` receives a gradient buffer of its own shape; parameters the
    /// forward pass never touched keep zeros.
    pub fn backward(&self, loss: ValueId, params: &ParamSet<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let ls = self.values[loss.0].shape();
        if ls != Shape4::new(1, 1, 1, 1) {
            return Err(Error::NonScalarLoss(ls.to_string()));
        }

        let mut adjoints: Vec<Option<Tensor4<T>>> = vec![None; self.values.len()];
        adjoints[loss.0] = Some(Tensor4::filled(1, 1, 1, 1, T::one()));
        let mut grads = Gradients::zeros_like(params);

        for node in self.nodes.iter().rev() {
            match node {
                Node::Conv { input, param, output } => {
                    let Some(dout) = adjoints[*output].take() else { continue };
                    let (dinput, dw, db) = ops::conv2d_backward(&self.values[*input], params.get(*param), &dout);
                    accumulate(&mut adjoints[*input], dinput);
                    add_tensor(&mut grads.weights[param.0], &dw);
                    add_slice(&mut grads.biases[param.0], &db);
                }
                Node::Upconv { input, param, output } => {
                    let Some(dout) = adjoints[*output].take() else { continue };
                    let (dinput, dw, db) = ops::upconv2x2_backward(&self.values[*input], params.get(*param), &dout);
                    accumulate(&mut adjoints[*input], dinput);
                    add_tensor(&mut grads.weights[param.0], &dw);
                    add_slice(&mut grads.biases[param.0], &db);
                }
                Node::Relu { input, output } => {
                    let Some(dout) = adjoints[*output].take() else { continue };
                    let dinput = ops::relu_backward(&self.values[*input], &dout);
                    accumulate(&mut adjoints[*input], dinput);
                }
                Node::MaxPool { input, output, argmax } => {
                    let Some(dout) = adjoints[*output].take() else { continue };
                    let dinput = ops::maxpool2x2_backward(self.values[*input].shape(), argmax, &dout);
                    accumulate(&mut adjoints[*input], dinput);
                }
                Node::CropConcat { skip, up, output } => {
                    let Some(dout) = adjoints[*output].take() else { continue };
                    let (dskip, dup) =
                        ops::crop_concat_backward(self.values[*skip].shape(), self.values[*up].shape(), &dout);
                    accumulate(&mut adjoints[*skip], dskip);
                    accumulate(&mut adjoints[*up], dup);
                }
                Node::Dropout { input, output, mask } => {
                    let Some(dout) = adjoints[*output].take() else { continue };
                    let dinput = ops::dropout_backward(mask, &dout);
                    accumulate(&mut adjoints[*input], dinput);
                }
                Node::Softmax { input, output } => {
                    let Some(dout) = adjoints[*output].take() else { continue };
                    let probs = &self.values[*output];
                    let dinput = ops::softmax_channels_backward(probs, &dout);
                    accumulate(&mut adjoints[*input], dinput);
                }
                Node::WeightedSum { input, output, coeffs } => {
                    let Some(dout) = adjoints[*output].take() else { continue };
                    let seed = dout.data()[0];
                    let s = self.values[*input].shape();
                    let data = coeffs.iter().map(|&r| seed * r).collect();
                    let dinput = Tensor4::from_vec(s.n, s.c, s.h, s.w, data)?;
                    accumulate(&mut adjoints[*input], dinput);
                }
                Node::PixelLoss {
                    probs,
                    output,
                    classes,
                    weights,
                } => {
                    let Some(dout) = adjoints[*output].take() else { continue };
                    let seed = dout.data()[0];
                    let p = &self.values[*probs];
                    let s = p.shape();
                    let hw = s.h * s.w;
                    let clamp = T::from_f64(PROB_CLAMP);
                    let mut dprobs = Tensor4::zeros(s.n, s.c, s.h, s.w);
                    for n in 0..s.n {
                        for px in 0..hw {
                            let c = classes[n * hw + px] as usize;
                            let i = (n * s.c + c) * hw + px;
                            let pv = p.data()[i];
                            // ln(max(p, clamp)) is constant below the clamp,
                            // so saturated pixels contribute no gradient.
                            if pv >= clamp {
                                dprobs.data_mut()[i] = -seed * weights[n * hw + px] / pv;
                            }
                        }
                    }
                    accumulate(&mut adjoints[*probs], dprobs);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor4<T>>, delta: Tensor4<T>) {
    match slot {
        None => *slot = Some(delta),
        Some(existing) => add_tensor(existing, &delta),
    }
}

fn add_tensor<T: Scalar>(dst: &mut Tensor4<T>, src: &Tensor4<T>) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d = *d + s;
    }
}

fn add_slice<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ConvParams;

    #[test]
    fn backward_on_empty_tape_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor4::filled(1, 1, 1, 1, 1.0));
        let params = ParamSet::new();
        assert!(matches!(tape.backward(x, &params), Err(Error::EmptyTape)));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor4::filled(1, 1, 2, 2, 1.0));
        let y = tape.relu(x);
        let params = ParamSet::new();
        assert!(matches!(tape.backward(y, &params), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn sum_of_relu_on_positive_input_gives_unit_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor4::filled(1, 1, 2, 3, 2.5));
        let r = tape.relu(x);
        let loss = tape.sum_all(r);
        let params = ParamSet::new();
        tape.backward(loss, &params).unwrap();
        // gradient w.r.t. the input is not exposed via Gradients; check via a
        // conv parameter instead in the test below. Here we only check the
        // pass runs and the loss value is the plain sum.
        assert_eq!(tape.scalar(loss), 2.5 * 6.0);
    }

    #[test]
    fn conv_parameter_gradients_flow_through_sum() {
        // loss = sum(conv(x)) with a ones kernel: dW[dy,dx] = sum of input
        // windows, dB = number of output pixels.
        let mut params = ParamSet::new();
        let pid = params.push(
            "conv",
            ConvParams::new(Tensor4::filled(1, 1, 3, 3, 1.0f64), vec![0.0]).unwrap(),
        );
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (1..=16).map(f64::from).collect();
        let x = tape.input(Tensor4::from_vec(1, 1, 4, 4, data).unwrap());
        let y = tape.conv2d(x, &params, pid).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss, &params).unwrap();
        assert_eq!(
            grads.weights[0].data(),
            &[14.0, 18.0, 22.0, 30.0, 34.0, 38.0, 46.0, 50.0, 54.0]
        );
        assert_eq!(grads.biases[0], vec![4.0]);
    }

    #[test]
    fn untouched_parameters_receive_zero_gradients() {
        let mut params = ParamSet::new();
        let used = params.push(
            "used",
            ConvParams::new(Tensor4::filled(1, 1, 1, 1, 2.0f64), vec![0.0]).unwrap(),
        );
        let unused = params.push(
            "unused",
            ConvParams::new(Tensor4::filled(3, 2, 3, 3, 1.0f64), vec![0.0; 3]).unwrap(),
        );
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor4::filled(1, 1, 2, 2, 1.0));
        let y = tape.conv2d(x, &params, used).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss, &params).unwrap();
        assert!(grads.weights[unused.0].data().iter().all(|&g| g == 0.0));
        assert_eq!(grads.weights[unused.0].shape(), params.get(unused).weights.shape());
        assert!(grads.weights[used.0].data()[0] > 0.0);
    }

    #[test]
    fn pixel_loss_counts_saturated_pixels() {
        let mut tape = Tape::<f64>::new();
        let probs = tape.input(Tensor4::from_vec(1, 2, 1, 2, vec![1e-15, 0.5, 1.0 - 1e-15, 0.5]).unwrap());
        let (loss, saturated) = tape.pixel_loss(probs, vec![0, 0], vec![1.0, 1.0]).unwrap();
        assert_eq!(saturated, 1);
        assert!(tape.scalar(loss).is_finite());
    }

    #[test]
    fn pixel_loss_matches_hand_computation() {
        let mut tape = Tape::<f64>::new();
        // two pixels, K=2; labels pick p=0.25 and p=0.8; weights 2 and 3
        let probs = tape.input(Tensor4::from_vec(1, 2, 1, 2, vec![0.25, 0.2, 0.75, 0.8]).unwrap());
        let (loss, saturated) = tape.pixel_loss(probs, vec![0, 1], vec![2.0, 3.0]).unwrap();
        let want = -(2.0 * 0.25f64.ln() + 3.0 * 0.8f64.ln());
        assert!((tape.scalar(loss) - want).abs() < 1e-12);
        assert_eq!(saturated, 0);
    }
}
