//! Forward kernels and their analytic gradients.
//!
//! Every operation here is a pure function over immutable inputs. The
//! accumulation order inside each output element is fixed (channel, then
//! kernel row, then kernel column), so results are bit-identical no matter
//! how the outer loops are parallelized: rayon only ever splits work across
//! output planes, never across the reduction of a single element.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::ConvParams;
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Execution mode for layers that behave differently during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

// ---------------------------------------------------------------------------
// conv2d (valid)
// ---------------------------------------------------------------------------

/// Output shape of a valid convolution, after validating the operand shapes.
pub fn conv2d_output_shape(input: Shape4, weights: Shape4) -> Result<Shape4> {
    if input.c != weights.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d_valid",
            details: format!("input {input} has {} channels, kernel {weights} expects {}", input.c, weights.c),
        });
    }
    if input.h < weights.h || input.w < weights.w {
        return Err(Error::ShapeMismatch {
            op: "conv2d_valid",
            details: format!("input {input} smaller than kernel {weights}"),
        });
    }
    Ok(Shape4::new(input.n, weights.n, input.h - weights.h + 1, input.w - weights.w + 1))
}

/// Valid (unpadded) convolution with stride 1.
///
/// `out[n,k,y,x] = bias[k] + sum over (c,dy,dx) of in[n,c,y+dy,x+dx] * w[k,c,dy,dx]`
pub fn conv2d_valid<T: Scalar>(input: &Tensor4<T>, params: &ConvParams<T>) -> Result<Tensor4<T>> {
    let ish = input.shape();
    let wsh = params.weights.shape();
    let osh = conv2d_output_shape(ish, wsh)?;
    let (oh, ow) = (osh.h, osh.w);
    let (kh, kw) = (wsh.h, wsh.w);
    let mut out = Tensor4::zeros(osh.n, osh.c, oh, ow);

    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane_idx, out_plane)| {
            let n = plane_idx / wsh.n;
            let k = plane_idx % wsh.n;
            out_plane.fill(params.bias[k]);
            for c in 0..ish.c {
                let in_plane = input.plane(n, c);
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wv = params.weights.at(k, c, dy, dx);
                        for y in 0..oh {
                            let in_row = &in_plane[(y + dy) * ish.w + dx..(y + dy) * ish.w + dx + ow];
                            let out_row = &mut out_plane[y * ow..(y + 1) * ow];
                            for (o, &i) in out_row.iter_mut().zip(in_row) {
                                *o = *o + wv * i;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d_valid`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    params: &ConvParams<T>,
    dout: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Vec<T>) {
    let ish = input.shape();
    let wsh = params.weights.shape();
    let osh = dout.shape();
    let (oh, ow) = (osh.h, osh.w);
    let (kh, kw) = (wsh.h, wsh.w);

    let mut dinput = Tensor4::zeros(ish.n, ish.c, ish.h, ish.w);
    dinput
        .data_mut()
        .par_chunks_mut(ish.h * ish.w)
        .enumerate()
        .for_each(|(plane_idx, din_plane)| {
            let n = plane_idx / ish.c;
            let c = plane_idx % ish.c;
            for k in 0..wsh.n {
                let dout_plane = dout.plane(n, k);
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wv = params.weights.at(k, c, dy, dx);
                        for y in 0..oh {
                            let din_row = &mut din_plane[(y + dy) * ish.w + dx..(y + dy) * ish.w + dx + ow];
                            let dout_row = &dout_plane[y * ow..(y + 1) * ow];
                            for (di, &g) in din_row.iter_mut().zip(dout_row) {
                                *di = *di + wv * g;
                            }
                        }
                    }
                }
            }
        });

    let mut dweights = Tensor4::zeros(wsh.n, wsh.c, wsh.h, wsh.w);
    let mut dbias = vec![T::zero(); wsh.n];
    dweights
        .data_mut()
        .par_chunks_mut(wsh.c * kh * kw)
        .zip(dbias.par_iter_mut())
        .enumerate()
        .for_each(|(k, (dw_k, db_k))| {
            for n in 0..ish.n {
                let dout_plane = dout.plane(n, k);
                for c in 0..ish.c {
                    let in_plane = input.plane(n, c);
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let mut acc = T::zero();
                            for y in 0..oh {
                                let in_row = &in_plane[(y + dy) * ish.w + dx..(y + dy) * ish.w + dx + ow];
                                let dout_row = &dout_plane[y * ow..(y + 1) * ow];
                                for (&i, &g) in in_row.iter().zip(dout_row) {
                                    acc = acc + i * g;
                                }
                            }
                            let idx = (c * kh + dy) * kw + dx;
                            dw_k[idx] = dw_k[idx] + acc;
                        }
                    }
                }
                *db_k = *db_k + dout_plane.iter().fold(T::zero(), |a, &g| a + g);
            }
        });

    (dinput, dweights, dbias)
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

/// Elementwise `max(0, v)`.
pub fn relu<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU gradient: passes where the forward input was strictly positive.
/// The subgradient at exactly zero is taken as zero.
pub fn relu_backward<T: Scalar>(input: &Tensor4<T>, dout: &Tensor4<T>) -> Tensor4<T> {
    let data = input
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    let s = input.shape();
    Tensor4::from_vec(s.n, s.c, s.h, s.w, data).expect("same shape")
}

// ---------------------------------------------------------------------------
// maxpool 2x2, stride 2
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2. Requires even spatial extents.
///
/// Returns the pooled tensor plus one argmax entry per output element: the
/// block-local index in row-major scan order `(0,0),(0,1),(1,0),(1,1)`.
/// Ties keep the first maximal element, so gradients are deterministic.
pub fn maxpool2x2<T: Scalar>(input: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u8>)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::OddPoolInput { h: s.h, w: s.w });
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Tensor4::zeros(s.n, s.c, oh, ow);
    let mut argmax = vec![0u8; out.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let in_plane = input.plane(n, c);
            let base = (n * s.c + c) * oh * ow;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = in_plane[(2 * y) * s.w + 2 * x];
                    let mut best_at = 0u8;
                    for (local, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = in_plane[(2 * y + dy) * s.w + 2 * x + dx];
                        if v > best {
                            best = v;
                            best_at = local as u8;
                        }
                    }
                    out.set(n, c, y, x, best);
                    argmax[base + y * ow + x] = best_at;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient entirely to the recorded maximal element.
pub fn maxpool2x2_backward<T: Scalar>(
    input_shape: Shape4,
    argmax: &[u8],
    dout: &Tensor4<T>,
) -> Tensor4<T> {
    let s = input_shape;
    let osh = dout.shape();
    let mut dinput = Tensor4::zeros(s.n, s.c, s.h, s.w);
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * osh.h * osh.w;
            for y in 0..osh.h {
                for x in 0..osh.w {
                    let local = argmax[base + y * osh.w + x] as usize;
                    let (dy, dx) = (local / 2, local % 2);
                    let i = dinput.index(n, c, 2 * y + dy, 2 * x + dx);
                    dinput.data_mut()[i] = dout.at(n, c, y, x);
                }
            }
        }
    }
    dinput
}

// ---------------------------------------------------------------------------
// up-convolution (2x2 transposed convolution, stride 2)
// ---------------------------------------------------------------------------

/// Output shape of the 2x2 stride-2 transposed convolution.
pub fn upconv2x2_output_shape(input: Shape4, weights: Shape4) -> Result<Shape4> {
    if weights.h != 2 || weights.w != 2 {
        return Err(Error::BadKernel {
            op: "upconv2x2",
            kh: weights.h,
            kw: weights.w,
        });
    }
    if input.c != weights.c {
        return Err(Error::ShapeMismatch {
            op: "upconv2x2",
            details: format!("input {input} has {} channels, kernel {weights} expects {}", input.c, weights.c),
        });
    }
    Ok(Shape4::new(input.n, weights.n, 2 * input.h, 2 * input.w))
}

/// Transposed convolution with a 2x2 kernel and stride 2: every input pixel
/// scatters kernel-weighted contributions into its own 2x2 output block, so
/// the output doubles the spatial size.
pub fn upconv2x2<T: Scalar>(input: &Tensor4<T>, params: &ConvParams<T>) -> Result<Tensor4<T>> {
    let ish = input.shape();
    let wsh = params.weights.shape();
    let osh = upconv2x2_output_shape(ish, wsh)?;
    let mut out = Tensor4::zeros(osh.n, osh.c, osh.h, osh.w);
    out.data_mut()
        .par_chunks_mut(osh.h * osh.w)
        .enumerate()
        .for_each(|(plane_idx, out_plane)| {
            let n = plane_idx / wsh.n;
            let k = plane_idx % wsh.n;
            out_plane.fill(params.bias[k]);
            for c in 0..ish.c {
                let in_plane = input.plane(n, c);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let wv = params.weights.at(k, c, dy, dx);
                        for y in 0..ish.h {
                            for x in 0..ish.w {
                                let o = (2 * y + dy) * osh.w + 2 * x + dx;
                                out_plane[o] = out_plane[o] + wv * in_plane[y * ish.w + x];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`upconv2x2`] with respect to input, weights and bias.
pub fn upconv2x2_backward<T: Scalar>(
    input: &Tensor4<T>,
    params: &ConvParams<T>,
    dout: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Vec<T>) {
    let ish = input.shape();
    let wsh = params.weights.shape();
    let osh = dout.shape();

    let mut dinput = Tensor4::zeros(ish.n, ish.c, ish.h, ish.w);
    dinput
        .data_mut()
        .par_chunks_mut(ish.h * ish.w)
        .enumerate()
        .for_each(|(plane_idx, din_plane)| {
            let n = plane_idx / ish.c;
            let c = plane_idx % ish.c;
            for k in 0..wsh.n {
                let dout_plane = dout.plane(n, k);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let wv = params.weights.at(k, c, dy, dx);
                        for y in 0..ish.h {
                            for x in 0..ish.w {
                                let i = y * ish.w + x;
                                din_plane[i] = din_plane[i] + wv * dout_plane[(2 * y + dy) * osh.w + 2 * x + dx];
                            }
                        }
                    }
                }
            }
        });

    let mut dweights = Tensor4::zeros(wsh.n, wsh.c, 2, 2);
    let mut dbias = vec![T::zero(); wsh.n];
    dweights
        .data_mut()
        .par_chunks_mut(wsh.c * 4)
        .zip(dbias.par_iter_mut())
        .enumerate()
        .for_each(|(k, (dw_k, db_k))| {
            for n in 0..ish.n {
                let dout_plane = dout.plane(n, k);
                for c in 0..ish.c {
                    let in_plane = input.plane(n, c);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let mut acc = T::zero();
                            for y in 0..ish.h {
                                for x in 0..ish.w {
                                    acc = acc + in_plane[y * ish.w + x] * dout_plane[(2 * y + dy) * osh.w + 2 * x + dx];
                                }
                            }
                            let idx = c * 4 + dy * 2 + dx;
                            dw_k[idx] = dw_k[idx] + acc;
                        }
                    }
                }
                *db_k = *db_k + dout_plane.iter().fold(T::zero(), |a, &g| a + g);
            }
        });

    (dinput, dweights, dbias)
}

// ---------------------------------------------------------------------------
// crop + concatenate (skip connections)
// ---------------------------------------------------------------------------

/// Center-crop offsets `(top, left)` for concatenating `skip` onto `up`.
pub fn crop_offsets(skip: Shape4, up: Shape4) -> Result<(usize, usize)> {
    if skip.n != up.n {
        return Err(Error::ShapeMismatch {
            op: "crop_concat",
            details: format!("batch mismatch: skip {skip} vs up {up}"),
        });
    }
    if skip.h < up.h || skip.w < up.w {
        return Err(Error::ShapeMismatch {
            op: "crop_concat",
            details: format!("skip {skip} smaller than up {up}"),
        });
    }
    if (skip.h - up.h) % 2 != 0 || (skip.w - up.w) % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "crop_concat",
            details: format!("size difference between skip {skip} and up {up} is odd; cannot center-crop"),
        });
    }
    Ok(((skip.h - up.h) / 2, (skip.w - up.w) / 2))
}

/// Center-crops `skip` to the spatial size of `up`, then concatenates along
/// the channel axis with the skip channels first.
pub fn crop_concat<T: Scalar>(skip: &Tensor4<T>, up: &Tensor4<T>) -> Result<Tensor4<T>> {
    let ssh = skip.shape();
    let ush = up.shape();
    let (oy, ox) = crop_offsets(ssh, ush)?;
    let mut out = Tensor4::zeros(ush.n, ssh.c + ush.c, ush.h, ush.w);
    for n in 0..ush.n {
        for c in 0..ssh.c {
            let src = skip.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..ush.h {
                let s = &src[(y + oy) * ssh.w + ox..(y + oy) * ssh.w + ox + ush.w];
                dst[y * ush.w..(y + 1) * ush.w].copy_from_slice(s);
            }
        }
        for c in 0..ush.c {
            out.plane_mut(n, ssh.c + c).copy_from_slice(up.plane(n, c));
        }
    }
    Ok(out)
}

/// Splits the concat gradient back onto both inputs; skip pixels that were
/// cropped away receive zero.
pub fn crop_concat_backward<T: Scalar>(
    skip_shape: Shape4,
    up_shape: Shape4,
    dout: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let (oy, ox) = crop_offsets(skip_shape, up_shape).expect("shapes validated in forward");
    let mut dskip = Tensor4::zeros(skip_shape.n, skip_shape.c, skip_shape.h, skip_shape.w);
    let mut dup = Tensor4::zeros(up_shape.n, up_shape.c, up_shape.h, up_shape.w);
    for n in 0..up_shape.n {
        for c in 0..skip_shape.c {
            let src = dout.plane(n, c);
            let dst = dskip.plane_mut(n, c);
            for y in 0..up_shape.h {
                dst[(y + oy) * skip_shape.w + ox..(y + oy) * skip_shape.w + ox + up_shape.w]
                    .copy_from_slice(&src[y * up_shape.w..(y + 1) * up_shape.w]);
            }
        }
        for c in 0..up_shape.c {
            dup.plane_mut(n, c).copy_from_slice(dout.plane(n, skip_shape.c + c));
        }
    }
    (dskip, dup)
}

// ---------------------------------------------------------------------------
// 1x1 convolution
// ---------------------------------------------------------------------------

/// Per-pixel linear map across channels; spatial size is unchanged.
pub fn conv1x1<T: Scalar>(input: &Tensor4<T>, params: &ConvParams<T>) -> Result<Tensor4<T>> {
    let (kh, kw) = params.kernel();
    if (kh, kw) != (1, 1) {
        return Err(Error::BadKernel { op: "conv1x1", kh, kw });
    }
    conv2d_valid(input, params)
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

/// Inverted dropout.
///
/// In train mode each element is zeroed independently with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`, which keeps the
/// expectation unchanged; inference is then the identity. Returns the
/// per-element multiplier mask in train mode so the gradient can reuse it.
pub fn dropout<T: Scalar, R: rand::Rng>(
    input: &Tensor4<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor4<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::BadArgument(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    match mode {
        Mode::Infer => Ok((input.clone(), None)),
        Mode::Train => {
            let scale = T::from_f64(1.0 / (1.0 - rate));
            let mask: Vec<T> = (0..input.len())
                .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { scale })
                .collect();
            let data = input.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            let s = input.shape();
            Ok((Tensor4::from_vec(s.n, s.c, s.h, s.w, data)?, Some(mask)))
        }
    }
}

pub fn dropout_backward<T: Scalar>(mask: &[T], dout: &Tensor4<T>) -> Tensor4<T> {
    let s = dout.shape();
    let data = dout.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
    Tensor4::from_vec(s.n, s.c, s.h, s.w, data).expect("same shape")
}

// ---------------------------------------------------------------------------
// softmax over channels
// ---------------------------------------------------------------------------

/// Pixel-wise softmax across the channel axis, stabilized by subtracting the
/// per-pixel channel maximum before exponentiation.
pub fn softmax_channels<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    let s = input.shape();
    let mut out = Tensor4::zeros(s.n, s.c, s.h, s.w);
    let hw = s.h * s.w;
    for n in 0..s.n {
        for p in 0..hw {
            let mut max = input.data()[n * s.c * hw + p];
            for c in 1..s.c {
                let v = input.data()[(n * s.c + c) * hw + p];
                if v > max {
                    max = v;
                }
            }
            let mut total = T::zero();
            for c in 0..s.c {
                let e = (input.data()[(n * s.c + c) * hw + p] - max).exp();
                out.data_mut()[(n * s.c + c) * hw + p] = e;
                total = total + e;
            }
            for c in 0..s.c {
                let i = (n * s.c + c) * hw + p;
                out.data_mut()[i] = out.data()[i] / total;
            }
        }
    }
    out
}

/// Softmax gradient: `dA_k = p_k * (dP_k - sum_j dP_j * p_j)` per pixel.
pub fn softmax_channels_backward<T: Scalar>(probs: &Tensor4<T>, dout: &Tensor4<T>) -> Tensor4<T> {
    let s = probs.shape();
    let hw = s.h * s.w;
    let mut dinput = Tensor4::zeros(s.n, s.c, s.h, s.w);
    for n in 0..s.n {
        for p in 0..hw {
            let mut dot = T::zero();
            for c in 0..s.c {
                let i = (n * s.c + c) * hw + p;
                dot = dot + dout.data()[i] * probs.data()[i];
            }
            for c in 0..s.c {
                let i = (n * s.c + c) * hw + p;
                dinput.data_mut()[i] = probs.data()[i] * (dout.data()[i] - dot);
            }
        }
    }
    dinput
}
