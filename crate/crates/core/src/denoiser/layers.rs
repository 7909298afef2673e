//! Hand-rolled layer primitives: 3x3 convolution (stride 1 or 2, zero
//! padding 1), nearest-neighbor 2x upsampling, SiLU, and the sinusoidal
//! timestep embedding. Forward and backward passes are written against raw
//! slices; every array in this crate is freshly allocated and therefore in
//! standard layout.

use ndarray::{Array1, Array2, Array3, Array4};

use crate::diffusion::{Scalar, Tensor};

/// 3x3 convolution parameters. Weight layout `(out, in, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn zeros(out_channels: usize, in_channels: usize, stride: usize) -> Self {
        Conv2d {
            weight: Array4::zeros((out_channels, in_channels, 3, 3)),
            bias: Array1::zeros(out_channels),
            stride,
        }
    }
}

/// Dense projection `y = W e + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(out_features: usize, in_features: usize) -> Self {
        Linear {
            weight: Array2::zeros((out_features, in_features)),
            bias: Array1::zeros(out_features),
        }
    }

    pub fn forward(&self, input: &Array1<F>) -> Array1<F> {
        self.weight.dot(input) + &self.bias
    }
}

/// Output spatial size of a padded 3x3 conv.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    (len + 2 - 3) / stride + 1
}

/// Valid output range `[lo, hi)` for one kernel tap so the padded input
/// index `o * stride + k - 1` stays inside `[0, len)`.
fn tap_bounds(len: usize, out_len: usize, stride: usize, k: usize) -> (usize, usize) {
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    let hi = if len >= k {
        ((len - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi)
}

pub fn conv2d_forward<F: Scalar>(input: &Tensor<F>, conv: &Conv2d<F>) -> Tensor<F> {
    let (cin, h, w) = input.dim();
    let (cout, cin_w, _, _) = conv.weight.dim();
    debug_assert_eq!(cin, cin_w, "input channels must match the kernel");
    let s = conv.stride;
    let (oh, ow) = (conv_out_len(h, s), conv_out_len(w, s));

    let mut out = Array3::zeros((cout, oh, ow));
    let input_s = input.as_slice().expect("standard layout");
    let weight_s = conv.weight.as_slice().expect("standard layout");
    let out_s = out.as_slice_mut().expect("standard layout");

    for o in 0..cout {
        let out_base = o * oh * ow;
        let b = conv.bias[o];
        out_s[out_base..out_base + oh * ow].fill(b);
        for i in 0..cin {
            let in_base = i * h * w;
            let w_base = (o * cin + i) * 9;
            for ky in 0..3 {
                let (oy_lo, oy_hi) = tap_bounds(h, oh, s, ky);
                for kx in 0..3 {
                    let (ox_lo, ox_hi) = tap_bounds(w, ow, s, kx);
                    let wv = weight_s[w_base + ky * 3 + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - 1;
                        let in_row = in_base + iy * w;
                        let out_row = out_base + oy * ow;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * s + kx - 1;
                            out_s[out_row + ox] = out_s[out_row + ox] + wv * input_s[in_row + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a conv w.r.t. its input, weight and bias.
pub struct ConvGrads<F> {
    pub input: Tensor<F>,
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

pub fn conv2d_backward<F: Scalar>(
    input: &Tensor<F>,
    conv: &Conv2d<F>,
    d_out: &Tensor<F>,
) -> ConvGrads<F> {
    let (cin, h, w) = input.dim();
    let (cout, _, _, _) = conv.weight.dim();
    let s = conv.stride;
    let (oh, ow) = (conv_out_len(h, s), conv_out_len(w, s));
    debug_assert_eq!(d_out.dim(), (cout, oh, ow));

    let mut d_input = Array3::zeros((cin, h, w));
    let mut d_weight = Array4::zeros(conv.weight.dim());
    let mut d_bias = Array1::zeros(cout);

    let input_s = input.as_slice().expect("standard layout");
    let weight_s = conv.weight.as_slice().expect("standard layout");
    let d_out_s = d_out.as_slice().expect("standard layout");
    let d_input_s = d_input.as_slice_mut().expect("standard layout");
    let d_weight_s = d_weight.as_slice_mut().expect("standard layout");

    for o in 0..cout {
        let out_base = o * oh * ow;
        let mut db = F::zero();
        for &g in &d_out_s[out_base..out_base + oh * ow] {
            db = db + g;
        }
        d_bias[o] = db;

        for i in 0..cin {
            let in_base = i * h * w;
            let w_base = (o * cin + i) * 9;
            for ky in 0..3 {
                let (oy_lo, oy_hi) = tap_bounds(h, oh, s, ky);
                for kx in 0..3 {
                    let (ox_lo, ox_hi) = tap_bounds(w, ow, s, kx);
                    let wv = weight_s[w_base + ky * 3 + kx];
                    let mut dw = F::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - 1;
                        let in_row = in_base + iy * w;
                        let out_row = out_base + oy * ow;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * s + kx - 1;
                            let g = d_out_s[out_row + ox];
                            dw = dw + g * input_s[in_row + ix];
                            d_input_s[in_row + ix] = d_input_s[in_row + ix] + wv * g;
                        }
                    }
                    d_weight_s[w_base + ky * 3 + kx] = dw;
                }
            }
        }
    }

    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<F: Scalar>(input: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = input.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ci, y, x)| input[[ci, y / 2, x / 2]])
}

/// Backward of [`upsample2`]: each input pixel collects its 2x2 fan-out.
pub fn upsample2_backward<F: Scalar>(d_out: &Tensor<F>) -> Tensor<F> {
    let (c, h2, w2) = d_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut d_input = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                d_input[[ci, y / 2, x / 2]] = d_input[[ci, y / 2, x / 2]] + d_out[[ci, y, x]];
            }
        }
    }
    d_input
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// SiLU activation `x * sigmoid(x)`; smooth, so finite-difference gradient
/// checks are well-behaved everywhere.
pub fn silu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.mapv(|v| v * sigmoid(v))
}

/// Elementwise `d silu(x)/dx` evaluated at the pre-activation.
pub fn silu_grad<F: Scalar>(pre: &Tensor<F>) -> Tensor<F> {
    pre.mapv(|v| {
        let s = sigmoid(v);
        s * (F::one() + v * (F::one() - s))
    })
}

/// Sinusoidal embedding of a (1-based) timestep. Even dimension: the first
/// half holds sines, the second half cosines, over a geometric frequency
/// ladder from 1 down to 1/10000.
pub fn timestep_embedding<F: Scalar>(t: usize, dim: usize) -> Array1<F> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dimension must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = 10_000f64.powf(-exponent);
        let angle = t as f64 * freq;
        out[i] = F::cast(angle.sin());
        out[half + i] = F::cast(angle.cos());
    }
    out
}
