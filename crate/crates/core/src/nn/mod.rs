//! Learnable blocks. Every block reads its parameters from a [`Binder`] under
//! a name prefix, so the same code both creates and reuses weights.

mod backbone;
mod disc;
mod faff;
mod gcam;
mod wpred;

pub use backbone::{decode_e, decode_q, decode_r, decoder, encode, to_image, DecoderKind};
pub use disc::discriminate;
pub use faff::{faff, faff_traced, spectral_decompose, spectral_reconstruct, FaffTrace, SpectralPair};
pub use gcam::gcam;
pub use wpred::{relative_position_index, weight_predict};

use sucode_tensor::Var;

use crate::error::Result;
use crate::params::{Binder, Init};

pub const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-6;

pub(crate) fn channels(x: &Var<'_>) -> usize {
    *x.shape().last().expect("feature map has a channel axis")
}

/// Convolution with `[k, k, cin, cout]` weights and a bias, default fan-in
/// initialization.
pub fn conv<'g>(b: &Binder<'g, '_>, name: &str, x: &Var<'g>, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Var<'g>> {
    let fan_in = k * k * channels(x);
    conv_with(b, name, x, cout, k, stride, pad, Init::FanIn(fan_in), Init::FanIn(fan_in))
}

#[allow(clippy::too_many_arguments)]
pub fn conv_with<'g>(
    b: &Binder<'g, '_>,
    name: &str,
    x: &Var<'g>,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    w_init: Init,
    b_init: Init,
) -> Result<Var<'g>> {
    let cin = channels(x);
    let w = b.param(&format!("{name}/w"), &[k, k, cin, cout], w_init)?;
    let bias = b.param(&format!("{name}/b"), &[cout], b_init)?;
    Ok(x.conv2d(&w, Some(&bias), stride, pad))
}

/// Largest group count in {8, 4, 2, 1} leaving at least two channels per group.
pub fn norm_groups(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|&g| c % g == 0 && c / g >= 2).unwrap_or(1)
}

pub fn group_norm<'g>(b: &Binder<'g, '_>, name: &str, x: &Var<'g>) -> Result<Var<'g>> {
    let c = channels(x);
    let gamma = b.param(&format!("{name}/gamma"), &[c], Init::Ones)?;
    let beta = b.param(&format!("{name}/beta"), &[c], Init::Zeros)?;
    Ok(x.group_norm(norm_groups(c), &gamma, &beta, NORM_EPS))
}

/// Normalization over the channel axis at each location.
pub fn layer_norm<'g>(b: &Binder<'g, '_>, name: &str, x: &Var<'g>) -> Result<Var<'g>> {
    let c = channels(x);
    let gamma = b.param(&format!("{name}/gamma"), &[c], Init::Ones)?;
    let beta = b.param(&format!("{name}/beta"), &[c], Init::Zeros)?;
    Ok(x.layer_norm(&gamma, &beta, NORM_EPS))
}

pub fn linear<'g>(b: &Binder<'g, '_>, name: &str, x: &Var<'g>, out: usize) -> Result<Var<'g>> {
    let cin = channels(x);
    let w = b.param(&format!("{name}/w"), &[cin, out], Init::FanIn(cin))?;
    let bias = b.param(&format!("{name}/b"), &[out], Init::FanIn(cin))?;
    Ok(x.linear(&w, Some(&bias)))
}

/// Pre-activation residual block: two norm/SiLU/3x3-conv stages plus a 1x1
/// shortcut when the width changes.
pub fn resblock<'g>(b: &Binder<'g, '_>, name: &str, x: &Var<'g>, cout: usize) -> Result<Var<'g>> {
    let h = group_norm(b, &format!("{name}/norm1"), x)?.silu();
    let h = conv(b, &format!("{name}/conv1"), &h, cout, 3, 1, 1)?;
    let h = group_norm(b, &format!("{name}/norm2"), &h)?.silu();
    let h = conv(b, &format!("{name}/conv2"), &h, cout, 3, 1, 1)?;
    let skip = if channels(x) == cout { *x } else { conv(b, &format!("{name}/skip"), x, cout, 1, 1, 0)? };
    Ok(skip.add(&h))
}

/// Single-head self-attention over all spatial locations, residual.
pub fn attn_block<'g>(b: &Binder<'g, '_>, name: &str, x: &Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let t = group_norm(b, &format!("{name}/norm"), x)?.reshape(&[n, h * w, c]);
    let q = linear(b, &format!("{name}/q"), &t, c)?;
    let k = linear(b, &format!("{name}/k"), &t, c)?;
    let v = linear(b, &format!("{name}/v"), &t, c)?;
    let att = q.matmul(&k.transpose_last()).mul_scalar(1.0 / (c as f64).sqrt()).softmax_last();
    let o = linear(b, &format!("{name}/proj"), &att.matmul(&v), c)?;
    Ok(x.add(&o.reshape(&[n, h, w, c])))
}

/// Channel-split gating: first half times second half.
pub fn simple_gate<'g>(x: &Var<'g>) -> Var<'g> {
    let c = channels(x);
    let axis = x.shape().len() - 1;
    x.slice(axis, 0, c / 2).mul(&x.slice(axis, c / 2, c / 2))
}
