//! Spectral magnitude/phase split and the frequency-aware fusion block.

use sucode_tensor::{half_width, irfft2, irfft2_tensor, rfft2_tensor, concat, Tensor, Var};

use super::{channels, conv, conv_with, layer_norm, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::params::{Binder, Init};

/// One-sided spectrum in polar form, `[..., h, w/2+1, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralPair {
    pub magnitude: Tensor,
    pub phase: Tensor,
}

fn as_batch(f: &Tensor) -> Result<Tensor> {
    match f.rank() {
        3 => {
            let s = f.shape();
            Ok(f.clone().reshape(&[1, s[0], s[1], s[2]]))
        }
        4 => Ok(f.clone()),
        _ => Err(Error::Shape(format!("feature map must be [h, w, c] or [B, h, w, c], got {:?}", f.shape()))),
    }
}

/// Real 2-D transform over the spatial axes, split into magnitude and phase.
pub fn spectral_decompose(f: &Tensor) -> Result<SpectralPair> {
    let (re, im) = rfft2_tensor(&as_batch(f)?);
    let mut magnitude = re.zip_map(&im, f64::hypot);
    let mut phase = im.zip_map(&re, f64::atan2);
    if f.rank() == 3 {
        let s = magnitude.shape()[1..].to_vec();
        magnitude = magnitude.reshape(&s);
        phase = phase.reshape(&s);
    }
    Ok(SpectralPair { magnitude, phase })
}

/// Inverse of [`spectral_decompose`] to spatial size `(h, w)`.
pub fn spectral_reconstruct(s: &SpectralPair, target: (usize, usize)) -> Result<Tensor> {
    let (h, w) = target;
    if s.magnitude.shape() != s.phase.shape() {
        return Err(Error::Shape("magnitude and phase shapes differ".into()));
    }
    let a = as_batch(&s.magnitude)?;
    let p = as_batch(&s.phase)?;
    if a.dim(1) != h || a.dim(2) != half_width(w) {
        return Err(Error::Shape(format!(
            "spectrum {}x{} cannot produce a {h}x{w} map",
            a.dim(1),
            a.dim(2)
        )));
    }
    let re = a.zip_map(&p, |m, ph| m * ph.cos());
    let im = a.zip_map(&p, |m, ph| m * ph.sin());
    let out = irfft2_tensor(&re, &im, h, w);
    Ok(if s.magnitude.rank() == 3 { out.reshape(&[h, w, a.dim(3)]) } else { out })
}

/// Intermediate tensors of one fusion block.
pub struct FaffTrace<'g> {
    pub f_in: Var<'g>,
    pub magnitude: Var<'g>,
    /// Phase from the forward transform of `f_in`.
    pub phase: Var<'g>,
    /// Phase handed to the inverse transform.
    pub phase_reconstruct: Var<'g>,
    pub f_freq: Var<'g>,
    pub f_fus: Var<'g>,
    pub out: Var<'g>,
}

/// Fuses a raw-domain feature `f_r` into the enhancement feature `f_e`.
pub fn faff<'g>(b: &Binder<'g, '_>, name: &str, f_r: &Var<'g>, f_e: &Var<'g>) -> Result<Var<'g>> {
    Ok(faff_traced(b, name, f_r, f_e, false)?.out)
}

/// [`faff`] exposing its intermediates; `identity_magnitude` bypasses the
/// learned magnitude mapping.
pub fn faff_traced<'g>(b: &Binder<'g, '_>, name: &str, f_r: &Var<'g>, f_e: &Var<'g>, identity_magnitude: bool) -> Result<FaffTrace<'g>> {
    let s = f_e.shape();
    if f_r.shape() != s || s.len() != 4 {
        return Err(Error::Shape(format!("fusion inputs differ: {:?} vs {s:?}", f_r.shape())));
    }
    let (h, w, c) = (s[1], s[2], channels(f_e));
    let fused = conv(b, &format!("{name}/fuse"), &concat(&[*f_r, *f_e], 3), c, 3, 1, 1)?;
    let f_in = layer_norm(b, &format!("{name}/norm"), &fused)?;
    let (re, im) = f_in.rfft2();
    let magnitude = Var::complex_abs(&re, &im);
    let phase = Var::complex_angle(&re, &im);
    let mapped = if identity_magnitude {
        magnitude
    } else {
        let a = conv(b, &format!("{name}/mag1"), &magnitude, c, 1, 1, 0)?.leaky_relu(LEAKY_SLOPE);
        conv(b, &format!("{name}/mag2"), &a, c, 1, 1, 0)?
    };
    let phase_reconstruct = phase;
    let f_freq = irfft2(&mapped.mul(&phase_reconstruct.cos()), &mapped.mul(&phase_reconstruct.sin()), h, w);
    let gamma = b.param(&format!("{name}/gamma"), &[c], Init::Zeros)?;
    let f_fus = f_in.add(&gamma.mul(&f_in.mul(&f_freq)));
    let branch = |tag: &str, bias: Init| -> Result<Var<'g>> {
        let t = conv(b, &format!("{name}/{tag}1"), &f_fus, c, 3, 1, 1)?.leaky_relu(LEAKY_SLOPE);
        conv_with(b, &format!("{name}/{tag}2"), &t, c, 3, 1, 1, Init::Zeros, bias)
    };
    let scale = branch("scale", Init::Ones)?;
    let shift = branch("shift", Init::Zeros)?;
    let out = scale.mul(f_e).add(&shift);
    Ok(FaffTrace { f_in, magnitude, phase, phase_reconstruct, f_freq, f_fus, out })
}
