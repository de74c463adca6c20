//! Multi-scale encoder and the three decoder variants.
//!
//! Level `i` runs at `1/2^i` of the input resolution with `channels[i]`
//! features. Images enter the encoder in `[0, 1]` and are mapped to `[-1, 1]`;
//! decoders produce `[-1, 1]`-scaled outputs that [`to_image`] maps back.

use sucode_tensor::Var;

use super::{attn_block, conv, conv_with, gcam, group_norm, resblock};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Binder, Init};

/// `x ↦ (x + 1) / 2`.
pub fn to_image<'g>(y: &Var<'g>) -> Var<'g> {
    y.mul_scalar(0.5).add_scalar(0.5)
}

fn bottleneck<'g>(b: &Binder<'g, '_>, prefix: &str, h: &Var<'g>) -> Result<Var<'g>> {
    let c = super::channels(h);
    let h = resblock(b, &format!("{prefix}/mid/res0"), h, c)?;
    let h = attn_block(b, &format!("{prefix}/mid/attn"), &h)?;
    resblock(b, &format!("{prefix}/mid/res1"), &h, c)
}

/// `[B, H, W, 3] -> [B, H/f, W/f, n_z]`.
pub fn encode<'g>(b: &Binder<'g, '_>, prefix: &str, x: &Var<'g>, m: &ModelConfig) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::Shape(format!("encoder expects [B, H, W, 3], got {s:?}")));
    }
    let f = m.downsample_factor;
    if s[1] % f != 0 || s[2] % f != 0 {
        return Err(Error::Shape(format!("input {}x{} not divisible by downsample factor {f}", s[1], s[2])));
    }
    let levels = m.levels();
    let mut h = conv(b, &format!("{prefix}/conv_in"), &x.mul_scalar(2.0).add_scalar(-1.0), m.channels[0], 3, 1, 1)?;
    for i in 0..levels {
        for blk in 0..m.res_blocks {
            h = resblock(b, &format!("{prefix}/down/{i}/res/{blk}"), &h, m.channels[i])?;
        }
        if i + 1 < levels {
            h = conv(b, &format!("{prefix}/down/{i}/downsample"), &h, m.channels[i], 3, 2, 1)?;
        }
    }
    let h = bottleneck(b, prefix, &h)?;
    let h = group_norm(b, &format!("{prefix}/norm_out"), &h)?.silu();
    conv(b, &format!("{prefix}/conv_out"), &h, m.embed_dim, 3, 1, 1)
}

/// Which decoder to run; decoders with channel attention own one block per
/// level, numbered from `gcam_base`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Plain,
    Gated { gcam_base: usize },
}

/// Shared decoder body. Before each upsampling step, the feature at tap index
/// `t` (tap `t` has `2^t` times the latent resolution) is recorded and then
/// passed through `at_tap`, whose result continues down the decoder.
pub fn decoder<'g, F>(
    b: &Binder<'g, '_>,
    prefix: &str,
    kind: DecoderKind,
    z: &Var<'g>,
    m: &ModelConfig,
    mut at_tap: F,
) -> Result<(Var<'g>, Vec<Var<'g>>)>
where
    F: FnMut(usize, Var<'g>) -> Result<Var<'g>>,
{
    let s = z.shape();
    if s.len() != 4 || s[3] != m.embed_dim {
        return Err(Error::Shape(format!("decoder expects [B, h, w, {}], got {s:?}", m.embed_dim)));
    }
    let levels = m.levels();
    let mut h = conv(b, &format!("{prefix}/conv_in"), z, m.channels[levels - 1], 3, 1, 1)?;
    h = bottleneck(b, prefix, &h)?;
    let mut taps = Vec::with_capacity(levels - 1);
    for i in (0..levels).rev() {
        for blk in 0..m.res_blocks {
            h = resblock(b, &format!("{prefix}/up/{i}/res/{blk}"), &h, m.channels[i])?;
        }
        if let DecoderKind::Gated { gcam_base } = kind {
            h = gcam(b, &format!("gcam/{}", gcam_base + levels - 1 - i), &h)?;
        }
        if i > 0 {
            let t = levels - 1 - i;
            taps.push(h);
            h = at_tap(t, h)?;
            h = conv(b, &format!("{prefix}/up/{i}/upsample"), &h.upsample_nearest(2), m.channels[i], 3, 1, 1)?;
        }
    }
    let h = group_norm(b, &format!("{prefix}/norm_out"), &h)?.silu();
    let c = m.channels[0];
    let out = conv_with(b, &format!("{prefix}/conv_out"), &h, 3, 3, 1, 1, Init::FanIn(9 * c), Init::Zeros)?;
    Ok((to_image(&out), taps))
}

/// Stage-one decoder: latent to image in `[0, 1]` (unclamped).
pub fn decode_q<'g>(b: &Binder<'g, '_>, z: &Var<'g>, m: &ModelConfig) -> Result<Var<'g>> {
    Ok(decoder(b, "dec_q", DecoderKind::Plain, z, m, |_, h| Ok(h))?.0)
}

/// Raw-domain decoder with channel attention; returns the image and the
/// per-scale taps.
pub fn decode_r<'g>(b: &Binder<'g, '_>, z: &Var<'g>, m: &ModelConfig) -> Result<(Var<'g>, Vec<Var<'g>>)> {
    decoder(b, "dec_r", DecoderKind::Gated { gcam_base: 0 }, z, m, |_, h| Ok(h))
}

/// Scales that carry a fusion block.
pub(crate) fn fused_scales(m: &ModelConfig) -> Vec<usize> {
    let taps = m.levels() - 1;
    if m.faff_every_scale {
        (0..taps).collect()
    } else {
        vec![taps - 1]
    }
}

/// Enhancement decoder: at each fused scale the enhancement feature is
/// replaced by `faff(raw_tap, feature)` before upsampling.
pub fn decode_e<'g>(b: &Binder<'g, '_>, z: &Var<'g>, raw_taps: &[Var<'g>], m: &ModelConfig) -> Result<Var<'g>> {
    let expected = m.levels() - 1;
    if raw_taps.len() != expected {
        return Err(Error::Shape(format!("expected {expected} raw-feature taps, got {}", raw_taps.len())));
    }
    let scales = fused_scales(m);
    let kind = DecoderKind::Gated { gcam_base: m.levels() };
    Ok(decoder(b, "dec_e", kind, z, m, |t, h| {
        if scales.contains(&t) {
            super::faff(b, &format!("faff/{t}"), &raw_taps[t], &h)
        } else {
            Ok(h)
        }
    })?
    .0)
}
