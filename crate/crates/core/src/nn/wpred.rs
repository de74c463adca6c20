//! Weight predictor: one windowed self-attention layer with relative position
//! bias, an MLP, and a 1x1 projection to per-class weights normalized by a
//! softmax over classes.

use sucode_tensor::Var;

use super::{channels, conv, layer_norm, linear};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Binder, Init};

/// For every (query, key) pair of a `ws x ws` window, the row of the
/// `(2ws-1)^2` relative-position table holding their bias.
pub fn relative_position_index(ws: usize) -> Vec<usize> {
    let t = ws * ws;
    let span = 2 * ws - 1;
    let mut idx = Vec::with_capacity(t * t);
    for q in 0..t {
        for k in 0..t {
            let dy = (q / ws) as isize - (k / ws) as isize + ws as isize - 1;
            let dx = (q % ws) as isize - (k % ws) as isize + ws as isize - 1;
            idx.push(dy as usize * span + dx as usize);
        }
    }
    idx
}

fn window_attention<'g>(b: &Binder<'g, '_>, name: &str, x: &Var<'g>, ws: usize, heads: usize) -> Result<Var<'g>> {
    let s = x.shape();
    let (n, h, w, d) = (s[0], s[1], s[2], s[3]);
    let (nh, nw, t, dh) = (h / ws, w / ws, ws * ws, d / heads);
    let windows = x
        .reshape(&[n, nh, ws, nw, ws, d])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[n * nh * nw, t, d]);
    let bw = n * nh * nw;
    let qkv = linear(b, &format!("{name}/qkv"), &windows, 3 * d)?;
    let split_heads = |part: usize| {
        qkv.slice(2, part * d, d).reshape(&[bw, t, heads, dh]).permute(&[0, 2, 1, 3]).reshape(&[bw * heads, t, dh])
    };
    let (q, k, v) = (split_heads(0), split_heads(1), split_heads(2));
    let span = 2 * ws - 1;
    let table = b.param(&format!("{name}/rel_bias"), &[span * span, heads], Init::Normal(0.02))?;
    let bias = table.gather_rows(&relative_position_index(ws)).reshape(&[t, t, heads]).permute(&[2, 0, 1]);
    let scores = q
        .matmul(&k.transpose_last())
        .mul_scalar(1.0 / (dh as f64).sqrt())
        .reshape(&[bw, heads, t, t])
        .add(&bias);
    let att = scores.softmax_last().reshape(&[bw * heads, t, t]);
    let o = att.matmul(&v).reshape(&[bw, heads, t, dh]).permute(&[0, 2, 1, 3]).reshape(&[bw, t, d]);
    let o = linear(b, &format!("{name}/proj"), &o, d)?;
    Ok(o.reshape(&[n, nh, nw, ws, ws, d]).permute(&[0, 1, 3, 2, 4, 5]).reshape(&[n, h, w, d]))
}

/// `[B, h, w, n_z] -> [B, h, w, C]` convex per-location class weights.
pub fn weight_predict<'g>(b: &Binder<'g, '_>, z_hat: &Var<'g>, m: &ModelConfig) -> Result<Var<'g>> {
    let s = z_hat.shape();
    if s.len() != 4 || s[3] != m.embed_dim {
        return Err(Error::Shape(format!("weight predictor expects [B, h, w, {}], got {s:?}", m.embed_dim)));
    }
    let ws = m.window_size.min(s[1]).min(s[2]);
    if s[1] % ws != 0 || s[2] % ws != 0 {
        return Err(Error::Shape(format!("window {ws} does not tile a {}x{} latent", s[1], s[2])));
    }
    let d = channels(z_hat);
    let a = window_attention(b, "wpred/attn", &layer_norm(b, "wpred/norm1", z_hat)?, ws, m.attn_heads)?;
    let x = z_hat.add(&a);
    let hdn = linear(b, "wpred/mlp1", &layer_norm(b, "wpred/norm2", &x)?, 2 * d)?.silu();
    let x = x.add(&linear(b, "wpred/mlp2", &hdn, d)?);
    Ok(conv(b, "wpred/proj", &x, m.class_count, 1, 1, 0)?.softmax_last())
}
