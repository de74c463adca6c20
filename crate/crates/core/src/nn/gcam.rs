use sucode_tensor::Var;

use super::{channels, conv, layer_norm, simple_gate};
use crate::error::Result;
use crate::params::Binder;

/// Gated channel attention, residual:
/// norm → 3x3 conv to 2c → gate → ×sigmoid(1x1 conv of pooled features)
/// → 1x1 conv to 2c → gate → 1x1 projection → add input.
///
/// With `<name>/proj` weights and bias at zero the block is the identity.
pub fn gcam<'g>(b: &Binder<'g, '_>, name: &str, x: &Var<'g>) -> Result<Var<'g>> {
    let c = channels(x);
    let y = layer_norm(b, &format!("{name}/norm"), x)?;
    let y = simple_gate(&conv(b, &format!("{name}/conv"), &y, 2 * c, 3, 1, 1)?);
    let pooled = y.mean_keepdim(&[1, 2]);
    let att = conv(b, &format!("{name}/att"), &pooled, c, 1, 1, 0)?.sigmoid();
    let y = y.mul(&att);
    let y = simple_gate(&conv(b, &format!("{name}/mlp"), &y, 2 * c, 1, 1, 0)?);
    let y = conv(b, &format!("{name}/proj"), &y, c, 1, 1, 0)?;
    Ok(x.add(&y))
}
