use sucode_tensor::Var;

use super::{conv, group_norm, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::params::Binder;

/// Patch discriminator: four 4x4 stride-2 convolutions (padding 1, each
/// halving the resolution) with leaky rectifiers, then a 3x3 stride-1 conv to
/// one logit channel. A `H x W` image yields an `H/16 x W/16` logit grid.
pub fn discriminate<'g>(b: &Binder<'g, '_>, x: &Var<'g>, base: usize) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 4 || s[3] != 3 || s[1] % 16 != 0 || s[2] % 16 != 0 {
        return Err(Error::Shape(format!("discriminator expects [B, 16k, 16k, 3], got {s:?}")));
    }
    let widths = [base, 2 * base, 4 * base, 4 * base];
    let mut h = x.mul_scalar(2.0).add_scalar(-1.0);
    for (i, &c) in widths.iter().enumerate() {
        h = conv(b, &format!("disc/conv{i}"), &h, c, 4, 2, 1)?;
        if i > 0 {
            h = group_norm(b, &format!("disc/norm{i}"), &h)?;
        }
        h = h.leaky_relu(LEAKY_SLOPE);
    }
    conv(b, "disc/logits", &h, 1, 3, 1, 1)
}
