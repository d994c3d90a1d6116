//! Training loss: L1 in the compressed domain plus a directional edge
//! penalty computed at several dilations.
//!
//! The network's head emits the prediction already range-compressed; the
//! linear target is clamped to [0, 1] and compressed here, so highlight
//! errors are not drowned out by the linear scale. The edge penalty
//! compares responses to four oriented derivative kernels (0, 45, 90,
//! 135 degrees) applied per channel, at every configured dilation, and
//! is weighted by `lambda_dasl`.

use crate::model::config::EafnetConfig;
use crate::model::ModelError;
use crate::scalar::Scalar;
use crate::tensor::{Array, Graph, TensorId};

/// Oriented derivative kernels, scaled by 1/8 so responses stay within
/// the input range. Layout: [4 * channels, channels, 3, 3], block
/// diagonal so each input channel yields four direction planes.
pub fn sobel_bank<T: Scalar>(channels: usize) -> Array<T> {
    #[rustfmt::skip]
    const KERNELS: [[f64; 9]; 4] = [
        [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
        [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
        [0.0, 1.0, 2.0, -1.0, 0.0, 1.0, -2.0, -1.0, 0.0],
        [-2.0, -1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 2.0],
    ];
    let mut bank = Array::zeros(&[4 * channels, channels, 3, 3]);
    for ch in 0..channels {
        for (k, kernel) in KERNELS.iter().enumerate() {
            let out_ch = ch * 4 + k;
            let base = (out_ch * channels + ch) * 9;
            for (i, v) in kernel.iter().enumerate() {
                bank.data_mut()[base + i] = T::cast(v / 8.0);
            }
        }
    }
    bank
}

pub struct LossParts {
    pub total: TensorId,
    pub l1: TensorId,
    pub dasl: TensorId,
}

/// Attaches the full training loss between `pred`, a [3, H, W] map in
/// the compressed domain (as the head emits it), and `target`, the
/// matching linear radiance map in [0, 1].
pub fn attach_loss<T: Scalar>(
    g: &Graph<T>,
    pred: TensorId,
    target: TensorId,
    cfg: &EafnetConfig,
) -> Result<LossParts, ModelError> {
    let shape = g.shape(pred);
    if shape.len() != 3 {
        return Err(ModelError::Config(format!("loss expects a 3-d map, got {shape:?}")));
    }
    let channels = shape[0];
    let tp = g.clamp01(pred)?;
    let tt = g.mu_law(g.clamp01(target)?, cfg.mu)?;
    let l1 = g.l1_loss(tp, tt)?;

    let bank = g.input(sobel_bank::<T>(channels))?;
    let mut dasl = None;
    for &dilation in &cfg.dasl_dilations {
        let ep = g.conv2d(tp, bank, None, 1, dilation)?;
        let et = g.conv2d(tt, bank, None, 1, dilation)?;
        let term = g.mean_all(g.abs(g.sub(ep, et)?)?)?;
        dasl = Some(match dasl {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let dasl = dasl.expect("config validation guarantees at least one dilation");
    let total = g.add(l1, g.scale(dasl, T::cast(cfg.lambda_dasl))?)?;
    Ok(LossParts { total, l1, dasl })
}
