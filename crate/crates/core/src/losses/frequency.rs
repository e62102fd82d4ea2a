//! Focal frequency loss: a spectrum-weighted squared distance between the
//! orthonormal 2-D DFTs of target and prediction, computed per channel.
//!
//! The transform is two dense matrix products with cosine and sine tables,
//! which keeps the loss differentiable through ordinary tensor ops.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{CmidError, Result};

/// Focusing exponent on the spectrum distance.
pub const FOCAL_ALPHA: f64 = 1.0;

/// Orthonormal DFT tables `(cos, sin)` of size `n x n`, each scaled by
/// `1 / sqrt(n)`.
fn dft_tables(n: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let scale = 1.0 / (n as f64).sqrt();
    let mut cos = Vec::with_capacity(n * n);
    let mut sin = Vec::with_capacity(n * n);
    for k in 0..n {
        for m in 0..n {
            // Reduce k*m mod n first so large sizes keep full precision.
            let theta = 2.0 * std::f64::consts::PI * ((k * m) % n) as f64 / n as f64;
            cos.push(theta.cos() * scale);
            sin.push(theta.sin() * scale);
        }
    }
    let cos = Tensor::from_vec(cos, (n, n), device)?.to_dtype(dtype)?;
    let sin = Tensor::from_vec(sin, (n, n), device)?.to_dtype(dtype)?;
    Ok((cos, sin))
}

/// Squared magnitude of the DFT of `x - x_pred`, shape `(B*C) x H x W`.
fn spectrum_distance(x: &Tensor, x_pred: &Tensor) -> Result<Tensor> {
    if x.dims() != x_pred.dims() {
        return Err(CmidError::Shape(format!(
            "target {:?} and prediction {:?} differ",
            x.dims(),
            x_pred.dims()
        )));
    }
    let (b, c, h, w) = x.dims4()?;
    let diff = (x_pred - x)?.reshape((b * c, h, w))?;
    let (ch, sh) = dft_tables(h, x.dtype(), x.device())?;
    let (cw, sw) = dft_tables(w, x.dtype(), x.device())?;
    let left_c = ch.broadcast_matmul(&diff)?;
    let left_s = sh.broadcast_matmul(&diff)?;
    let re = (left_c.broadcast_matmul(&cw)? - left_s.broadcast_matmul(&sw)?)?;
    let im = (left_s.broadcast_matmul(&cw)? + left_c.broadcast_matmul(&sw)?)?;
    Ok((re.sqr()? + im.sqr()?)?)
}

/// Focal weights `|F(x) - F(x')|^alpha`, scaled to a maximum of 1 within
/// each image channel; detached.
fn focal_weights(distance: &Tensor) -> Result<Tensor> {
    let mag = distance.detach().sqrt()?;
    let mag = if FOCAL_ALPHA == 1.0 { mag } else { mag.powf(FOCAL_ALPHA)? };
    let max = mag.max_keepdim(D::Minus1)?.max_keepdim(D::Minus2)?;
    // All-zero spectra give weight 0 instead of 0/0.
    let safe = max.clamp(1e-30, f64::MAX)?;
    let w = mag.broadcast_div(&safe)?;
    Ok(w.clamp(0.0, 1.0)?.detach())
}

/// Mean over images, channels and frequencies of the focal-weighted squared
/// spectrum distance.
pub fn frequency_loss(x: &Tensor, x_pred: &Tensor) -> Result<Tensor> {
    let dist = spectrum_distance(x, x_pred)?;
    let weights = focal_weights(&dist)?;
    Ok((dist * weights)?.mean_all()?)
}

/// The focal weights `frequency_loss` would use for this pair, laid out as
/// `B x C x H x W`.
pub fn frequency_weights(x: &Tensor, x_pred: &Tensor) -> Result<Tensor> {
    let dist = spectrum_distance(x, x_pred)?;
    Ok(focal_weights(&dist)?.reshape(x.dims())?)
}
