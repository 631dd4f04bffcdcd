use candle_core::Tensor;

use crate::error::{Error, Result};

/// Least-squares GAN loss: mean squared distance of `scores` to 1 (real) or 0 (fake).
pub fn adversarial_loss(scores: &Tensor, target_real: bool) -> Result<Tensor> {
    let target = if target_real { 1.0 } else { 0.0 };
    Ok(scores.affine(1.0, -target)?.sqr()?.mean_all()?)
}

/// Mean absolute difference; shapes must match exactly.
pub fn l1_loss(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::Dimension(format!("l1 operands differ: {:?} vs {:?}", x.dims(), y.dims())));
    }
    Ok((x - y)?.abs()?.mean_all()?)
}

/// Reconstruction penalty between an input and its round trip through both generators.
pub fn cycle_loss(x: &Tensor, x_rec: &Tensor) -> Result<Tensor> {
    l1_loss(x, x_rec)
}

/// `0.5 * (mse(real, 1) + mse(fake, 0))`.
pub fn discriminator_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    let sum = (adversarial_loss(real_scores, true)? + adversarial_loss(fake_scores, false)?)?;
    Ok((sum * 0.5)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
