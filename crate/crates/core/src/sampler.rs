use crate::error::{Error, Result};
use crate::field::{Dims, LatentField};
use crate::rng::Rng;

/// Euler interpolation toward the clean-sample estimate:
/// `z_{s+1} = z_s + (x0_hat - z_s) / (T - s)`.
pub fn sampler_step(z: &LatentField, x0_hat: &LatentField, step: usize, total: usize) -> Result<LatentField> {
    if step >= total {
        return Err(Error::StepOverflow { step, total });
    }
    z.check_shape(x0_hat)?;
    let rate = 1.0 / (total - step) as f64;
    let data = z
        .data()
        .iter()
        .zip(x0_hat.data())
        .map(|(&zs, &x)| if rate == 1.0 { x } else { zs + (x - zs) * rate })
        .collect();
    LatentField::from_vec(z.channels(), z.dims(), data)
}

/// I.i.d. standard normal latent drawn from `rng` in storage order.
pub fn init_noise(dims: Dims, channels: usize, rng: &mut Rng) -> LatentField {
    let n = channels * dims[0] * dims[1] * dims[2];
    let data = (0..n).map(|_| rng.normal()).collect();
    LatentField::from_vec(channels, dims, data).expect("length matches by construction")
}
