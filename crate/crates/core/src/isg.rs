//! Instance-aware separation guidance: instance probability maps, structure
//! weights, the weighted negative log-likelihood and its gradient with respect
//! to the latent.
//!
//! For a capture `A_zc` (`L x M`) and binary masks `M_k`:
//!
//! ```text
//! P[v, k] = sum_m A_zc[v, m] M_k[m]
//! W[v, k] = P[v, k] / (sum_v' P[v', k] + eps)
//! L_sep   = - sum_k sum_v W[v, k] log(P[v, k] + eps)
//! ```
//!
//! `W` is held constant during differentiation. With several captures the
//! loss and gradient are arithmetic means over layers.

use ndarray::Array2;

use crate::condition::{ConditionSet, InstanceMaskSet};
use crate::denoiser::{AttentionCapture, Denoiser};
use crate::error::{Error, Result};
use crate::field::LatentField;
use crate::vae::LATENT_CHANNELS;

/// Default stability constant for both the weight normalizer and the log.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceProbabilityMap {
    pub layer: usize,
    /// `L x K`.
    pub p: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeightMap {
    pub eps: f64,
    /// `L x K`.
    pub w: Array2<f64>,
}

impl SpatialWeightMap {
    pub fn column_sums(&self) -> Vec<f64> {
        self.w.columns().into_iter().map(|c| c.sum()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SeparationLossReport {
    pub loss: f64,
    pub per_layer: Vec<f64>,
    pub grad: LatentField,
}

fn mask_matrix(cap: &AttentionCapture, masks: &InstanceMaskSet) -> Result<Array2<f64>> {
    if masks.token_count() != cap.cond_count() {
        return Err(Error::MaskDim(format!(
            "masks cover {} tokens, capture has {} condition columns",
            masks.token_count(),
            cap.cond_count()
        )));
    }
    let k = masks.instance_count();
    let mut mat = Array2::zeros((cap.cond_count(), k));
    for (kk, mask) in masks.masks().iter().enumerate() {
        for (m, &on) in mask.iter().enumerate() {
            if on {
                mat[[m, kk]] = 1.0;
            }
        }
    }
    Ok(mat)
}

pub fn instance_probability(cap: &AttentionCapture, masks: &InstanceMaskSet) -> Result<InstanceProbabilityMap> {
    let mat = mask_matrix(cap, masks)?;
    Ok(InstanceProbabilityMap { layer: cap.layer(), p: cap.attention().dot(&mat) })
}

fn weights_from_probability(p: &Array2<f64>, eps: f64) -> SpatialWeightMap {
    let mut w = p.clone();
    for mut col in w.columns_mut() {
        let denom = col.sum() + eps;
        col.mapv_inplace(|x| x / denom);
    }
    SpatialWeightMap { eps, w }
}

pub fn spatial_weights(cap: &AttentionCapture, masks: &InstanceMaskSet, eps: f64) -> Result<SpatialWeightMap> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("weight eps must be positive, got {eps}")));
    }
    let prob = instance_probability(cap, masks)?;
    Ok(weights_from_probability(&prob.p, eps))
}

/// Per-instance terms are summed in sorted order so that relabeling instances
/// cannot change the result.
fn layer_loss(p: &Array2<f64>, w: &Array2<f64>, eps_log: f64) -> f64 {
    let mut terms: Vec<f64> = p
        .columns()
        .into_iter()
        .zip(w.columns())
        .map(|(pc, wc)| -pc.iter().zip(wc.iter()).map(|(&pv, &wv)| wv * (pv + eps_log).ln()).sum::<f64>())
        .collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Loss of each capture against externally held weights, without gradients.
pub fn loss_with_weights(
    caps: &[AttentionCapture],
    masks: &InstanceMaskSet,
    weights: &[SpatialWeightMap],
    eps_log: f64,
) -> Result<f64> {
    if caps.is_empty() {
        return Err(Error::NoCaptures);
    }
    if caps.len() != weights.len() {
        return Err(Error::Shape(format!("{} captures vs {} weight maps", caps.len(), weights.len())));
    }
    let mut total = 0.0;
    for (cap, w) in caps.iter().zip(weights) {
        let p = instance_probability(cap, masks)?.p;
        total += layer_loss(&p, &w.w, eps_log);
    }
    Ok(total / caps.len() as f64)
}

/// Separation loss and its analytic latent gradient, using one `eps` for both
/// the weight normalizer and the log.
pub fn separation_loss(caps: &[AttentionCapture], masks: &InstanceMaskSet, eps: f64) -> Result<SeparationLossReport> {
    separation_loss_with(caps, masks, eps, eps)
}

pub fn separation_loss_with(
    caps: &[AttentionCapture],
    masks: &InstanceMaskSet,
    eps_log: f64,
    eps_w: f64,
) -> Result<SeparationLossReport> {
    let first = caps.first().ok_or(Error::NoCaptures)?;
    if !(eps_log > 0.0) || !(eps_w > 0.0) {
        return Err(Error::Config("separation loss eps must be positive".into()));
    }
    let n = caps.len() as f64;
    let mut per_layer = Vec::with_capacity(caps.len());
    let mut grad = LatentField::zeros(LATENT_CHANNELS, first.dims());
    for cap in caps {
        let mat = mask_matrix(cap, masks)?;
        let p = cap.attention().dot(&mat);
        let w = weights_from_probability(&p, eps_w).w;
        per_layer.push(layer_loss(&p, &w, eps_log));
        // dL/dP = -W / (P + eps); dL/dA = dL/dP * masks^T.
        let d_p = Array2::from_shape_fn(p.dim(), |(v, k)| -w[[v, k]] / (p[[v, k]] + eps_log));
        let d_a = d_p.dot(&mat.t());
        let layer_grad = cap.backward(&d_a)?;
        grad = grad.axpy(1.0 / n, &layer_grad)?;
    }
    let loss = per_layer.iter().sum::<f64>() / n;
    Ok(SeparationLossReport { loss, per_layer, grad })
}

/// Largest latent (`C * D * H * W`) the finite-difference oracle accepts.
pub const ORACLE_MAX_ENTRIES: usize = 4096;

/// Central differences of the separation loss with respect to every latent
/// entry, with the spatial weights frozen at their value at `z`.
pub fn fd_gradient_oracle(
    z: &LatentField,
    cond: &ConditionSet,
    denoiser: &Denoiser,
    masks: &InstanceMaskSet,
    guided_layers: &[usize],
    h: f64,
    eps: f64,
) -> Result<LatentField> {
    if z.len() > ORACLE_MAX_ENTRIES {
        return Err(Error::OracleTooLarge(z.len()));
    }
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let caps = denoiser.capture(z, cond, guided_layers)?;
    if caps.is_empty() {
        return Err(Error::NoCaptures);
    }
    let weights = caps
        .iter()
        .map(|c| spatial_weights(c, masks, eps))
        .collect::<Result<Vec<_>>>()?;
    let eval = |zz: &LatentField| -> Result<f64> {
        let caps = denoiser.capture(zz, cond, guided_layers)?;
        loss_with_weights(&caps, masks, &weights, eps)
    };
    let mut out = LatentField::zeros(z.channels(), z.dims());
    let mut probe = z.clone();
    for i in 0..z.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `max_i |a_i - b_i| / max_i |b_i|`, the error measure used by the gradient
/// checks (relative to the reference gradient's scale).
pub fn max_relative_error(analytic: &LatentField, reference: &LatentField) -> f64 {
    let scale = reference.data().iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff = analytic.max_abs_diff(reference);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
