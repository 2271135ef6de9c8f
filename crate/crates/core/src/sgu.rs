//! Stabilized guidance update: Gaussian-regularized separation gradient,
//! peak-normalized scaling and momentum.
//!
//! Each guided step runs, in order:
//!
//! ```text
//! g      = grad_z L_sep
//! g_reg  = K_sigma * g                              (use_sr)
//! lambda = alpha * std(z) / (max|g_reg| + eps)      (use_gm, else alpha)
//! delta  = lambda * g_reg
//! m      = beta * m + (1 - beta) * delta            (use_momentum, else delta)
//! z      = z - m
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::condition::InstanceMaskSet;
use crate::denoiser::AttentionCapture;
use crate::error::{Error, Result};
use crate::field::{field_max_abs, field_std, gaussian_smooth, LatentField};
use crate::isg::{separation_loss, SeparationLossReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub alpha: f64,
    pub sigma: f64,
    pub beta: f64,
    pub eps: f64,
    /// Layers `1..=guided_layer_max` are guided.
    pub guided_layer_max: usize,
    /// Steps `0..guided_step_max` are guided.
    pub guided_step_max: usize,
    pub use_isg: bool,
    pub use_gm: bool,
    pub use_sr: bool,
    pub use_momentum: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            sigma: 1.5,
            beta: 0.9,
            eps: 1e-6,
            guided_layer_max: 4,
            guided_step_max: 15,
            use_isg: true,
            use_gm: true,
            use_sr: true,
            use_momentum: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.use_sr && !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.guided_layer_max == 0 {
            return Err(Error::Config("guided_layer_max must be at least 1".into()));
        }
        Ok(())
    }

    pub fn guided_layers(&self) -> Vec<usize> {
        (1..=self.guided_layer_max).collect()
    }

    pub fn is_guided_step(&self, step: usize) -> bool {
        self.use_isg && step < self.guided_step_max
    }
}

/// One row of the guidance log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLogEntry {
    pub step: usize,
    pub loss: f64,
    pub mu_max: f64,
    pub lambda: f64,
    pub max_delta: f64,
    pub std_z: f64,
    /// `max |grad L_sep|` before regularization; kept in memory only.
    pub raw_max: f64,
}

pub const STEP_LOG_HEADER: &str = "step,loss,mu_max,lambda,max_delta,std_z";

#[derive(Debug, Clone)]
pub struct GuidanceState {
    momentum: LatentField,
    log: Vec<StepLogEntry>,
}

impl GuidanceState {
    pub fn new(channels: usize, dims: [usize; 3]) -> Self {
        Self { momentum: LatentField::zeros(channels, dims), log: Vec::new() }
    }

    pub fn for_latent(z: &LatentField) -> Self {
        Self::new(z.channels(), z.dims())
    }

    pub fn momentum(&self) -> &LatentField {
        &self.momentum
    }

    pub fn log(&self) -> &[StepLogEntry] {
        &self.log
    }

    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(self.log_csv().as_bytes())?;
        out.flush()?;
        Ok(())
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from(STEP_LOG_HEADER);
        s.push('\n');
        for e in &self.log {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.step, e.loss, e.mu_max, e.lambda, e.max_delta, e.std_z
            ));
        }
        s
    }
}

/// Parse a step-log CSV written by [`GuidanceState::write_log_csv`]. The
/// in-memory `raw_max` column is not stored and comes back as NaN.
pub fn parse_step_log(text: &str) -> Result<Vec<StepLogEntry>> {
    let mut lines = text.lines();
    if lines.next() != Some(STEP_LOG_HEADER) {
        return Err(Error::Format("step log header mismatch".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Format(format!("step log row {i} has {} columns", cols.len())));
        }
        let num = |j: usize| -> Result<f64> {
            cols[j].parse().map_err(|_| Error::Format(format!("step log row {i} column {j}: {:?}", cols[j])))
        };
        let step = cols[0]
            .parse()
            .map_err(|_| Error::Format(format!("step log row {i}: bad step {:?}", cols[0])))?;
        out.push(StepLogEntry {
            step,
            loss: num(1)?,
            mu_max: num(2)?,
            lambda: num(3)?,
            max_delta: num(4)?,
            std_z: num(5)?,
            raw_max: f64::NAN,
        });
    }
    Ok(out)
}

pub fn regularize_gradient(grad: &LatentField, cfg: &GuidanceConfig) -> Result<LatentField> {
    if cfg.use_sr {
        gaussian_smooth(grad, cfg.sigma)
    } else {
        Ok(grad.clone())
    }
}

#[derive(Debug, Clone)]
pub struct AdaptiveStep {
    pub lambda: f64,
    pub mu_max: f64,
    pub std_z: f64,
    pub delta: LatentField,
}

pub fn adaptive_scale(g_reg: &LatentField, z: &LatentField, cfg: &GuidanceConfig) -> Result<AdaptiveStep> {
    g_reg.check_shape(z)?;
    let mu_max = field_max_abs(g_reg)?;
    let std_z = field_std(z)?;
    let lambda = if cfg.use_gm { cfg.alpha * std_z / (mu_max + cfg.eps) } else { cfg.alpha };
    Ok(AdaptiveStep { lambda, mu_max, std_z, delta: g_reg.scaled(lambda) })
}

pub fn momentum_update(state: &mut GuidanceState, delta: &LatentField, cfg: &GuidanceConfig) -> Result<LatentField> {
    state.momentum.check_shape(delta)?;
    if !cfg.use_momentum {
        return Ok(delta.clone());
    }
    let beta = cfg.beta;
    for (m, &d) in state.momentum.data_mut().iter_mut().zip(delta.data()) {
        *m = beta * *m + (1.0 - beta) * d;
    }
    Ok(state.momentum.clone())
}

/// Full guided update of `z` at `step` from the given captures.
pub fn apply_guided_step(
    z: &LatentField,
    caps: &[AttentionCapture],
    masks: &InstanceMaskSet,
    state: &mut GuidanceState,
    cfg: &GuidanceConfig,
    step: usize,
) -> Result<LatentField> {
    check_window(state, cfg, step)?;
    if let Some(cap) = caps.iter().find(|c| c.layer() > cfg.guided_layer_max) {
        return Err(Error::Window(format!(
            "capture from layer {} is outside the guided layers 1..={}",
            cap.layer(),
            cfg.guided_layer_max
        )));
    }
    let report = separation_loss(caps, masks, cfg.eps)?;
    apply_gradient(z, &report, state, cfg, step)
}

/// The update part of [`apply_guided_step`] for an already computed loss report.
pub fn apply_gradient(
    z: &LatentField,
    report: &SeparationLossReport,
    state: &mut GuidanceState,
    cfg: &GuidanceConfig,
    step: usize,
) -> Result<LatentField> {
    check_window(state, cfg, step)?;
    let raw_max = field_max_abs(&report.grad)?;
    let g_reg = regularize_gradient(&report.grad, cfg)?;
    let scaled = adaptive_scale(&g_reg, z, cfg)?;
    let m = momentum_update(state, &scaled.delta, cfg)?;
    let next = z.axpy(-1.0, &m)?;
    state.log.push(StepLogEntry {
        step,
        loss: report.loss,
        mu_max: scaled.mu_max,
        lambda: scaled.lambda,
        max_delta: field_max_abs(&scaled.delta)?,
        std_z: scaled.std_z,
        raw_max,
    });
    Ok(next)
}

fn check_window(state: &GuidanceState, cfg: &GuidanceConfig, step: usize) -> Result<()> {
    if !cfg.use_isg {
        return Err(Error::Window("guidance is disabled".into()));
    }
    if step >= cfg.guided_step_max {
        return Err(Error::Window(format!(
            "step {step} is outside the guided steps 0..{}",
            cfg.guided_step_max
        )));
    }
    if let Some(last) = state.log.last() {
        if step <= last.step {
            return Err(Error::Window(format!("step {step} does not follow logged step {}", last.step)));
        }
    }
    Ok(())
}
