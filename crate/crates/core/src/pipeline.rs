//! The sampling loop with optional guidance, and its flat run configuration.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionGains, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::field::LatentField;
use crate::isg::separation_loss;
use crate::metrics::{evaluate_scene, extract_instances, ssr, EvalConfig, MetricRow};
use crate::rng::Rng;
use crate::sampler::{init_noise, sampler_step};
use crate::scene::SceneRecord;
use crate::sgu::{apply_guided_step, GuidanceConfig, GuidanceState};
use crate::vae::{toy_decode, Occupancy, LATENT_CHANNELS};

/// Environment variable that overrides [`RunConfig::seed`].
pub const SEED_ENV: &str = "TIMI_SEED";

/// Every knob of a run, serialized as one flat JSON object (attention gains
/// are the only nested group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: f64,
    pub sigma: f64,
    pub beta: f64,
    pub eps: f64,
    pub guided_layer_max: usize,
    pub guided_step_max: usize,
    pub use_isg: bool,
    pub use_gm: bool,
    pub use_sr: bool,
    pub use_momentum: bool,
    pub n_layers: usize,
    pub d: usize,
    pub attn_temperature: f64,
    pub weight_seed: u64,
    pub gains: AttentionGains,
    pub total_steps: usize,
    pub points_cap: usize,
    pub fscore_tau: f64,
    pub min_component_size: usize,
    pub seed: u64,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        let den = DenoiserConfig::default();
        let ev = EvalConfig::default();
        Self {
            alpha: g.alpha,
            sigma: g.sigma,
            beta: g.beta,
            eps: g.eps,
            guided_layer_max: g.guided_layer_max,
            guided_step_max: g.guided_step_max,
            use_isg: g.use_isg,
            use_gm: g.use_gm,
            use_sr: g.use_sr,
            use_momentum: g.use_momentum,
            n_layers: den.n_layers,
            d: den.d,
            attn_temperature: den.attn_temperature,
            weight_seed: den.weight_seed,
            gains: den.gains,
            total_steps: 50,
            points_cap: ev.points_cap,
            fscore_tau: ev.fscore_tau,
            min_component_size: ev.min_component_size,
            seed: 0,
            output_dir: String::new(),
        }
    }
}

impl RunConfig {
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            alpha: self.alpha,
            sigma: self.sigma,
            beta: self.beta,
            eps: self.eps,
            guided_layer_max: self.guided_layer_max,
            guided_step_max: self.guided_step_max,
            use_isg: self.use_isg,
            use_gm: self.use_gm,
            use_sr: self.use_sr,
            use_momentum: self.use_momentum,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            n_layers: self.n_layers,
            d: self.d,
            attn_temperature: self.attn_temperature,
            weight_seed: self.weight_seed,
            gains: self.gains.clone(),
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            points_cap: self.points_cap,
            fscore_tau: self.fscore_tau,
            min_component_size: self.min_component_size,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.guidance().validate()?;
        self.denoiser().validate()?;
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.use_isg && self.guided_layer_max > self.n_layers {
            return Err(Error::Config(format!(
                "guided_layer_max {} exceeds n_layers {}",
                self.guided_layer_max, self.n_layers
            )));
        }
        if !(self.fscore_tau > 0.0) {
            return Err(Error::Config(format!("fscore_tau must be positive, got {}", self.fscore_tau)));
        }
        if self.points_cap == 0 {
            return Err(Error::Config("points_cap must be at least 1".into()));
        }
        Ok(())
    }

    /// Apply the seed override from the environment, if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Record the separation loss at each step of the guided window even when
    /// guidance is off, for comparing trajectories.
    pub monitor_loss: bool,
    /// Fill `time_s` with the measured wall time instead of zero.
    pub record_time: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub latent: LatentField,
    pub pred: Occupancy,
    pub state: GuidanceState,
    /// `(step, L_sep)` for each monitored step.
    pub monitored: Vec<(usize, f64)>,
    pub time_s: f64,
}

/// Noise seed of a scene: the run seed mixed with the scene's own seed.
pub fn noise_rng(run_seed: u64, scene_seed: u64) -> Rng {
    Rng::derived(run_seed, scene_seed)
}

pub fn run_scene(record: &SceneRecord, cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let denoiser = Denoiser::new(cfg.denoiser())?;
    let guidance = cfg.guidance();
    let window = GuidanceConfig { use_isg: true, ..guidance.clone() };
    let total = cfg.total_steps;
    let mut z = init_noise(record.dims(), LATENT_CHANNELS, &mut noise_rng(cfg.seed, record.spec.seed));
    let mut state = GuidanceState::for_latent(&z);
    let mut monitored = Vec::new();
    let layers = guidance.guided_layers();
    for step in 0..total {
        let guided = guidance.is_guided_step(step);
        let monitor = opts.monitor_loss && window.is_guided_step(step);
        let capture: &[usize] = if guided || monitor { &layers } else { &[] };
        let out = denoiser.forward(&z, &record.cond, capture)?;
        if monitor {
            monitored.push((step, separation_loss(&out.captures, &record.masks, guidance.eps)?.loss));
        }
        if guided {
            z = apply_guided_step(&z, &out.captures, &record.masks, &mut state, &guidance, step)?;
            ensure_finite(&z, step)?;
        }
        z = sampler_step(&z, &out.x0_hat, step, total)?;
        ensure_finite(&z, step)?;
    }
    let pred = toy_decode(&z);
    let time_s = if opts.record_time { started.elapsed().as_secs_f64() } else { 0.0 };
    Ok(RunOutcome { latent: z, pred, state, monitored, time_s })
}

fn ensure_finite(z: &LatentField, step: usize) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(step))
    }
}

pub fn evaluate_run(record: &SceneRecord, pred: &Occupancy, cfg: &RunConfig, time_s: f64) -> Result<MetricRow> {
    let mut row = evaluate_scene(pred, &record.instances, &cfg.eval())?;
    row.time_s = Some(time_s);
    Ok(row)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineReport {
    pub n_pred: usize,
    pub n_gt: usize,
    pub ssr: f64,
}

/// Unguided run of a scene, reporting how many instances survive decoding.
pub fn entangled_baseline_check(record: &SceneRecord, cfg: &RunConfig) -> Result<BaselineReport> {
    let unguided = RunConfig { use_isg: false, ..cfg.clone() };
    let out = run_scene(record, &unguided, &RunOptions::default())?;
    let n_pred = extract_instances(&out.pred, cfg.min_component_size).len();
    let n_gt = record.instances.len();
    Ok(BaselineReport { n_pred, n_gt, ssr: ssr(n_pred, n_gt)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    fn small_scene(seed: u64) -> SceneRecord {
        let spec = SceneSpec { dims: [8, 8, 8], token_grid: (8, 8), size_min: 3, size_max: 4, seed, ..SceneSpec::default() };
        generate_scene(&spec).unwrap()
    }

    fn quick() -> RunConfig {
        RunConfig { total_steps: 8, guided_step_max: 4, ..RunConfig::default() }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = RunConfig { alpha: 0.3, use_sr: false, seed: 99, output_dir: "out".into(), ..RunConfig::default() };
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert!(RunConfig::from_json(r#"{"alpha": 0.2, "bogus": 1}"#).is_err());
        assert_eq!(RunConfig::from_json(r#"{"alpha": 0.2}"#).unwrap().alpha, 0.2);
    }

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.alpha, c.sigma, c.beta, c.eps), (0.1, 1.5, 0.9, 1e-6));
        assert_eq!((c.guided_layer_max, c.guided_step_max, c.total_steps), (4, 15, 50));
        assert_eq!((c.points_cap, c.fscore_tau, c.min_component_size), (2048, 0.1, 4));
    }

    #[test]
    fn guided_window_is_logged() {
        let rec = small_scene(1);
        let out = run_scene(&rec, &quick(), &RunOptions::default()).unwrap();
        let steps: Vec<usize> = out.state.log().iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3]);
        for e in out.state.log() {
            assert!(e.max_delta <= 0.1 * e.std_z + 1e-9);
        }
    }

    #[test]
    fn unguided_is_deterministic_and_ignores_sgu_flags() {
        let rec = small_scene(2);
        let base = RunConfig { use_isg: false, ..quick() };
        let a = run_scene(&rec, &base, &RunOptions::default()).unwrap();
        let b = run_scene(&rec, &base, &RunOptions::default()).unwrap();
        assert_eq!(a.latent, b.latent);
        assert!(a.state.log().is_empty());
        let no_sgu = RunConfig { use_gm: false, use_sr: false, use_momentum: false, ..base };
        let c = run_scene(&rec, &no_sgu, &RunOptions::default()).unwrap();
        assert_eq!(a.latent, c.latent);
    }

    #[test]
    fn monitoring_does_not_perturb_the_trajectory() {
        let rec = small_scene(3);
        let base = RunConfig { use_isg: false, ..quick() };
        let plain = run_scene(&rec, &base, &RunOptions::default()).unwrap();
        let watched = run_scene(&rec, &base, &RunOptions { monitor_loss: true, ..Default::default() }).unwrap();
        assert_eq!(plain.latent, watched.latent);
        assert_eq!(watched.monitored.len(), 4);
    }

    #[test]
    fn divergence_is_reported() {
        let mut z = LatentField::zeros(4, [2, 2, 2]);
        assert!(ensure_finite(&z, 3).is_ok());
        z.data_mut()[5] = f64::NAN;
        let err = ensure_finite(&z, 3).unwrap_err();
        assert_eq!(err.to_string(), "numerical-divergence: non-finite latent at step 3");
    }

    #[test]
    fn baseline_report_is_deterministic() {
        let rec = small_scene(5);
        let a = entangled_baseline_check(&rec, &quick()).unwrap();
        assert_eq!(a, entangled_baseline_check(&rec, &quick()).unwrap());
        assert_eq!(a.n_gt, 2);
    }
}
