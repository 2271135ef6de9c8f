//! Subcommand implementations. Each returns a [`CliError`] carrying its exit code.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use instsep::metrics::{results_csv, MetricRow, METRIC_COLUMNS};
use instsep::pipeline::{evaluate_run, run_scene, RunConfig, RunOptions};
use instsep::rng::Rng;
use instsep::scene::{generate_scene, load_occupancy, SceneRecord, SceneSpec};
use instsep::Error;

use crate::{CliError, CliResult, SweepParam};

pub const MANIFEST_FILE: &str = "scenes.json";
pub const CONFIG_FILE: &str = "config.json";
pub const STEP_LOG_FILE: &str = "steps.csv";
pub const RUN_INFO_FILE: &str = "run.json";
pub const RESULTS_FILE: &str = "results.csv";

/// Reseeding attempts per scene after a packing failure.
const RESEED_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone)]
pub struct GenArgs {
    pub out: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub gap: usize,
    pub instances: usize,
    pub grid: usize,
    pub tokens: usize,
    pub size_min: usize,
    pub size_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Shared scene parameters; each entry supplies its own seed.
    pub spec: SceneSpec,
    pub scenes: Vec<ManifestEntry>,
}

pub fn scene_id(i: usize) -> String {
    format!("scene_{i:03}")
}

/// Scene `i` uses seed `seed + i`, reseeding from a derived stream if the
/// placement cannot be packed.
pub fn gen_scenes(args: &GenArgs) -> CliResult<Manifest> {
    let base = SceneSpec {
        dims: [args.grid; 3],
        instance_count: args.instances,
        shapes: Vec::new(),
        size_min: args.size_min,
        size_max: args.size_max,
        gap: args.gap,
        token_grid: (args.tokens, args.tokens),
        seed: args.seed,
    };
    base.validate()?;
    fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    let mut scenes = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let first = args.seed.wrapping_add(i as u64);
        let mut reseed = Rng::derived(first, 0x5eed);
        let mut seed = first;
        let mut attempt = 0;
        let record = loop {
            match generate_scene(&SceneSpec { seed, ..base.clone() }) {
                Ok(r) => break r,
                Err(Error::PackingFailed(_)) if attempt < RESEED_ATTEMPTS => {
                    attempt += 1;
                    seed = reseed.next_u64();
                }
                Err(e) => return Err(e.into()),
            }
        };
        let id = scene_id(i);
        record.save(&args.out.join(&id))?;
        scenes.push(ManifestEntry { id, seed });
    }
    let manifest = Manifest { spec: base, scenes };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::data(e.to_string()))? + "\n";
    let path = args.out.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    Ok(manifest)
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

/// `(id, directory)` for every scene under `path`: a manifest directory or a
/// single scene directory.
pub fn scene_list(path: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let manifest = path.join(MANIFEST_FILE);
    if manifest.is_file() {
        let text = fs::read_to_string(&manifest).map_err(|e| io_error(&manifest, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", manifest.display())))?;
        return Ok(m.scenes.into_iter().map(|s| (s.id.clone(), path.join(s.id))).collect());
    }
    if path.join("scene.json").is_file() {
        let id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".to_string());
        return Ok(vec![(id, path.to_path_buf())]);
    }
    Err(CliError::data(format!("{}: no {MANIFEST_FILE} or scene.json found", path.display())))
}

fn load_scene(id: &str, dir: &Path) -> CliResult<SceneRecord> {
    SceneRecord::load(dir).map_err(|e| CliError::data(format!("scene {id} ({}): {e}", dir.display())))
}

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Toggles {
    pub no_isg: bool,
    pub no_sgu: bool,
    pub no_gm: bool,
    pub no_sr: bool,
    pub no_momentum: bool,
}

impl Toggles {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if self.no_isg {
            cfg.use_isg = false;
        }
        if self.no_sgu {
            cfg.use_gm = false;
            cfg.use_sr = false;
            cfg.use_momentum = false;
        }
        if self.no_gm {
            cfg.use_gm = false;
        }
        if self.no_sr {
            cfg.use_sr = false;
        }
        if self.no_momentum {
            cfg.use_momentum = false;
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub scenes: PathBuf,
    pub out: PathBuf,
    pub config: RunConfig,
    pub toggles: Toggles,
    pub record_time: bool,
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub time_s: f64,
}

/// The configuration `run` actually uses: file config, then flags, then the
/// seed override from the environment.
pub fn effective_config(args: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = args.config.clone();
    args.toggles.apply(&mut cfg);
    cfg.output_dir = args.out.to_string_lossy().into_owned();
    let cfg = cfg.with_env_seed()?;
    cfg.validate()?;
    Ok(cfg)
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::data(format!("thread pool: {e}")))
}

/// Apply `f` to every item on `jobs` threads, keeping input order and
/// reporting the first error in that order.
fn fan_out<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> CliResult<R> + Sync) -> CliResult<Vec<R>> {
    let results: Vec<CliResult<R>> = pool(jobs)?.install(|| items.par_iter().map(&f).collect());
    results.into_iter().collect()
}

pub fn run(args: &RunArgs) -> CliResult<RunConfig> {
    let cfg = effective_config(args)?;
    let scenes = scene_list(&args.scenes)?;
    fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    write_text(&args.out.join(CONFIG_FILE), &cfg.to_json())?;
    let opts = RunOptions { monitor_loss: false, record_time: args.record_time };
    fan_out(args.jobs, &scenes, |(id, dir)| run_one(id, dir, &args.out.join(id), &cfg, &opts))?;
    Ok(cfg)
}

fn run_one(id: &str, scene_dir: &Path, out: &Path, cfg: &RunConfig, opts: &RunOptions) -> CliResult<()> {
    let record = load_scene(id, scene_dir)?;
    let outcome = run_scene(&record, cfg, opts).map_err(|e| {
        let err = CliError::from(e);
        CliError { code: err.code, message: format!("scene {id}: {}", err.message) }
    })?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    instsep::scene::save_occupancy(&out.join("pred"), &outcome.pred)?;
    outcome.latent.save(&out.join("latent"))?;
    write_text(&out.join(STEP_LOG_FILE), &outcome.state.log_csv())?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    let info = serde_json::to_string(&RunInfo { time_s: outcome.time_s }).expect("run info serializes") + "\n";
    write_text(&out.join(RUN_INFO_FILE), &info)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub scenes: PathBuf,
    pub preds: PathBuf,
    /// Defaults to `<preds>/results.csv`.
    pub out: Option<PathBuf>,
    /// Defaults to the config echo in `preds`, then to the built-in defaults.
    pub config: Option<RunConfig>,
    pub jobs: usize,
}

/// Per-scene rows in manifest order.
pub fn eval_rows(args: &EvalArgs) -> CliResult<Vec<(String, MetricRow)>> {
    let scenes = scene_list(&args.scenes)?;
    let missing: Vec<&str> = scenes
        .iter()
        .filter(|(id, _)| !args.preds.join(id).join("pred.json").is_file())
        .map(|(id, _)| id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::data(format!("missing predictions for scene ids: {}", missing.join(", "))));
    }
    let cfg = match &args.config {
        Some(c) => c.clone(),
        None => {
            let echo = args.preds.join(CONFIG_FILE);
            if echo.is_file() {
                load_config(Some(&echo)).map_err(|e| CliError::data(e.message))?
            } else {
                RunConfig::default()
            }
        }
    };
    cfg.validate()?;
    fan_out(args.jobs, &scenes, |(id, dir)| {
        let record = load_scene(id, dir)?;
        let pred_dir = args.preds.join(id);
        let pred = load_occupancy(&pred_dir.join("pred"))
            .map_err(|e| CliError::data(format!("scene {id}: {e}")))?;
        let time_s = read_time(&pred_dir.join(RUN_INFO_FILE))?;
        let row = evaluate_run(&record, &pred, &cfg, time_s).map_err(|e| CliError::data(format!("scene {id}: {e}")))?;
        Ok((id.clone(), row))
    })
}

fn read_time(path: &Path) -> CliResult<f64> {
    if !path.is_file() {
        return Ok(0.0);
    }
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let info: RunInfo = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(info.time_s)
}

pub fn eval(args: &EvalArgs) -> CliResult<PathBuf> {
    let rows = eval_rows(args)?;
    let path = args.out.clone().unwrap_or_else(|| args.preds.join(RESULTS_FILE));
    write_text(&path, &results_csv(&rows))?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub param: SweepParam,
    pub values: Vec<String>,
    pub scenes: PathBuf,
    pub out: PathBuf,
    pub config: RunConfig,
    pub jobs: usize,
}

pub const TOGGLE_ARMS: [&str; 6] = ["baseline", "isg_only", "no_gm_no_sr", "gm_only", "sr_only", "full"];

impl SweepParam {
    pub fn name(&self) -> String {
        self.to_possible_value().expect("no skipped variants").get_name().to_string()
    }

    pub fn default_values(&self) -> Vec<String> {
        let list: &[&str] = match self {
            SweepParam::GuidedLayerMax => &["1", "2", "3", "4", "5", "8"],
            SweepParam::GuidedStepMax => &["5", "10", "15", "20", "25"],
            SweepParam::Alpha => &["0.1", "0.2", "0.3", "0.4", "0.5"],
            SweepParam::Sigma => &["0.5", "1.0", "1.5", "2.0", "2.5"],
            SweepParam::Toggles => &TOGGLE_ARMS,
        };
        list.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this parameter set to `value`.
    pub fn apply(&self, base: &RunConfig, value: &str) -> CliResult<RunConfig> {
        let bad = || CliError::usage(format!("invalid value {value:?} for --param {}", self.name()));
        let mut cfg = base.clone();
        match self {
            SweepParam::GuidedLayerMax => {
                cfg.guided_layer_max = value.parse().map_err(|_| bad())?;
                // Deeper windows need a deeper denoiser.
                cfg.n_layers = cfg.n_layers.max(cfg.guided_layer_max);
            }
            SweepParam::GuidedStepMax => cfg.guided_step_max = value.parse().map_err(|_| bad())?,
            SweepParam::Alpha => cfg.alpha = value.parse().map_err(|_| bad())?,
            SweepParam::Sigma => cfg.sigma = value.parse().map_err(|_| bad())?,
            SweepParam::Toggles => {
                let (isg, gm, sr, momentum) = match value {
                    "baseline" => (false, base.use_gm, base.use_sr, base.use_momentum),
                    "isg_only" => (true, false, false, false),
                    "no_gm_no_sr" => (true, false, false, true),
                    "gm_only" => (true, true, false, true),
                    "sr_only" => (true, false, true, true),
                    "full" => (true, true, true, true),
                    _ => return Err(bad()),
                };
                cfg.use_isg = isg;
                cfg.use_gm = gm;
                cfg.use_sr = sr;
                cfg.use_momentum = momentum;
            }
        }
        Ok(cfg)
    }
}

pub fn sweep_header() -> String {
    format!("value,{METRIC_COLUMNS}")
}

/// One run + eval per value under `<out>/<param>/<value>/`, then one mean row
/// per value in `<out>/sweep_<param>.csv`.
pub fn sweep(args: &SweepArgs) -> CliResult<PathBuf> {
    let values = if args.values.is_empty() { args.param.default_values() } else { args.values.clone() };
    let configs = values
        .iter()
        .map(|v| args.param.apply(&args.config, v))
        .collect::<CliResult<Vec<_>>>()?;
    let name = args.param.name();
    let mut csv = sweep_header();
    csv.push('\n');
    for (value, cfg) in values.iter().zip(configs) {
        let dir = args.out.join(&name).join(value);
        let run_args = RunArgs {
            scenes: args.scenes.clone(),
            out: dir.clone(),
            config: cfg,
            toggles: Toggles::default(),
            record_time: false,
            jobs: args.jobs,
        };
        let effective = run(&run_args)?;
        let rows = eval_rows(&EvalArgs {
            scenes: args.scenes.clone(),
            preds: dir.clone(),
            out: None,
            config: Some(effective),
            jobs: args.jobs,
        })?;
        write_text(&dir.join(RESULTS_FILE), &results_csv(&rows))?;
        let mean = MetricRow::mean(&rows.into_iter().map(|(_, r)| r).collect::<Vec<_>>());
        csv.push_str(&format!("{value},{}\n", mean.csv_cells()));
    }
    let path = args.out.join(format!("sweep_{name}.csv"));
    write_text(&path, &csv)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toggles_compose() {
        let mut cfg = RunConfig::default();
        Toggles { no_sgu: true, ..Default::default() }.apply(&mut cfg);
        assert!(cfg.use_isg && !cfg.use_gm && !cfg.use_sr && !cfg.use_momentum);
        let mut cfg = RunConfig::default();
        Toggles { no_isg: true, no_sr: true, ..Default::default() }.apply(&mut cfg);
        assert!(!cfg.use_isg && cfg.use_gm && !cfg.use_sr && cfg.use_momentum);
    }

    #[test]
    fn sweep_values_and_arms() {
        let base = RunConfig::default();
        assert_eq!(SweepParam::GuidedLayerMax.default_values().len(), 6);
        assert_eq!(SweepParam::Sigma.default_values().len(), 5);
        let deep = SweepParam::GuidedLayerMax.apply(&base, "8").unwrap();
        assert_eq!((deep.guided_layer_max, deep.n_layers), (8, 8));
        let shallow = SweepParam::GuidedLayerMax.apply(&base, "2").unwrap();
        assert_eq!(shallow.n_layers, base.n_layers);
        let full = SweepParam::Toggles.apply(&base, "full").unwrap();
        assert_eq!(full, base);
        let off = SweepParam::Toggles.apply(&base, "baseline").unwrap();
        assert!(!off.use_isg);
        let gm = SweepParam::Toggles.apply(&base, "gm_only").unwrap();
        assert!(gm.use_gm && !gm.use_sr);
        assert!(SweepParam::Toggles.apply(&base, "bogus").is_err());
        assert!(SweepParam::Alpha.apply(&base, "x").is_err());
        assert_eq!(SweepParam::GuidedStepMax.name(), "guided_step_max");
    }

    #[test]
    fn scene_ids_are_zero_padded() {
        assert_eq!(scene_id(7), "scene_007");
    }
}
