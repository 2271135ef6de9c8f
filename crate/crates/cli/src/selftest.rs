//! Invariant battery behind `instsep selftest`.
//!
//! Every check recomputes its expectation with an independent oracle (finite
//! differences, brute-force nearest neighbors, exhaustive assignment, closed
//! forms) and reports the worst deviation it saw.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::Instant;

use instsep::condition::{ConditionSet, InstanceMaskSet};
use instsep::denoiser::{Denoiser, DenoiserConfig};
use instsep::field::{gaussian_smooth, GaussianKernel1D, LatentField};
use instsep::isg::{fd_gradient_oracle, max_relative_error, separation_loss, spatial_weights};
use instsep::metrics::{chamfer, lcd, min_cost_assignment, ssr, PointSet};
use instsep::pipeline::{run_scene, RunConfig, RunOptions};
use instsep::rng::Rng;
use instsep::sampler::init_noise;
use instsep::scene::{generate_scene, SceneRecord, SceneSpec};
use instsep::sgu::{momentum_update, GuidanceConfig, GuidanceState};
use instsep::vae::{EMPTY_CODE, LATENT_CHANNELS};

#[derive(Debug, Clone, Default)]
pub struct Options {
    /// Substring filter on check names.
    pub filter: Option<String>,
    /// Test hook: perturb one analytic gradient entry by this amount.
    pub corrupt_gradient: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(&Options) -> Result<String, String>;

pub const CHECKS: [(&str, Check); 12] = [
    ("gradient-fd", check_gradient),
    ("kernel-sum", check_kernel_sum),
    ("kernel-constant", check_kernel_constant),
    ("kernel-impulse", check_kernel_impulse),
    ("peak-bound", check_peak_bound),
    ("w-normalization", check_w_normalization),
    ("metric-chamfer", check_chamfer),
    ("metric-lcd", check_lcd),
    ("metric-ssr", check_ssr),
    ("metric-hungarian", check_hungarian),
    ("momentum-recursion", check_momentum),
    ("determinism", check_determinism),
];

pub fn run_battery(opts: &Options) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|(name, _)| opts.filter.as_deref().is_none_or(|f| name.contains(f)))
        .map(|&(name, check)| {
            let t = Instant::now();
            let outcome = check(opts);
            let seconds = t.elapsed().as_secs_f64();
            match outcome {
                Ok(detail) => CheckResult { name, passed: true, detail, seconds },
                Err(detail) => CheckResult { name, passed: false, detail, seconds },
            }
        })
        .collect()
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "{:<20} {status}  {:>7.2}s  {}", r.name, r.seconds, r.detail);
    }
    let passed = results.iter().filter(|r| r.passed).count();
    let _ = writeln!(s, "{passed}/{} checks passed", results.len());
    s
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Seeded 4^3 latent with a 4x4 token grid: two instances plus background.
pub fn gradient_case(seed: u64) -> (LatentField, ConditionSet, InstanceMaskSet) {
    let mut rng = Rng::new(seed);
    let z = init_noise([4, 4, 4], LATENT_CHANNELS, &mut rng);
    let mut payloads = Vec::with_capacity(16);
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(), Vec::new()];
    for m in 0..16 {
        let r = rng.uniform();
        if r < 0.25 && m > 1 {
            payloads.push(EMPTY_CODE);
        } else {
            let k = if m < 2 { m } else { usize::from(r > 0.6) };
            let depth = rng.uniform();
            let sign = if k == 0 { 1.0 } else { -1.0 };
            payloads.push([1.0, (PI * depth).cos(), (PI * depth).sin(), sign]);
            owners[k].push(m);
        }
    }
    let cond = ConditionSet::on_grid((4, 4), payloads).expect("4x4 grid");
    let masks = InstanceMaskSet::from_indices(16, &owners).expect("both instances own tokens");
    (z, cond, masks)
}

pub const GRADIENT_SEEDS: [u64; 5] = [100, 101, 102, 103, 104];
pub const GRADIENT_LAYERS: [usize; 4] = [1, 2, 3, 4];

fn check_gradient(opts: &Options) -> Result<String, String> {
    let den = Denoiser::new(DenoiserConfig::default()).map_err(err)?;
    let mut worst = 0.0_f64;
    for seed in GRADIENT_SEEDS {
        let (z, cond, masks) = gradient_case(seed);
        let caps = den.capture(&z, &cond, &GRADIENT_LAYERS).map_err(err)?;
        let mut analytic = separation_loss(&caps, &masks, 1e-6).map_err(err)?.grad;
        if let Some(delta) = opts.corrupt_gradient {
            analytic.data_mut()[0] += delta;
        }
        let fd = fd_gradient_oracle(&z, &cond, &den, &masks, &GRADIENT_LAYERS, 1e-4, 1e-6).map_err(err)?;
        worst = worst.max(max_relative_error(&analytic, &fd));
    }
    ensure(worst < 1e-4, format!("max relative error {worst:.3e} over {} cases", GRADIENT_SEEDS.len()))
}

fn check_kernel_sum(_: &Options) -> Result<String, String> {
    let mut worst = 0.0_f64;
    for sigma in [0.3, 0.5, 1.0, 1.5, 2.0, 2.5, 4.0] {
        let k = GaussianKernel1D::new(sigma).map_err(err)?;
        worst = worst.max((k.weights().iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst <= 1e-12, format!("max |sum - 1| = {worst:.3e}"))
}

fn check_kernel_constant(_: &Options) -> Result<String, String> {
    let mut worst = 0.0_f64;
    for (value, sigma) in [(5.0, 1.5), (-0.7, 0.5), (123.25, 2.5)] {
        let f = LatentField::filled(2, [7, 6, 5], value);
        worst = worst.max(gaussian_smooth(&f, sigma).map_err(err)?.max_abs_diff(&f));
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:.3e}"))
}

fn check_kernel_impulse(_: &Options) -> Result<String, String> {
    let sigma: f64 = 1.5;
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let w0 = 1.0 / raw.iter().sum::<f64>();
    let mut f = LatentField::zeros(1, [11, 11, 11]);
    f.set(0, 5, 5, 5, 1.0);
    let center = gaussian_smooth(&f, sigma).map_err(err)?.get(0, 5, 5, 5);
    let diff = (center - w0.powi(3)).abs();
    ensure(diff <= 1e-12, format!("center {center:.15e}, |diff| {diff:.3e}"))
}

fn small_scene(seed: u64) -> Result<SceneRecord, String> {
    let spec = SceneSpec { dims: [8, 8, 8], token_grid: (8, 8), size_min: 3, size_max: 4, seed, ..SceneSpec::default() };
    generate_scene(&spec).map_err(err)
}

fn small_run_config() -> RunConfig {
    RunConfig { total_steps: 12, guided_step_max: 6, ..RunConfig::default() }
}

/// Worst violation of the peak-update bound over a run's step log, and of its
/// recomputation from the logged peak.
pub fn peak_bound_violation(log: &[instsep::sgu::StepLogEntry], cfg: &GuidanceConfig) -> (f64, f64) {
    let mut bound = f64::NEG_INFINITY;
    let mut recompute = 0.0_f64;
    for e in log {
        let cap = cfg.alpha * e.std_z;
        bound = bound.max(e.max_delta - cap);
        let expected = cap * e.mu_max / (e.mu_max + cfg.eps);
        recompute = recompute.max((e.max_delta - expected).abs());
    }
    (bound, recompute)
}

fn check_peak_bound(_: &Options) -> Result<String, String> {
    let mut steps = 0;
    let mut worst_bound = f64::NEG_INFINITY;
    let mut worst_recompute = 0.0_f64;
    for seed in 0..3 {
        let rec = small_scene(seed)?;
        for momentum in [true, false] {
            let cfg = RunConfig { use_momentum: momentum, ..small_run_config() };
            let out = run_scene(&rec, &cfg, &RunOptions::default()).map_err(err)?;
            let (b, r) = peak_bound_violation(out.state.log(), &cfg.guidance());
            steps += out.state.log().len();
            worst_bound = worst_bound.max(b);
            worst_recompute = worst_recompute.max(r);
        }
    }
    ensure(
        steps > 0 && worst_bound <= 1e-9 && worst_recompute <= 1e-9,
        format!("{steps} guided steps, max excess {worst_bound:.3e}, recompute error {worst_recompute:.3e}"),
    )
}

fn check_w_normalization(_: &Options) -> Result<String, String> {
    let den = Denoiser::new(DenoiserConfig::default()).map_err(err)?;
    let mut worst = 0.0_f64;
    let mut columns = 0;
    for seed in 0..100u64 {
        let (z, cond, masks) = gradient_case(1000 + seed);
        let layer = 1 + (seed as usize % 6);
        let caps = den.capture(&z, &cond, &[layer]).map_err(err)?;
        let w = spatial_weights(&caps[0], &masks, 1e-6).map_err(err)?;
        for s in w.column_sums() {
            if s > 0.0 {
                columns += 1;
                worst = worst.max((s - 1.0).abs());
            }
        }
        if w.w.iter().any(|&x| x < 0.0) {
            return Err(format!("negative weight in capture {seed}"));
        }
    }
    ensure(worst <= 1e-6, format!("{columns} columns, max |sum - 1| = {worst:.3e}"))
}

/// O(n m) Chamfer oracle.
pub fn brute_chamfer(x: &[[f64; 3]], y: &[[f64; 3]]) -> f64 {
    let dist = |a: &[f64; 3], b: &[f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let directed = |a: &[[f64; 3]], b: &[[f64; 3]]| {
        a.iter().map(|p| b.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / a.len() as f64
    };
    directed(x, y) + directed(y, x)
}

fn random_points(rng: &mut Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.5, 0.5)]).collect()
}

fn check_chamfer(_: &Options) -> Result<String, String> {
    let mut rng = Rng::new(2024);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let nx = rng.int_inclusive(1, 512);
        let ny = rng.int_inclusive(1, 512);
        let x = random_points(&mut rng, nx);
        let y = random_points(&mut rng, ny);
        let fast = chamfer(&PointSet::new(x.clone()).map_err(err)?, &PointSet::new(y.clone()).map_err(err)?).map_err(err)?;
        worst = worst.max((fast - brute_chamfer(&x, &y)).abs());
    }
    ensure(worst <= 1e-9, format!("100 pairs, max |diff| = {worst:.3e}"))
}

fn check_lcd(_: &Options) -> Result<String, String> {
    let a = [[0.1, 0.2, 0.3], [0.4, -0.1, 0.0]];
    let identical = lcd(&a, &a).map_err(err)?;
    let d = 0.37;
    let single = lcd(&[[0.0, 0.0, 0.0]], &[[d, 0.0, 0.0]]).map_err(err)?;
    let three = lcd(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], &[[0.0, 0.0, 0.0]]).map_err(err)?;
    ensure(
        identical == 0.0 && single == 2.0 * d && three == 0.5,
        format!("identical {identical}, singleton {single} (want {}), three-centroid {three}", 2.0 * d),
    )
}

fn check_ssr(_: &Options) -> Result<String, String> {
    let cases = [(3, 4, 0.75), (3, 3, 1.0), (0, 2, 0.0), (4, 3, 0.75)];
    for (p, g, want) in cases {
        let got = ssr(p, g).map_err(err)?;
        if got != want {
            return Err(format!("ssr({p}, {g}) = {got}, want {want}"));
        }
    }
    ensure(ssr(1, 0).is_err(), "4 cases exact, n_gt = 0 rejected".into())
}

/// Minimum total cost over all injective maps from the smaller side.
pub fn exhaustive_assignment(costs: &[f64], n: usize, m: usize) -> f64 {
    fn rec(cost: &dyn Fn(usize, usize) -> f64, rows: usize, cols: usize, row: usize, used: &mut [bool], acc: f64) -> f64 {
        if row == rows {
            return acc;
        }
        let mut best = f64::INFINITY;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                best = best.min(rec(cost, rows, cols, row + 1, used, acc + cost(row, c)));
                used[c] = false;
            }
        }
        best
    }
    if n <= m {
        rec(&|r, c| costs[r * m + c], n, m, 0, &mut vec![false; m], 0.0)
    } else {
        rec(&|r, c| costs[c * m + r], m, n, 0, &mut vec![false; n], 0.0)
    }
}

fn check_hungarian(_: &Options) -> Result<String, String> {
    let mut rng = Rng::new(6);
    let mut worst = 0.0_f64;
    for case in 0..50 {
        let n = rng.int_inclusive(1, 6);
        let m = rng.int_inclusive(1, 6);
        let costs: Vec<f64> = (0..n * m).map(|_| rng.uniform_range(0.0, 5.0)).collect();
        let pairs = min_cost_assignment(&costs, n, m);
        if pairs.len() != n.min(m) {
            return Err(format!("case {case}: {} pairs for {n}x{m}", pairs.len()));
        }
        let total: f64 = pairs.iter().map(|&(i, j)| costs[i * m + j]).sum();
        worst = worst.max((total - exhaustive_assignment(&costs, n, m)).abs());
    }
    ensure(worst <= 1e-9, format!("50 matrices, max cost gap {worst:.3e}"))
}

fn check_momentum(_: &Options) -> Result<String, String> {
    let cfg = GuidanceConfig::default();
    let mut state = GuidanceState::new(1, [1, 1, 1]);
    let one = LatentField::filled(1, [1, 1, 1], 1.0);
    let mut got = Vec::new();
    for _ in 0..3 {
        got.push(momentum_update(&mut state, &one, &cfg).map_err(err)?.data()[0]);
    }
    for (g, want) in got.iter().zip([0.1, 0.19, 0.271]) {
        if (g - want).abs() > 1e-12 {
            return Err(format!("constant-delta recursion gave {got:?}"));
        }
    }
    let mut rng = Rng::new(3);
    let mut state = GuidanceState::new(2, [3, 3, 3]);
    let kick = LatentField::random_uniform(2, [3, 3, 3], -1.0, 1.0, &mut rng);
    let mut prev = momentum_update(&mut state, &kick, &cfg).map_err(err)?;
    let zero = LatentField::zeros(2, [3, 3, 3]);
    for step in 0..20 {
        let next = momentum_update(&mut state, &zero, &cfg).map_err(err)?;
        let expected = prev.map(|x| cfg.beta * x);
        if next != expected {
            return Err(format!("zero-delta step {step} is not an exact factor-beta decay"));
        }
        prev = next;
    }
    Ok("0.1, 0.19, 0.271; 20 exact geometric decay steps".into())
}

fn check_determinism(_: &Options) -> Result<String, String> {
    let rec = small_scene(11)?;
    let again = small_scene(11)?;
    if rec != again {
        return Err("scene generation differs between identical seeds".into());
    }
    let cfg = small_run_config();
    let a = run_scene(&rec, &cfg, &RunOptions::default()).map_err(err)?;
    let b = run_scene(&rec, &cfg, &RunOptions::default()).map_err(err)?;
    if a.latent != b.latent || a.state.log_csv() != b.state.log_csv() {
        return Err("guided runs differ between identical seeds".into());
    }
    let off = RunConfig { use_isg: false, ..cfg.clone() };
    let off_sgu = RunConfig { use_gm: false, use_sr: false, use_momentum: false, ..off.clone() };
    let c = run_scene(&rec, &off, &RunOptions::default()).map_err(err)?;
    let d = run_scene(&rec, &off_sgu, &RunOptions::default()).map_err(err)?;
    ensure(c.latent == d.latent, "scene, guided and unguided runs bit-identical on rerun".into())
}
