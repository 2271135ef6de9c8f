//! Deterministic joint-attention denoiser.
//!
//! Every layer embeds latent tokens as `[pe(d, h, w), z_v, 1]` and condition
//! tokens as `[pe(depth code), pe(y, x), G p_m, 0]`, forms `Q` and `K`, and takes a
//! row softmax of `Q K^T / (sqrt(d) * temperature)` over the joint sequence of
//! `M` condition keys and `L` latent keys. The latent-to-condition block of that
//! softmax (`A_zc`) is what guidance reads and differentiates; the clean-sample
//! readout of the final layer is
//!
//! ```text
//! x0[v] = sum_m A_zc[v, m] * payload[m] + (1 - sum_m A_zc[v, m]) * EMPTY_CODE
//! ```
//!
//! Latent keys carry only position plus a scalar `b + h * z0_u` in the constant
//! slot. Their logits are therefore `sum_axis T_axis(v_axis, u_axis) + c_u`,
//! and the latent part of each row denominator factors into three per-axis
//! contractions, computed exactly in `O(L * (D + H + W))`.
//!
//! Positional encodings use [`PE_FREQS`] harmonics `omega_f = pi (f + 1)` of the
//! normalized voxel/token center, weighted so that the positional dot product
//! along one axis is `sum_f a_f cos(omega_f * delta)` with Fejér weights
//! `a_f` normalized to `sum a_f = 1`.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::condition::ConditionSet;
use crate::error::{Error, Result};
use crate::field::{Dims, LatentField};
use crate::rng::Rng;
use crate::vae::{EMPTY_CODE, LATENT_CHANNELS};

pub const PE_FREQS: usize = 8;
const AXIS_WIDTH: usize = 2 * PE_FREQS;
const CONTENT_SLOT: usize = 3 * AXIS_WIDTH;
const CONST_SLOT: usize = CONTENT_SLOT + LATENT_CHANNELS;
/// Smallest embedding width that holds positions, content and the bias slot.
pub const MIN_WIDTH: usize = CONST_SLOT + 1;

/// Base logit gains shared by all layers before per-layer jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionGains {
    /// Image-plane positional match between a voxel and a condition token.
    pub cond_position: f64,
    /// Depth match between a voxel and a token's depth code.
    pub depth: f64,
    /// Fraction of `depth` subtracted from every depth-coded token, so that
    /// a depth mismatch lowers the logit below that of an uncoded token.
    pub depth_offset: f64,
    /// Positional match between latent tokens.
    pub latent_position: f64,
    /// How far below the weakest condition logit (at zero content) the best
    /// single latent key sits.
    pub latent_margin: f64,
    /// Latent-key response to the key token's occupancy channel.
    pub latent_content: f64,
    /// Diagonal of the content coupling between `z_v` and token payloads.
    pub content: [f64; LATENT_CHANNELS],
    /// Multiplier on the seeded `N(0, 1/d)` content coupling.
    pub content_noise: f64,
    /// Relative per-layer gain jitter.
    pub layer_jitter: f64,
}

impl Default for AttentionGains {
    fn default() -> Self {
        Self {
            cond_position: 10.0,
            depth: 12.0,
            depth_offset: 0.8,
            latent_position: 2.0,
            latent_margin: 1.0,
            latent_content: 0.0,
            content: [1.0, 0.5, 0.5, 1.0],
            content_noise: 1.0,
            layer_jitter: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub n_layers: usize,
    pub d: usize,
    pub attn_temperature: f64,
    pub weight_seed: u64,
    #[serde(default)]
    pub gains: AttentionGains,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            d: 64,
            attn_temperature: 1.0,
            weight_seed: 0,
            gains: AttentionGains::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.d < MIN_WIDTH {
            return Err(Error::Config(format!(
                "embedding width d = {} is below the {MIN_WIDTH} needed for positions and content",
                self.d
            )));
        }
        if !(self.attn_temperature > 0.0) || !self.attn_temperature.is_finite() {
            return Err(Error::Config(format!(
                "attn_temperature must be positive, got {}",
                self.attn_temperature
            )));
        }
        Ok(())
    }
}

/// Per-layer projection parameters, drawn once from the weight seed.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub layer: usize,
    pub cond_position: f64,
    pub depth: f64,
    pub depth_offset: f64,
    pub latent_position: f64,
    pub latent_bias: f64,
    pub latent_content: f64,
    /// `content[c][c']` couples query content channel `c` with payload channel `c'`.
    pub content: [[f64; LATENT_CHANNELS]; LATENT_CHANNELS],
}

impl LayerWeights {
    pub fn generate(cfg: &DenoiserConfig, layer: usize) -> Self {
        let g = &cfg.gains;
        let mut rng = Rng::derived(cfg.weight_seed, layer as u64);
        let jitter = |rng: &mut Rng| 1.0 + g.layer_jitter * (2.0 * rng.uniform() - 1.0);
        let cond_position = g.cond_position * jitter(&mut rng);
        let depth = g.depth * jitter(&mut rng);
        let latent_position = g.latent_position * jitter(&mut rng);
        let latent_content = g.latent_content * jitter(&mut rng);
        let noise_scale = g.content_noise / (cfg.d as f64).sqrt();
        let mut content = [[0.0; LATENT_CHANNELS]; LATENT_CHANNELS];
        for (c, row) in content.iter_mut().enumerate() {
            for (cp, slot) in row.iter_mut().enumerate() {
                let diag = if c == cp { g.content[c] * jitter(&mut rng) } else { 0.0 };
                *slot = diag + noise_scale * rng.normal();
            }
        }
        // Condition logits at zero content are >= -(2 cond_position + depth (1 + depth_offset)),
        // latent logits are <= 3 latent_position + latent_bias.
        let depth_offset = g.depth_offset;
        let latent_bias = -(3.0 * latent_position + 2.0 * cond_position + depth * (1.0 + depth_offset)) - g.latent_margin;
        Self { layer, cond_position, depth, depth_offset, latent_position, latent_bias, latent_content, content }
    }
}

fn fejer_weights() -> [f64; PE_FREQS] {
    let mut a = [0.0; PE_FREQS];
    for (f, slot) in a.iter_mut().enumerate() {
        *slot = (PE_FREQS - f) as f64;
    }
    let total: f64 = a.iter().sum();
    a.map(|x| x / total)
}

/// Weighted sinusoidal encoding of a normalized coordinate.
fn encode_axis(x: f64) -> [f64; AXIS_WIDTH] {
    let a = fejer_weights();
    let mut out = [0.0; AXIS_WIDTH];
    for f in 0..PE_FREQS {
        let omega = PI * (f + 1) as f64;
        let s = a[f].sqrt();
        out[2 * f] = s * (omega * x).sin();
        out[2 * f + 1] = s * (omega * x).cos();
    }
    out
}

fn center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// Cached latent-key factors for one layer at one latent.
#[derive(Debug, Clone)]
struct LatentKeys {
    dims: Dims,
    /// `exp(t_a[x][x'] - rowmax_a[x])` per axis, row-major `n_a x n_a`.
    tables: [Vec<f64>; 3],
    rowmax: [Vec<f64>; 3],
    /// `exp(c_u - cmax)` for the content part of the constant slot.
    content: Vec<f64>,
    cmax: f64,
    /// Coefficient of `z0_u` inside `c_u`.
    content_coef: f64,
    /// `sum_u prod_a E_a * content` per row.
    conv: Vec<f64>,
}

impl LatentKeys {
    fn build(weights: &LayerWeights, z0: &[f64], dims: Dims, scale: f64, sqrt_d: f64) -> Self {
        let tables_and_max = |n: usize| {
            let enc: Vec<_> = (0..n).map(|i| encode_axis(center(i, n))).collect();
            let mut t = vec![0.0; n * n];
            let mut rowmax = vec![f64::NEG_INFINITY; n];
            for x in 0..n {
                for xp in 0..n {
                    let dot: f64 = enc[x]
                        .iter()
                        .zip(&enc[xp])
                        .map(|(q, k)| q * k * weights.latent_position * sqrt_d)
                        .sum();
                    let logit = dot * scale;
                    t[x * n + xp] = logit;
                    rowmax[x] = rowmax[x].max(logit);
                }
            }
            for x in 0..n {
                for xp in 0..n {
                    t[x * n + xp] = (t[x * n + xp] - rowmax[x]).exp();
                }
            }
            (t, rowmax)
        };
        let (t0, m0) = tables_and_max(dims[0]);
        let (t1, m1) = tables_and_max(dims[1]);
        let (t2, m2) = tables_and_max(dims[2]);
        let bias = weights.latent_bias * sqrt_d * scale;
        let content_coef = weights.latent_content * sqrt_d * scale;
        let raw: Vec<f64> = z0.iter().map(|&z| bias + content_coef * z).collect();
        let cmax = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let content: Vec<f64> = raw.iter().map(|c| (c - cmax).exp()).collect();
        let tables = [t0, t1, t2];
        let conv = contract(&tables, dims, &content, false);
        Self { dims, tables, rowmax: [m0, m1, m2], content, cmax, content_coef, conv }
    }

    fn log_partition(&self, v: usize) -> f64 {
        let [_, h, w] = self.dims;
        let (dd, hh, ww) = (v / (h * w), (v / w) % h, v % w);
        self.rowmax[0][dd] + self.rowmax[1][hh] + self.rowmax[2][ww] + self.cmax + self.conv[v].ln()
    }
}

/// `out[v] = sum_u prod_a E_a[v_a][u_a] * f[u]`, or with each `E_a`
/// transposed when `transpose` is set.
fn contract(tables: &[Vec<f64>; 3], dims: Dims, f: &[f64], transpose: bool) -> Vec<f64> {
    let [nd, nh, nw] = dims;
    let e = |a: usize, n: usize, x: usize, xp: usize| {
        if transpose {
            tables[a][xp * n + x]
        } else {
            tables[a][x * n + xp]
        }
    };
    let idx = |d: usize, h: usize, w: usize| (d * nh + h) * nw + w;
    let mut a1 = vec![0.0; f.len()];
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let mut acc = 0.0;
                for wp in 0..nw {
                    acc += e(2, nw, w, wp) * f[idx(d, h, wp)];
                }
                a1[idx(d, h, w)] = acc;
            }
        }
    }
    let mut a2 = vec![0.0; f.len()];
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let mut acc = 0.0;
                for hp in 0..nh {
                    acc += e(1, nh, h, hp) * a1[idx(d, hp, w)];
                }
                a2[idx(d, h, w)] = acc;
            }
        }
    }
    let mut out = vec![0.0; f.len()];
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let mut acc = 0.0;
                for dp in 0..nd {
                    acc += e(0, nd, d, dp) * a2[idx(dp, h, w)];
                }
                out[idx(d, h, w)] = acc;
            }
        }
    }
    out
}

/// Cross-attention of one layer plus everything its backward pass needs.
#[derive(Debug, Clone)]
pub struct AttentionCapture {
    layer: usize,
    /// `A_zc`, `L x M`.
    attention: Array2<f64>,
    /// Softmax mass on the `L` latent-key columns of each row.
    latent_mass: Vec<f64>,
    log_denominator: Vec<f64>,
    queries: Arc<Array2<f64>>,
    cond_keys: Array2<f64>,
    latent_keys: LatentKeys,
    scale: f64,
    weights: Arc<LayerWeights>,
}

impl AttentionCapture {
    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn attention(&self) -> &Array2<f64> {
        &self.attention
    }

    pub fn latent_mass(&self) -> &[f64] {
        &self.latent_mass
    }

    /// Log of the full row softmax denominator over all `M + L` columns.
    pub fn log_denominator(&self) -> &[f64] {
        &self.log_denominator
    }

    pub fn queries(&self) -> &Array2<f64> {
        &self.queries
    }

    pub fn cond_keys(&self) -> &Array2<f64> {
        &self.cond_keys
    }

    pub fn weights(&self) -> &LayerWeights {
        &self.weights
    }

    pub fn token_count(&self) -> usize {
        self.attention.nrows()
    }

    pub fn cond_count(&self) -> usize {
        self.attention.ncols()
    }

    pub fn dims(&self) -> Dims {
        self.latent_keys.dims
    }

    /// Back-propagate `dL/dA_zc` (latent-key columns carry no upstream
    /// gradient) through the full row softmax, the query content slots and
    /// the latent-key content term, returning `dL/dz`.
    pub fn backward(&self, d_attention: &Array2<f64>) -> Result<LatentField> {
        if d_attention.dim() != self.attention.dim() {
            return Err(Error::Shape(format!(
                "attention gradient {:?} vs capture {:?}",
                d_attention.dim(),
                self.attention.dim()
            )));
        }
        let l = self.token_count();
        // g_bar[v] = sum_j A[v, j] g[v, j]; latent columns have g = 0.
        let g_bar: Vec<f64> = self
            .attention
            .outer_iter()
            .zip(d_attention.outer_iter())
            .map(|(a, g)| a.iter().zip(g.iter()).map(|(x, y)| x * y).sum())
            .collect();
        let mut d_logits = &self.attention * d_attention;
        for (mut row, (a, gb)) in d_logits.outer_iter_mut().zip(self.attention.outer_iter().zip(&g_bar)) {
            row.zip_mut_with(&a, |ds, &av| *ds -= av * gb);
        }
        let content_keys = self.cond_keys.slice(ndarray::s![.., CONTENT_SLOT..CONST_SLOT]);
        let d_content = d_logits.dot(&content_keys) * self.scale;

        let mut grad = LatentField::zeros(LATENT_CHANNELS, self.dims());
        for c in 0..LATENT_CHANNELS {
            let chan = grad.channel_mut(c);
            for (v, slot) in chan.iter_mut().enumerate() {
                *slot = d_content[[v, c]];
            }
        }

        let lk = &self.latent_keys;
        if lk.content_coef != 0.0 {
            // dL/ds[v, u] = -A[v, u] g_bar[v], with
            // A[v, u] = prod_a E_a[v_a][u_a] * content[u] * latent_mass[v] / conv[v].
            let r: Vec<f64> = (0..l)
                .map(|v| {
                    if lk.conv[v] > 0.0 {
                        g_bar[v] * self.latent_mass[v] / lk.conv[v]
                    } else {
                        0.0
                    }
                })
                .collect();
            let back = contract(&lk.tables, lk.dims, &r, true);
            let chan = grad.channel_mut(0);
            for u in 0..l {
                chan[u] -= lk.content_coef * lk.content[u] * back[u];
            }
        }
        Ok(grad)
    }
}

/// Query matrix `[pe(v), z_v, 1]`, shared by all layers.
fn build_queries(z: &LatentField, d: usize) -> Array2<f64> {
    let dims = z.dims();
    let l = z.token_count();
    let enc: [Vec<[f64; AXIS_WIDTH]>; 3] =
        [0, 1, 2].map(|a| (0..dims[a]).map(|i| encode_axis(center(i, dims[a]))).collect());
    let mut q = Array2::zeros((l, d));
    for v in 0..l {
        let (dd, hh, ww) = (v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]);
        let mut row = q.row_mut(v);
        for (a, coord) in [dd, hh, ww].into_iter().enumerate() {
            for k in 0..AXIS_WIDTH {
                row[a * AXIS_WIDTH + k] = enc[a][coord][k];
            }
        }
        for c in 0..LATENT_CHANNELS {
            row[CONTENT_SLOT + c] = z.channel(c)[v];
        }
        row[CONST_SLOT] = 1.0;
    }
    q
}

fn build_cond_keys(cond: &ConditionSet, weights: &LayerWeights, d: usize) -> Array2<f64> {
    let sqrt_d = (d as f64).sqrt();
    let mut k = Array2::zeros((cond.len(), d));
    for (m, (p, pos)) in cond.payloads().iter().zip(cond.pos2d()).enumerate() {
        let mut row = k.row_mut(m);
        // Depth axis: the payload's (cos, sin) depth code, decoded to a depth in
        // [0, 1] and re-encoded with the full harmonic set. Its length (capped
        // at 1) scales the term, so background codes carry no depth preference.
        let amplitude = p[1].hypot(p[2]).min(1.0);
        if amplitude > 0.0 {
            let depth = p[2].atan2(p[1]).clamp(0.0, PI) / PI;
            for (i, e) in encode_axis(depth).iter().enumerate() {
                row[i] = e * amplitude * weights.depth;
            }
            row[CONST_SLOT] = -amplitude * weights.depth * weights.depth_offset;
        }
        let ey = encode_axis(pos[0]);
        let ex = encode_axis(pos[1]);
        for i in 0..AXIS_WIDTH {
            row[AXIS_WIDTH + i] = ey[i] * weights.cond_position;
            row[2 * AXIS_WIDTH + i] = ex[i] * weights.cond_position;
        }
        for c in 0..LATENT_CHANNELS {
            row[CONTENT_SLOT + c] = (0..LATENT_CHANNELS).map(|cp| weights.content[c][cp] * p[cp]).sum();
        }
        row.mapv_inplace(|x| x * sqrt_d);
    }
    k
}

/// The toy denoiser with its layer weights materialized.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    layers: Vec<Arc<LayerWeights>>,
}

/// Result of one denoiser pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub x0_hat: LatentField,
    pub captures: Vec<AttentionCapture>,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (1..=cfg.n_layers).map(|l| Arc::new(LayerWeights::generate(&cfg, l))).collect();
        Ok(Self { cfg, layers })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn layer_weights(&self, layer: usize) -> Result<&LayerWeights> {
        self.check_layer(layer)?;
        Ok(&self.layers[layer - 1])
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.cfg.n_layers {
            Err(Error::BadLayer { layer, n_layers: self.cfg.n_layers })
        } else {
            Ok(())
        }
    }

    fn check_inputs(&self, z: &LatentField, cond: &ConditionSet) -> Result<()> {
        if z.channels() != LATENT_CHANNELS {
            return Err(Error::Shape(format!(
                "denoiser expects {LATENT_CHANNELS} latent channels, got {}",
                z.channels()
            )));
        }
        if z.token_count() == 0 || cond.is_empty() {
            return Err(Error::Shape("denoiser needs latent and condition tokens".into()));
        }
        Ok(())
    }

    /// Captures for the given layers (1-based, any order, duplicates ignored),
    /// returned in ascending layer order.
    pub fn capture(&self, z: &LatentField, cond: &ConditionSet, layers: &[usize]) -> Result<Vec<AttentionCapture>> {
        self.check_inputs(z, cond)?;
        for &l in layers {
            self.check_layer(l)?;
        }
        let mut wanted: Vec<usize> = layers.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        let queries = Arc::new(build_queries(z, self.cfg.d));
        Ok(wanted.into_iter().map(|l| self.attend(z, cond, l, &queries)).collect())
    }

    pub fn forward(&self, z: &LatentField, cond: &ConditionSet, capture_layers: &[usize]) -> Result<ForwardOutput> {
        self.check_inputs(z, cond)?;
        for &l in capture_layers {
            self.check_layer(l)?;
        }
        let final_layer = self.cfg.n_layers;
        let mut wanted: Vec<usize> = capture_layers.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        let queries = Arc::new(build_queries(z, self.cfg.d));
        let mut captures: Vec<AttentionCapture> =
            wanted.iter().map(|&l| self.attend(z, cond, l, &queries)).collect();
        let x0_hat = match captures.iter().find(|c| c.layer == final_layer) {
            Some(cap) => readout(cap, cond, z),
            None => readout(&self.attend(z, cond, final_layer, &queries), cond, z),
        };
        captures.shrink_to_fit();
        Ok(ForwardOutput { x0_hat, captures })
    }

    fn attend(&self, z: &LatentField, cond: &ConditionSet, layer: usize, queries: &Arc<Array2<f64>>) -> AttentionCapture {
        let weights = Arc::clone(&self.layers[layer - 1]);
        let d = self.cfg.d;
        let sqrt_d = (d as f64).sqrt();
        let scale = 1.0 / (sqrt_d * self.cfg.attn_temperature);
        let cond_keys = build_cond_keys(cond, &weights, d);
        let mut logits = queries.dot(&cond_keys.t());
        logits.mapv_inplace(|x| x * scale);
        let latent_keys = LatentKeys::build(&weights, z.channel(0), z.dims(), scale, sqrt_d);

        let l = z.token_count();
        let mut log_denominator = vec![0.0; l];
        let mut latent_mass = vec![0.0; l];
        for (v, mut row) in logits.axis_iter_mut(Axis(0)).enumerate() {
            let lat = latent_keys.log_partition(v);
            let mx = row.iter().copied().fold(lat, f64::max);
            let total: f64 = row.iter().map(|s| (s - mx).exp()).sum::<f64>() + (lat - mx).exp();
            let log_z = mx + total.ln();
            row.mapv_inplace(|s| (s - mx).exp() / total);
            log_denominator[v] = log_z;
            latent_mass[v] = (lat - mx).exp() / total;
        }
        AttentionCapture {
            layer,
            attention: logits,
            latent_mass,
            log_denominator,
            queries: Arc::clone(queries),
            cond_keys,
            latent_keys,
            scale,
            weights,
        }
    }
}

/// Convex combination of token payloads and the empty code.
fn readout(cap: &AttentionCapture, cond: &ConditionSet, z: &LatentField) -> LatentField {
    let m = cond.len();
    let mut payload = Array2::zeros((m, LATENT_CHANNELS));
    for (i, p) in cond.payloads().iter().enumerate() {
        for c in 0..LATENT_CHANNELS {
            payload[[i, c]] = p[c];
        }
    }
    let mixed = cap.attention.dot(&payload);
    let mut x0 = LatentField::zeros(LATENT_CHANNELS, z.dims());
    for v in 0..z.token_count() {
        let mass: f64 = cap.attention.row(v).sum();
        for c in 0..LATENT_CHANNELS {
            x0.channel_mut(c)[v] = mixed[[v, c]] + (1.0 - mass) * EMPTY_CODE[c];
        }
    }
    x0
}

/// Run the denoiser once, returning the readout and the requested captures.
pub fn denoiser_forward(
    z: &LatentField,
    cond: &ConditionSet,
    cfg: &DenoiserConfig,
    capture_layers: &[usize],
) -> Result<(LatentField, Vec<AttentionCapture>)> {
    let out = Denoiser::new(cfg.clone())?.forward(z, cond, capture_layers)?;
    Ok((out.x0_hat, out.captures))
}
