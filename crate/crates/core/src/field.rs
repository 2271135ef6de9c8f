//! Dense channel-major latent grids and the grid arithmetic the guidance loop
//! is built on.
//!
//! Layout: `data[c * L + (d * H + h) * W + w]` with `L = D * H * W`. The same
//! spatial order defines the latent token index `v = (d * H + h) * W + w`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Spatial grid extent `(D, H, W)`.
pub type Dims = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct LatentField {
    channels: usize,
    dims: Dims,
    data: Vec<f64>,
}

impl LatentField {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self::filled(channels, dims, 0.0)
    }

    pub fn filled(channels: usize, dims: Dims, value: f64) -> Self {
        let n = channels * dims[0] * dims[1] * dims[2];
        Self { channels, dims, data: vec![value; n] }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<f64>) -> Result<Self> {
        let n = channels * dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} entries for {channels}x{dims:?}, got {}",
                data.len()
            )));
        }
        Ok(Self { channels, dims, data })
    }

    /// Seeded field with entries uniform in `[lo, hi)`.
    pub fn random_uniform(channels: usize, dims: Dims, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n = channels * dims[0] * dims[1] * dims[2];
        let data = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
        Self { channels, dims, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Number of latent tokens `L = D * H * W`.
    pub fn token_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let l = self.token_count();
        &self.data[c * l..(c + 1) * l]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let l = self.token_count();
        &mut self.data[c * l..(c + 1) * l]
    }

    pub fn token_index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, c: usize, d: usize, h: usize, w: usize) -> f64 {
        self.data[c * self.token_count() + self.token_index(d, h, w)]
    }

    pub fn set(&mut self, c: usize, d: usize, h: usize, w: usize, value: f64) {
        let i = c * self.token_count() + self.token_index(d, h, w);
        self.data[i] = value;
    }

    pub fn same_shape(&self, other: &LatentField) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn check_shape(&self, other: &LatentField) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{:?} vs {}x{:?}",
                self.channels, self.dims, other.channels, other.dims
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, s: f64) -> LatentField {
        self.map(|x| s * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentField {
        LatentField {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self + s * other`, shapes must agree.
    pub fn axpy(&self, s: f64, other: &LatentField) -> Result<LatentField> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + s * b).collect();
        Ok(LatentField { channels: self.channels, dims: self.dims, data })
    }

    pub fn max_abs_diff(&self, other: &LatentField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Population standard deviation over every entry (divides by N).
///
/// Two sequential passes: mean, then mean squared deviation.
pub fn field_std(f: &LatentField) -> Result<f64> {
    if f.is_empty() {
        return Err(Error::EmptyField);
    }
    let n = f.len() as f64;
    let mean = f.data.iter().sum::<f64>() / n;
    let var = f.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

pub fn field_max_abs(f: &LatentField) -> Result<f64> {
    if f.is_empty() {
        return Err(Error::EmptyField);
    }
    Ok(f.data.iter().fold(0.0_f64, |m, x| m.max(x.abs())))
}

/// Truncated, normalized 1D Gaussian with radius `ceil(3 sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel1D {
    sigma: f64,
    radius: usize,
    weights: Vec<f64>,
}

impl GaussianKernel1D {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidSigma(sigma));
        }
        let radius = (3.0 * sigma).ceil() as usize;
        let raw: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let x = i as f64 - radius as f64;
                (-x * x / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.into_iter().map(|w| w / total).collect();
        Ok(Self { sigma, radius, weights })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Weights indexed `0..=2R`; the center tap is at index `R`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at signed offset `i` from the center.
    pub fn at(&self, offset: isize) -> f64 {
        let r = self.radius as isize;
        if offset.abs() > r {
            0.0
        } else {
            self.weights[(offset + r) as usize]
        }
    }
}

/// Separable Gaussian blur along D, H and W of every channel, with
/// edge-replicate boundaries.
pub fn gaussian_smooth(f: &LatentField, sigma: f64) -> Result<LatentField> {
    let kernel = GaussianKernel1D::new(sigma)?;
    let [d, h, w] = f.dims;
    let mut out = f.clone();
    let mut scratch = Vec::new();
    for c in 0..f.channels {
        let chan = out.channel_mut(c);
        convolve_axis(chan, [d, h, w], 2, &kernel, &mut scratch);
        convolve_axis(chan, [d, h, w], 1, &kernel, &mut scratch);
        convolve_axis(chan, [d, h, w], 0, &kernel, &mut scratch);
    }
    Ok(out)
}

fn convolve_axis(
    chan: &mut [f64],
    dims: Dims,
    axis: usize,
    kernel: &GaussianKernel1D,
    line: &mut Vec<f64>,
) {
    let n = dims[axis];
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let r = kernel.radius as isize;
    let taps = kernel.weights();
    let outer: Vec<usize> = (0..chan.len()).filter(|i| (i / stride) % n == 0).collect();
    line.resize(n, 0.0);
    for base in outer {
        for (i, slot) in line.iter_mut().enumerate() {
            *slot = chan[base + i * stride];
        }
        for i in 0..n {
            let mut acc = 0.0;
            for (t, wgt) in taps.iter().enumerate() {
                let j = (i as isize + t as isize - r).clamp(0, n as isize - 1) as usize;
                acc += wgt * line[j];
            }
            chan[base + i * stride] = acc;
        }
    }
}

/// JSON sidecar describing a raw `.f64` blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub layout: String,
}

impl BlobHeader {
    pub fn new(shape: Vec<usize>) -> Self {
        Self {
            shape,
            dtype: "f64".to_string(),
            layout: "channel-major,row-major".to_string(),
        }
    }
}

/// Write `<stem>.json` and `<stem>.f64` (little-endian IEEE doubles).
pub fn write_blob(stem: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::Shape(format!("blob shape {shape:?} vs {} values", data.len())));
    }
    let header = BlobHeader::new(shape.to_vec());
    fs::write(stem.with_extension("json"), serde_json::to_string(&header)? + "\n")?;
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(stem.with_extension("f64"), bytes)?;
    Ok(())
}

pub fn read_blob(stem: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let header: BlobHeader = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    if header.dtype != "f64" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let bytes = fs::read(stem.with_extension("f64"))?;
    let expected: usize = header.shape.iter().product();
    if bytes.len() != expected * 8 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, header shape {:?} needs {}",
            stem.display(),
            bytes.len(),
            header.shape,
            expected * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header.shape, data))
}

impl LatentField {
    pub fn save(&self, stem: &Path) -> Result<()> {
        let [d, h, w] = self.dims;
        write_blob(stem, &[self.channels, d, h, w], &self.data)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (shape, data) = read_blob(stem)?;
        if shape.len() != 4 {
            return Err(Error::Format(format!("latent blob needs a 4D shape, got {shape:?}")));
        }
        LatentField::from_vec(shape[0], [shape[1], shape[2], shape[3]], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn impulse(n: usize) -> LatentField {
        let mut f = LatentField::zeros(1, [n, n, n]);
        f.set(0, n / 2, n / 2, n / 2, 1.0);
        f
    }

    #[test]
    fn std_of_constant_and_two_point() {
        let f = LatentField::filled(2, [3, 3, 3], 5.0);
        assert_eq!(field_std(&f).unwrap(), 0.0);
        let data: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let g = LatentField::from_vec(1, [4, 4, 4], data).unwrap();
        assert!((field_std(&g).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn std_matches_two_pass_oracle() {
        let mut rng = Rng::new(11);
        let f = LatentField::random_uniform(4, [4, 4, 1], -1.0, 1.0, &mut rng);
        // Oracle: mean via pairwise halving, then explicit second pass.
        fn pairwise(xs: &[f64]) -> f64 {
            if xs.len() <= 2 {
                return xs.iter().sum();
            }
            let (a, b) = xs.split_at(xs.len() / 2);
            pairwise(a) + pairwise(b)
        }
        let n = f.len() as f64;
        let mean = pairwise(f.data()) / n;
        let sq: Vec<f64> = f.data().iter().map(|x| (x - mean).powi(2)).collect();
        let oracle = (pairwise(&sq) / n).sqrt();
        assert!((field_std(&f).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn max_abs_cases() {
        assert_eq!(field_max_abs(&LatentField::zeros(1, [2, 2, 2])).unwrap(), 0.0);
        let f = LatentField::from_vec(1, [2, 1, 1], vec![-3.0, 2.0]).unwrap();
        assert_eq!(field_max_abs(&f).unwrap(), 3.0);
        let mut rng = Rng::new(5);
        let g = LatentField::random_uniform(3, [5, 4, 3], -7.0, 7.0, &mut rng);
        let mut scan = 0.0_f64;
        for &x in g.data() {
            if x.abs() > scan {
                scan = x.abs();
            }
        }
        assert_eq!(field_max_abs(&g).unwrap(), scan);
    }

    #[test]
    fn empty_field_errors() {
        let f = LatentField::zeros(0, [2, 2, 2]);
        assert!(matches!(field_std(&f), Err(Error::EmptyField)));
        assert!(matches!(field_max_abs(&f), Err(Error::EmptyField)));
    }

    #[test]
    fn kernel_normalized_and_symmetric() {
        for sigma in [0.3, 0.5, 1.0, 1.5, 2.5] {
            let k = GaussianKernel1D::new(sigma).unwrap();
            assert_eq!(k.radius(), (3.0 * sigma).ceil() as usize);
            let sum: f64 = k.weights().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let r = k.radius() as isize;
            for i in 1..=r {
                assert_eq!(k.at(i), k.at(-i));
                assert!(k.at(0) >= k.at(i));
            }
        }
    }

    #[test]
    fn invalid_sigma() {
        let f = LatentField::zeros(1, [2, 2, 2]);
        assert!(matches!(gaussian_smooth(&f, 0.0), Err(Error::InvalidSigma(_))));
        assert!(matches!(gaussian_smooth(&f, -1.0), Err(Error::InvalidSigma(_))));
    }

    #[test]
    fn constant_field_is_fixed_point() {
        let f = LatentField::filled(2, [5, 6, 7], 3.25);
        let g = gaussian_smooth(&f, 1.5).unwrap();
        assert!(g.max_abs_diff(&f) < 1e-12);
    }

    #[test]
    fn impulse_center_is_cubed_center_tap() {
        let sigma: f64 = 1.5;
        // Oracle weights computed independently of GaussianKernel1D.
        let r = (3.0 * sigma).ceil() as i32;
        let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let w0 = 1.0 / raw.iter().sum::<f64>();
        let out = gaussian_smooth(&impulse(11), sigma).unwrap();
        assert!((out.get(0, 5, 5, 5) - w0.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn interior_shift_equivariance() {
        let n = 15;
        let a = gaussian_smooth(&impulse(n), 1.5).unwrap();
        let mut shifted = LatentField::zeros(1, [n, n, n]);
        shifted.set(0, n / 2, n / 2 + 1, n / 2, 1.0);
        let b = gaussian_smooth(&shifted, 1.5).unwrap();
        for d in 0..n {
            for h in 0..n - 1 {
                for w in 0..n {
                    assert_eq!(a.get(0, d, h, w), b.get(0, d, h + 1, w));
                }
            }
        }
    }

    #[test]
    fn smoothing_is_linear() {
        let mut rng = Rng::new(17);
        for _ in 0..5 {
            let f = LatentField::random_uniform(2, [6, 5, 7], -1.0, 1.0, &mut rng);
            let g = LatentField::random_uniform(2, [6, 5, 7], -1.0, 1.0, &mut rng);
            let (a, b) = (rng.uniform_range(-3.0, 3.0), rng.uniform_range(-3.0, 3.0));
            let combo = f.scaled(a).axpy(b, &g).unwrap();
            let lhs = gaussian_smooth(&combo, 1.5).unwrap();
            let rhs = gaussian_smooth(&f, 1.5).unwrap().scaled(a).axpy(b, &gaussian_smooth(&g, 1.5).unwrap()).unwrap();
            assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }
    }

    #[test]
    fn smoothing_is_non_expansive() {
        let mut rng = Rng::new(23);
        for i in 0..100 {
            let f = LatentField::random_uniform(1, [5, 6, 4], -2.0, 2.0, &mut rng);
            let sigma = 0.5 + (i % 4) as f64 * 0.5;
            let out = gaussian_smooth(&f, sigma).unwrap();
            assert!(field_max_abs(&out).unwrap() <= field_max_abs(&f).unwrap());
        }
    }

    #[test]
    fn statistics_ignore_entry_order() {
        let mut rng = Rng::new(29);
        let f = LatentField::random_uniform(2, [4, 4, 4], -5.0, 5.0, &mut rng);
        let mut rev = f.data().to_vec();
        rev.reverse();
        let g = LatentField::from_vec(2, [4, 4, 4], rev).unwrap();
        assert!((field_std(&f).unwrap() - field_std(&g).unwrap()).abs() < 1e-12);
        assert_eq!(field_max_abs(&f).unwrap(), field_max_abs(&g).unwrap());
    }

    #[test]
    fn blob_round_trip() {
        let dir = std::env::temp_dir().join(format!("instsep-blob-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let mut rng = Rng::new(3);
        let f = LatentField::random_uniform(2, [3, 4, 5], -1.0, 1.0, &mut rng);
        let stem = dir.join("z");
        f.save(&stem).unwrap();
        let header = fs::read_to_string(stem.with_extension("json")).unwrap();
        assert_eq!(
            header.trim(),
            r#"{"shape":[2,3,4,5],"dtype":"f64","layout":"channel-major,row-major"}"#
        );
        let g = LatentField::load(&stem).unwrap();
        assert_eq!(f, g);
        fs::remove_dir_all(dir).ok();
    }
}
