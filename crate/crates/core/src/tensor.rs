//! Dense NCHW tensors, reproducible random fills and the `.wqt` file format.
//!
//! File layout (all little-endian):
//!
//! ```text
//! offset 0   8 bytes  magic "WINOQT01"
//! offset 8   u32      rank (1..=4)
//! offset 12  u64*rank extents
//! ...        f32*prod payload, row-major
//! ```

use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WinoError};

pub const TENSOR_MAGIC: &[u8; 8] = b"WINOQT01";
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution {
    Gaussian { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

/// Distribution plus seed. The generator is ChaCha8 seeded through
/// `seed_from_u64`; gaussians use the Box-Muller transform on pairs of
/// 53-bit uniforms, consuming both the cosine and the sine branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngSpec {
    #[serde(flatten)]
    pub dist: Distribution,
    pub seed: u64,
}

impl RngSpec {
    pub fn gaussian(mean: f64, std: f64, seed: u64) -> Self {
        RngSpec {
            dist: Distribution::Gaussian { mean, std },
            seed,
        }
    }

    pub fn uniform(lo: f64, hi: f64, seed: u64) -> Self {
        RngSpec {
            dist: Distribution::Uniform { lo, hi },
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        RngSpec { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        match self.dist {
            Distribution::Gaussian { mean, std } => {
                if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
                    return Err(WinoError::Config(format!(
                        "gaussian needs finite mean and std > 0, got mean={mean} std={std}"
                    )));
                }
            }
            Distribution::Uniform { lo, hi } => {
                if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                    return Err(WinoError::Config(format!(
                        "uniform needs finite lo < hi, got lo={lo} hi={hi}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sampler(&self) -> Sampler {
        Sampler::new(*self)
    }
}

/// Stateful draw from an [`RngSpec`].
pub struct Sampler {
    rng: ChaCha8Rng,
    dist: Distribution,
    spare: Option<f64>,
}

impl Sampler {
    fn new(spec: RngSpec) -> Self {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            dist: spec.dist,
            spare: None,
        }
    }

    /// Uniform in [0, 1) with 53 random bits.
    fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn next_f64(&mut self) -> f64 {
        match self.dist {
            Distribution::Gaussian { mean, std } => mean + std * self.standard_normal(),
            Distribution::Uniform { lo, hi } => lo + (hi - lo) * self.unit(),
        }
    }

    pub fn fill_f32(&mut self, out: &mut [f32]) {
        for v in out {
            *v = self.next_f64() as f32;
        }
    }

    pub fn fill_f64(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_f64();
        }
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f32),
    Rng(RngSpec),
}

fn checked_numel(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(WinoError::InvalidShape(format!(
            "rank must be 1..={MAX_RANK}, got {}",
            dims.len()
        )));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(WinoError::InvalidShape(format!(
            "extent {pos} is zero in {dims:?}"
        )));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| WinoError::InvalidShape(format!("element count overflows for {dims:?}")))
}

impl Tensor {
    pub fn new(dims: &[usize], fill: Fill) -> Result<Self> {
        let numel = checked_numel(dims)?;
        let data = match fill {
            Fill::Zeros => vec![0.0; numel],
            Fill::Constant(v) => vec![v; numel],
            Fill::Rng(spec) => {
                spec.validate()?;
                let mut data = vec![0.0; numel];
                spec.sampler().fill_f32(&mut data);
                data
            }
        };
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::new(dims, Fill::Zeros)
    }

    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel = checked_numel(dims)?;
        if numel != data.len() {
            return Err(WinoError::InvalidShape(format!(
                "dims {dims:?} need {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extents padded on the left with ones to rank 4 (N, C, H, W).
    pub fn nchw(&self) -> [usize; 4] {
        let mut out = [1; 4];
        let off = 4 - self.dims.len();
        out[off..].copy_from_slice(&self.dims);
        out
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let numel = checked_numel(dims)?;
        if numel != self.data.len() {
            return Err(WinoError::InvalidShape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Compute entrypoints refuse NaN/Inf payloads; I/O does not check.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(WinoError::Compute(format!(
                "{what} has non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn scale(&mut self, alpha: f32) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `max|self - reference| / max|reference|`.
    pub fn relative_error(&self, reference: &Tensor) -> f64 {
        relative_error(&self.data, &reference.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        let magic = rd.take(8, "magic")?;
        if magic != TENSOR_MAGIC {
            return Err(WinoError::Format(format!("bad magic {magic:?}")));
        }
        let rank = rd.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(WinoError::Format(format!("unsupported rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = rd.u64("extent")?;
            let d = usize::try_from(d)
                .map_err(|_| WinoError::Format(format!("extent {d} does not fit usize")))?;
            dims.push(d);
        }
        let numel = checked_numel(&dims).map_err(|e| WinoError::Format(e.to_string()))?;
        let nbytes = numel
            .checked_mul(4)
            .ok_or_else(|| WinoError::Format(format!("payload size overflows for {dims:?}")))?;
        let payload = rd.take(nbytes, "payload")?;
        if rd.remaining() != 0 {
            return Err(WinoError::Format(format!(
                "{} trailing bytes after payload",
                rd.remaining()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| WinoError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| WinoError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `max|test - reference| / max|reference|`; 0 when both are all-zero.
pub fn relative_error(test: &[f32], reference: &[f32]) -> f64 {
    assert_eq!(test.len(), reference.len(), "relative_error length mismatch");
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&t, &r) in test.iter().zip(reference) {
        num = num.max((t as f64 - r as f64).abs());
        den = den.max((r as f64).abs());
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(WinoError::Format(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_constant_fills() {
        let t = Tensor::new(&[1, 1, 2, 2], Fill::Zeros).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::new(&[2, 3], Fill::Constant(1.5)).unwrap();
        assert_eq!(t.data(), &[1.5; 6]);
    }

    #[test]
    fn rng_fill_is_reproducible() {
        let spec = RngSpec::gaussian(0.0, 1.0, 7);
        let a = Tensor::new(&[1, 4, 8, 8], Fill::Rng(spec)).unwrap();
        let b = Tensor::new(&[1, 4, 8, 8], Fill::Rng(spec)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = Tensor::new(&[1, 4, 8, 8], Fill::Rng(spec.with_seed(8))).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_moments_are_sane() {
        let spec = RngSpec::gaussian(1.0, 2.0, 3);
        let t = Tensor::new(&[20000], Fill::Rng(spec)).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 2.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn uniform_stays_in_range() {
        let t = Tensor::new(&[5000], Fill::Rng(RngSpec::uniform(-0.5, 0.25, 1))).unwrap();
        assert!(t.data().iter().all(|&v| (-0.5..=0.25).contains(&v)));
    }

    #[test]
    fn invalid_rng_specs() {
        assert!(RngSpec::gaussian(0.0, 0.0, 1).validate().is_err());
        assert!(RngSpec::uniform(1.0, 1.0, 1).validate().is_err());
        assert!(Tensor::new(&[2], Fill::Rng(RngSpec::gaussian(0.0, -1.0, 1))).is_err());
    }

    #[test]
    fn zero_extent_is_invalid_shape() {
        assert!(matches!(
            Tensor::new(&[1, 0, 3], Fill::Zeros),
            Err(WinoError::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::new(&[], Fill::Zeros),
            Err(WinoError::InvalidShape(_))
        ));
    }

    #[test]
    fn bad_magic_and_empty_file() {
        let mut bytes = Tensor::new(&[2], Fill::Constant(1.0)).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&bytes), Err(WinoError::Format(_))));
        assert!(matches!(Tensor::from_bytes(&[]), Err(WinoError::Format(_))));
    }

    #[test]
    fn truncated_and_trailing_payloads() {
        let bytes = Tensor::new(&[3, 2], Fill::Constant(2.0)).unwrap().to_bytes();
        assert!(Tensor::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Tensor::from_bytes(&long).is_err());
    }

    #[test]
    fn overflowing_dims_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(TENSOR_MAGIC);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Tensor::from_bytes(&bytes), Err(WinoError::Format(_))));
    }

    #[test]
    fn header_layout_is_pinned() {
        let t = Tensor::from_vec(&[1, 2], vec![1.0, -2.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..8], b"WINOQT01");
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &1u64.to_le_bytes());
        assert_eq!(&b[20..28], &2u64.to_le_bytes());
        assert_eq!(&b[28..32], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 36);
    }

    #[test]
    fn nonfinite_passes_io_but_not_compute() {
        let t = Tensor::from_vec(&[2], vec![f32::NAN, 1.0]).unwrap();
        let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
        assert!(back.data()[0].is_nan());
        assert!(matches!(back.ensure_finite("x"), Err(WinoError::Compute(_))));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }
}
