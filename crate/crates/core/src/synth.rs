//! Synthetic implicit-segmentation data.
//!
//! Every sample is an independent "patient": a smooth low-frequency texture
//! plus Gaussian noise, and for positive samples an anisotropic Gaussian blob.
//! The blob's half-maximum region is the ground-truth mask, which is only used
//! for evaluation.
//!
//! Files use the `CADS` layout: magic, `u32` version, count, height, width
//! (all little-endian), then per sample the `f32` image, a `u8` label and one
//! `u8` per mask pixel, and a trailing CRC32 of everything before it.

use std::f64::consts::{LN_2, PI};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const IMAGE_SIDE: usize = 64;
pub const MIN_MASK_AREA: usize = 64;

const MAGIC: &[u8; 4] = b"CADS";
const FORMAT_VERSION: u32 = 1;
const TEXTURE_WAVES: usize = 3;
const MAX_BLOB_ATTEMPTS: usize = 100;

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub count: usize,
    pub pos_frac: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Half-maximum radius of the blob along each principal axis, in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    pub texture_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 2500,
            pos_frac: 0.5,
            intensity_min: 0.4,
            intensity_max: 0.9,
            radius_min: 5.0,
            radius_max: 8.0,
            texture_amplitude: 0.35,
            noise_std: 0.05,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_frac > 0.0 && self.pos_frac < 1.0) {
            return Err(invalid!("pos_frac must lie in (0, 1), got {}", self.pos_frac));
        }
        if !(0.0 < self.intensity_min && self.intensity_min <= self.intensity_max && self.intensity_max <= 1.0) {
            return Err(invalid!("blob intensities must satisfy 0 < min <= max <= 1"));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(invalid!("blob radii must satisfy 0 < min <= max"));
        }
        if PI * self.radius_min * self.radius_min < MIN_MASK_AREA as f64 {
            return Err(invalid!(
                "radius_min {} cannot reach the minimum mask area of {MIN_MASK_AREA} pixels",
                self.radius_min
            ));
        }
        if 2.0 * self.radius_max + 2.0 > IMAGE_SIDE as f64 {
            return Err(invalid!("radius_max {} does not fit in a {IMAGE_SIDE}px image", self.radius_max));
        }
        if !(self.texture_amplitude >= 0.0 && self.noise_std >= 0.0) {
            return Err(invalid!("texture amplitude and noise must be nonnegative"));
        }
        Ok(())
    }

    /// Number of positive samples, fixed by stratification.
    pub fn positives(&self) -> usize {
        (self.count as f64 * self.pos_frac).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f32>,
    /// 1 for "lesion present".
    pub label: u8,
    /// Row-major 0/1 ground truth, all zero for negatives.
    pub mask: Vec<u8>,
}

impl SyntheticSample {
    pub fn mask_area(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn empty() -> Self {
        Self { height: IMAGE_SIDE, width: IMAGE_SIDE, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits by sample id: the first `n` samples and the rest. Samples are
    /// independent, so the halves share no patient.
    pub fn split_at(mut self, n: usize) -> (Dataset, Dataset) {
        let rest = self.samples.split_off(n.min(self.samples.len()));
        let tail = Dataset { height: self.height, width: self.width, samples: rest };
        (self, tail)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label as usize).collect()
    }
}

fn texture<R: Rng>(spec: &DatasetSpec, rng: &mut R, out: &mut [f64]) {
    let waves: Vec<(f64, f64, f64)> = (0..TEXTURE_WAVES)
        .map(|_| {
            let freq = rng.gen_range(0.5..2.0);
            let angle = rng.gen_range(0.0..PI);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (freq * angle.cos(), freq * angle.sin(), phase)
        })
        .collect();
    let side = IMAGE_SIDE as f64;
    for (idx, v) in out.iter_mut().enumerate() {
        let (y, x) = ((idx / IMAGE_SIDE) as f64, (idx % IMAGE_SIDE) as f64);
        let s: f64 = waves.iter().map(|(fx, fy, ph)| (2.0 * PI * (fx * x + fy * y) / side + ph).sin()).sum();
        *v = spec.texture_amplitude * (0.5 + 0.5 * s / TEXTURE_WAVES as f64);
    }
}

/// Adds a blob in place and returns its half-maximum mask.
fn blob<R: Rng>(spec: &DatasetSpec, rng: &mut R, image: &mut [f64]) -> Result<Vec<u8>> {
    let margin = spec.radius_max;
    let hi = IMAGE_SIDE as f64 - 1.0 - margin;
    for _ in 0..MAX_BLOB_ATTEMPTS {
        let amp = rng.gen_range(spec.intensity_min..=spec.intensity_max);
        let rx = rng.gen_range(spec.radius_min..=spec.radius_max);
        let ry = rng.gen_range(spec.radius_min..=spec.radius_max);
        let theta = rng.gen_range(0.0..PI);
        let cx = rng.gen_range(margin..=hi);
        let cy = rng.gen_range(margin..=hi);
        // Half maximum is reached at the radius: σ = r / √(2 ln 2).
        let (sx2, sy2) = (rx * rx / (2.0 * LN_2), ry * ry / (2.0 * LN_2));
        let (cos, sin) = (theta.cos(), theta.sin());
        let values: Vec<f64> = (0..image.len())
            .map(|idx| {
                let (dy, dx) = ((idx / IMAGE_SIDE) as f64 - cy, (idx % IMAGE_SIDE) as f64 - cx);
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                amp * (-0.5 * (u * u / sx2 + v * v / sy2)).exp()
            })
            .collect();
        let mask: Vec<u8> = values.iter().map(|&b| u8::from(b >= 0.5 * amp)).collect();
        if mask.iter().filter(|&&m| m != 0).count() >= MIN_MASK_AREA {
            image.iter_mut().zip(&values).for_each(|(p, b)| *p += b);
            return Ok(mask);
        }
    }
    Err(invalid!("could not place a blob with mask area >= {MIN_MASK_AREA}"))
}

fn sample(spec: &DatasetSpec, index: usize, positive: bool) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let n = IMAGE_SIDE * IMAGE_SIDE;
    let mut image = vec![0.0; n];
    texture(spec, &mut rng, &mut image);
    let mask = if positive { blob(spec, &mut rng, &mut image)? } else { vec![0; n] };
    if spec.noise_std > 0.0 {
        for p in image.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *p += spec.noise_std * z;
        }
    }
    let image = image.into_iter().map(|p| p.clamp(0.0, 1.0) as f32).collect();
    Ok(SyntheticSample { image, label: u8::from(positive), mask })
}

/// Generates the dataset described by `spec`. Deterministic in `spec.seed`;
/// sample `i` draws from its own counter-derived stream.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let positives = spec.positives();
    let mut labels: Vec<bool> = (0..spec.count).map(|i| i < positives).collect();
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    labels.shuffle(&mut master);
    let samples = labels.iter().enumerate().map(|(i, &pos)| sample(spec, i, pos)).collect::<Result<_>>()?;
    Ok(Dataset { height: IMAGE_SIDE, width: IMAGE_SIDE, samples })
}

fn encode(ds: &Dataset) -> Vec<u8> {
    let pixels = ds.height * ds.width;
    let mut buf = Vec::with_capacity(24 + ds.len() * (5 * pixels + 1));
    buf.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, ds.len() as u32, ds.height as u32, ds.width as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.samples {
        for p in &s.image {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf.push(s.label);
        buf.extend_from_slice(&s.mask);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn decode(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a CADS dataset (bad magic)".into()));
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported CADS version {version}")));
    }
    let (count, height, width) =
        (read_u32(bytes, 8) as usize, read_u32(bytes, 12) as usize, read_u32(bytes, 16) as usize);
    let pixels = height * width;
    let expected = 20 + count * (5 * pixels + 1) + 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!("CADS size {} does not match header ({expected})", bytes.len())));
    }
    let body = &bytes[..expected - 4];
    if crc32fast::hash(body) != read_u32(bytes, expected - 4) {
        return Err(Error::Format("CADS checksum mismatch".into()));
    }
    let mut at = 20;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let image = bytes[at..at + 4 * pixels]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        at += 4 * pixels;
        let label = bytes[at];
        at += 1;
        let mask = bytes[at..at + pixels].to_vec();
        at += pixels;
        samples.push(SyntheticSample { image, label, mask });
    }
    Ok(Dataset { height, width, samples })
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(ds))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize, seed: u64) -> DatasetSpec {
        DatasetSpec { count, seed, ..DatasetSpec::default() }
    }

    #[test]
    fn stratified_positive_count() {
        let ds = generate(&small(200, 7)).unwrap();
        assert_eq!(ds.samples.iter().filter(|s| s.label == 1).count(), 100);
    }

    #[test]
    fn masks_follow_labels() {
        let ds = generate(&small(40, 3)).unwrap();
        for s in &ds.samples {
            if s.label == 1 {
                assert!(s.mask_area() >= MIN_MASK_AREA);
            } else {
                assert_eq!(s.mask_area(), 0);
            }
            assert!(s.image.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn noiseless_positive_is_the_blob() {
        let spec = DatasetSpec {
            count: 10,
            texture_amplitude: 0.0,
            noise_std: 0.0,
            intensity_min: 1.0,
            intensity_max: 1.0,
            ..DatasetSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let s = ds.samples.iter().find(|s| s.label == 1).unwrap();
        let peak = s.image.iter().copied().fold(0.0f32, f32::max);
        assert!(peak > 0.9 && peak <= 1.0);
        for (p, m) in s.image.iter().zip(&s.mask) {
            assert_eq!(*m == 1, *p >= 0.5);
        }
        let neg = ds.samples.iter().find(|s| s.label == 0).unwrap();
        assert!(neg.image.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(generate(&small(12, 5)).unwrap(), generate(&small(12, 5)).unwrap());
        assert_ne!(generate(&small(12, 5)).unwrap(), generate(&small(12, 6)).unwrap());
    }

    #[test]
    fn infeasible_specs_rejected() {
        let tiny = DatasetSpec { radius_min: 3.0, ..DatasetSpec::default() };
        assert!(generate(&tiny).is_err());
        let huge = DatasetSpec { radius_max: 40.0, ..DatasetSpec::default() };
        assert!(generate(&huge).is_err());
        assert!(generate(&DatasetSpec { pos_frac: 1.0, ..DatasetSpec::default() }).is_err());
    }

    #[test]
    fn file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cads");
        let ds = generate(&small(6, 11)).unwrap();
        save(&ds, &path).unwrap();
        assert_eq!(load(&path).unwrap(), ds);

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));

        let mut bytes = fs::read(&path).unwrap();
        bytes[100] ^= 0xff;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));

        let bytes = fs::read(&path).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 10]), Err(Error::Format(_))));

        let empty = Dataset::empty();
        save(&empty, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(fs::metadata(&path).unwrap().len(), 24);
    }
}
