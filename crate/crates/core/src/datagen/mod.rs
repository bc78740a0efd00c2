//! Synthetic stand-in for a multi-generator image dataset.
//!
//! Each architecture owns a distinct "real" texture process (smoothed noise
//! with its own blur radius and channel gains). Its generated images come
//! from the same process with an additive 2-D sinusoid planted on top: the
//! architecture's fingerprint. Every sample is reproducible in isolation from
//! `(run seed, architecture, origin, split, index)`.

mod container;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub use container::{
    decode_tensor, encode_tensor, read_container, read_tensor, write_container, write_tensor,
    MANIFEST_FILE,
};

/// Whether an image came from a generator or from the camera.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Gan,
    Real,
}

impl Origin {
    pub fn token(self) -> &'static str {
        match self {
            Origin::Gan => "G",
            Origin::Real => "R",
        }
    }
}

impl FromStr for Origin {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "G" => Ok(Origin::Gan),
            "R" => Ok(Origin::Real),
            other => Err(format!("unknown origin `{other}` (expected G or R)")),
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn token(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Identity of one sample; also determines its path inside a container.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleKey {
    pub arch: usize,
    pub origin: Origin,
    pub split: Split,
    pub index: usize,
}

impl SampleKey {
    pub fn relative_path(&self) -> String {
        format!(
            "arch{}/{}/{}/{:06}.iltf",
            self.arch,
            self.origin.token(),
            self.split.token(),
            self.index
        )
    }
}

/// One image (`[channels, size, size]`, values in `[-1, 1]`) and its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub key: SampleKey,
    pub image: Tensor<f32>,
}

/// Planted periodic artifact of one generator.
#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintSpec {
    /// Horizontal and vertical frequency in cycles per image.
    pub frequency: (i64, i64),
    pub phase: f64,
    pub amplitude: f64,
    /// Per-channel weight of the pattern, largest magnitude 1.
    pub channel_mix: Vec<f64>,
}

impl FingerprintSpec {
    /// Pattern value at pixel `(x, y)` for channel `c`, before amplitude.
    pub fn pattern(&self, size: usize, c: usize, x: usize, y: usize) -> f64 {
        let (fx, fy) = self.frequency;
        let arg = 2.0 * PI * (fx as f64 * x as f64 + fy as f64 * y as f64) / size as f64;
        (arg + self.phase).cos() * self.channel_mix[c % self.channel_mix.len()]
    }
}

/// Real-texture process and fingerprint of one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub index: usize,
    pub smoothing_radius: usize,
    pub channel_gain: Vec<f64>,
    pub fingerprint: FingerprintSpec,
}

// Frequencies as fractions (numerator over 8) of the image size.
const FREQUENCIES: [(i64, i64); 8] = [
    (4, 4),
    (4, 0),
    (0, 4),
    (2, 2),
    (2, -2),
    (2, 0),
    (0, 2),
    (4, 2),
];

const GAINS: [[f64; 3]; 8] = [
    [1.2, 1.0, 0.8],
    [0.7, 1.1, 1.3],
    [1.0, 0.6, 0.9],
    [1.4, 1.3, 1.2],
    [0.8, 0.8, 1.4],
    [1.1, 1.4, 0.7],
    [0.6, 0.9, 0.6],
    [1.3, 0.7, 1.1],
];

const MIXES: [[f64; 3]; 8] = [
    [1.0, 1.0, 1.0],
    [1.0, 0.6, 0.3],
    [0.4, 1.0, 0.7],
    [0.8, 0.5, 1.0],
    [1.0, -0.5, 0.5],
    [0.5, 1.0, -0.4],
    [-0.6, 0.6, 1.0],
    [1.0, 0.8, -0.8],
];

impl ArchitectureSpec {
    /// Built-in architecture table; indices wrap after eight entries with a
    /// larger blur radius so real processes stay distinct.
    pub fn standard(index: usize, image_size: usize, amplitude: f64) -> Self {
        let slot = index % FREQUENCIES.len();
        let (nx, ny) = FREQUENCIES[slot];
        let size = image_size as i64;
        let frequency = (nx * size / 8, ny * size / 8);
        let nyquist_only = [frequency.0, frequency.1]
            .iter()
            .all(|&f| f == 0 || f.abs() * 2 == size);
        ArchitectureSpec {
            index,
            smoothing_radius: 1 + index % 3 + index / FREQUENCIES.len(),
            channel_gain: GAINS[slot].to_vec(),
            fingerprint: FingerprintSpec {
                frequency,
                // a Nyquist-rate cosine vanishes away from zero phase
                phase: if nyquist_only { 0.0 } else { 0.35 * slot as f64 },
                amplitude,
                channel_mix: MIXES[slot].to_vec(),
            },
        }
    }
}

/// Per-class sample counts for each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// First global sample index used by `split`; splits never share indices.
    pub fn offset(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => self.train,
            Split::Test => self.train + self.val,
        }
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 600,
            val: 200,
            test: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub channels: usize,
    pub amplitude: f64,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 32,
            channels: 3,
            amplitude: 0.5,
            counts: SplitCounts::default(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn spec(&self, arch: usize) -> ArchitectureSpec {
        ArchitectureSpec::standard(arch, self.image_size, self.amplitude)
    }
}

/// All samples of one architecture, both origins, split three ways.
#[derive(Clone, Debug, Default)]
pub struct ArchitectureData {
    pub arch: usize,
    pub train: Vec<Arc<Sample>>,
    pub val: Vec<Arc<Sample>>,
    pub test: Vec<Arc<Sample>>,
}

impl ArchitectureData {
    pub fn split(&self, split: Split) -> &[Arc<Sample>] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Arc<Sample>> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Sample>> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// A collection of architectures sharing one image geometry.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub image_size: usize,
    pub channels: usize,
    pub architectures: Vec<ArchitectureData>,
}

impl Dataset {
    pub fn architecture(&self, arch: usize) -> Option<&ArchitectureData> {
        self.architectures.iter().find(|a| a.arch == arch)
    }

    pub fn sample_count(&self) -> usize {
        self.architectures.iter().map(|a| a.iter().count()).sum()
    }

    /// Keeps architectures `0..count`.
    pub fn truncated(&self, count: usize) -> Dataset {
        Dataset {
            image_size: self.image_size,
            channels: self.channels,
            architectures: self
                .architectures
                .iter()
                .filter(|a| a.arch < count)
                .cloned()
                .collect(),
        }
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one sample, derived from its identity alone.
pub fn sample_seed(run_seed: u64, key: &SampleKey) -> u64 {
    let origin = match key.origin {
        Origin::Gan => 1,
        Origin::Real => 2,
    };
    [key.arch as u64, origin, key.split.code(), key.index as u64]
        .into_iter()
        .fold(splitmix64(run_seed), |h, part| splitmix64(h ^ part))
}

/// Separable box blur with clamp-to-edge borders.
fn box_blur(field: &mut [f64], size: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let mut tmp = vec![0.0; field.len()];
    let width = (2 * radius + 1) as f64;
    let at = |i: isize| i.clamp(0, size as isize - 1) as usize;
    for y in 0..size {
        for x in 0..size {
            let mut s = 0.0;
            for d in -(radius as isize)..=radius as isize {
                s += field[y * size + at(x as isize + d)];
            }
            tmp[y * size + x] = s / width;
        }
    }
    for y in 0..size {
        for x in 0..size {
            let mut s = 0.0;
            for d in -(radius as isize)..=radius as isize {
                s += tmp[at(y as isize + d) * size + x];
            }
            field[y * size + x] = s / width;
        }
    }
}

fn smooth_field(rng: &mut ChaCha8Rng, size: usize, radius: usize) -> Vec<f64> {
    let mut f: Vec<f64> = (0..size * size)
        .map(|_| StandardNormal.sample(&mut *rng))
        .collect();
    box_blur(&mut f, size, radius);
    box_blur(&mut f, size, radius);
    // restore roughly unit variance after averaging
    let var = f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64;
    let scale = 1.0 / var.sqrt().max(1e-12);
    f.iter_mut().for_each(|v| *v *= scale);
    f
}

/// Generates one sample of `spec` for the given identity.
pub fn generate_sample(spec: &ArchitectureSpec, cfg: &GeneratorConfig, key: SampleKey) -> Sample {
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, &key));
    let shared = smooth_field(&mut rng, size, spec.smoothing_radius);
    let mut data = Vec::with_capacity(cfg.channels * size * size);
    for c in 0..cfg.channels {
        let own = smooth_field(&mut rng, size, spec.smoothing_radius);
        let gain = spec.channel_gain[c % spec.channel_gain.len()];
        for y in 0..size {
            for x in 0..size {
                let i = y * size + x;
                let mut v = (0.5 * gain * (0.8 * shared[i] + 0.6 * own[i])).tanh();
                if key.origin == Origin::Gan {
                    v += spec.fingerprint.amplitude * spec.fingerprint.pattern(size, c, x, y);
                    v = v.clamp(-1.0, 1.0);
                }
                data.push(v as f32);
            }
        }
    }
    Sample {
        key,
        image: Tensor::new(vec![cfg.channels, size, size], data).expect("consistent geometry"),
    }
}

/// Generates every split of both classes of one architecture.
pub fn generate_architecture(spec: &ArchitectureSpec, cfg: &GeneratorConfig) -> Result<ArchitectureData> {
    let c = cfg.counts;
    if c.train == 0 || c.val == 0 || c.test == 0 {
        return Err(Error::Config(format!(
            "every split needs at least one sample per class, got {}/{}/{}",
            c.train, c.val, c.test
        )));
    }
    if cfg.image_size == 0 || cfg.channels == 0 {
        return Err(Error::Config("image size and channels must be positive".into()));
    }
    let mut out = ArchitectureData {
        arch: spec.index,
        ..Default::default()
    };
    for split in Split::ALL {
        let dst = out.split_mut(split);
        for origin in [Origin::Gan, Origin::Real] {
            let start = c.offset(split);
            for index in start..start + c.get(split) {
                let key = SampleKey {
                    arch: spec.index,
                    origin,
                    split,
                    index,
                };
                dst.push(Arc::new(generate_sample(spec, cfg, key)));
            }
        }
    }
    Ok(out)
}

/// Generates architectures `0..architectures` with the standard table.
pub fn generate_dataset(cfg: &GeneratorConfig, architectures: usize) -> Result<Dataset> {
    let architectures = (0..architectures)
        .map(|a| generate_architecture(&cfg.spec(a), cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        image_size: cfg.image_size,
        channels: cfg.channels,
        architectures,
    })
}

/// Extracts a `size × size` window at `(top, left)` from a `[C, H, W]` image.
pub fn crop(image: &Tensor<f32>, size: usize, top: usize, left: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || top + size > s[1] || left + size > s[2] {
        return Err(Error::shape(
            "crop",
            format!("{size}x{size} window at ({top}, {left}) of {s:?}"),
        ));
    }
    if size == s[1] && size == s[2] {
        return Ok(image.clone());
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&src[row + left..row + left + size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

/// Centered window, used at evaluation time.
pub fn center_crop(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || s[1] < size || s[2] < size {
        return Err(Error::shape("center_crop", format!("{size} from {s:?}")));
    }
    crop(image, size, (s[1] - size) / 2, (s[2] - size) / 2)
}
