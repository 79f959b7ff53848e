//! Synthetic dataset generation with controllable generator fingerprints,
//! the augmentation + normalization pipeline, and fake-fake fusion.
//!
//! "Real" images are multi-octave smoothed noise fields. A fake is a real
//! field with one parametric fingerprint imprinted (checkerboard,
//! spectral peak, or blockiness), weak enough that the task is learnable
//! but not trivial. That makes branch specialization and routing claims
//! checkable with spectral statistics instead of human labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::numeric::rng::{derive_seed, DetRng};
use crate::numeric::tensor::Tensor;

/// CLIP-style normalization constants (published values for the reference
/// encoder).
pub const NORM_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const NORM_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

const TRAIN_TAG: u64 = 1;
const TEST_TAG: u64 = 2;
const SHUFFLE_TAG: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fusion {
    /// Generator ids of the two mixed fakes, 1-based.
    pub a: usize,
    pub b: usize,
    pub lambda: f32,
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// [C,H,W], values in [0,1] (pre-normalization).
    pub image: Tensor<f32>,
    /// 0 = real, 1 = fake.
    pub label: u8,
    /// 0 for real, 1..=K for fakes.
    pub generator: usize,
    pub fusion: Option<Fusion>,
}

impl Sample {
    fn check(&self) -> Result<()> {
        if (self.label == 0) != (self.generator == 0) {
            return Err(Error::Data(format!(
                "label {} inconsistent with generator {}",
                self.label, self.generator
            )));
        }
        if let Some(f) = self.fusion {
            if self.label != 1 || f.a == f.b {
                return Err(Error::Data("invalid fusion annotation".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FingerprintKind {
    Checkerboard { period: usize },
    SpectralPeak { frequency: usize },
    Blockiness { block: usize },
}

impl FingerprintKind {
    pub fn tag(&self) -> &'static str {
        match self {
            FingerprintKind::Checkerboard { .. } => "checkerboard",
            FingerprintKind::SpectralPeak { .. } => "spectral_peak",
            FingerprintKind::Blockiness { .. } => "blockiness",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintSpec {
    pub kind: FingerprintKind,
    pub amplitude: f32,
}

impl FingerprintSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0 && self.amplitude <= 0.2) {
            return Err(Error::Config(format!(
                "fingerprint amplitude {} outside (0, 0.2]",
                self.amplitude
            )));
        }
        match self.kind {
            FingerprintKind::Checkerboard { period } if period < 2 || period % 2 != 0 => Err(
                Error::Config(format!("checkerboard period {period} must be even and ≥ 2")),
            ),
            FingerprintKind::SpectralPeak { frequency } if frequency == 0 => {
                Err(Error::Config("spectral peak frequency must be positive".into()))
            }
            FingerprintKind::Blockiness { block } if block < 2 => {
                Err(Error::Config(format!("block size {block} must be ≥ 2")))
            }
            _ => Ok(()),
        }
    }
}

/// The default generator lineup, indexed 1..=4.
pub fn default_generators(k: usize, amplitude: f32) -> Result<Vec<(String, FingerprintSpec)>> {
    // blockiness blocks span 2x2 patches: a same-size block is a pure
    // within-patch contraction that per-token layernorm nearly cancels
    let lineup: [(&str, FingerprintKind); 4] = [
        ("checkerboard", FingerprintKind::Checkerboard { period: 2 }),
        ("spectral_peak", FingerprintKind::SpectralPeak { frequency: 8 }),
        ("blockiness", FingerprintKind::Blockiness { block: 8 }),
        ("checkerboard_wide", FingerprintKind::Checkerboard { period: 4 }),
    ];
    if k == 0 || k > lineup.len() {
        return Err(Error::Config(format!(
            "k must be in 1..={}, got {k}",
            lineup.len()
        )));
    }
    lineup[..k]
        .iter()
        .map(|(name, kind)| {
            let spec = FingerprintSpec {
                kind: kind.clone(),
                amplitude,
            };
            spec.validate()?;
            Ok((name.to_string(), spec))
        })
        .collect()
}

fn image_dims(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::Dimension(format!(
            "expected a [C,H,W] image, got {other:?}"
        ))),
    }
}

fn clip01(image: &mut Tensor<f32>) {
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Separable Gaussian blur with clamp-to-edge padding.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = image_dims(image)?;
    if sigma <= 0.0 {
        return Ok(image.clone());
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f64;
    for i in -radius..=radius {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }

    let src = image.data();
    let mut mid = vec![0.0f32; src.len()];
    // rows
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let xi = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[(ch * h + y) * w + xi] as f64;
                }
                mid[(ch * h + y) * w + x] = acc as f32;
            }
        }
    }
    // columns
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let yi = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += kv * mid[(ch * h + yi) * w + x] as f64;
                }
                out[(ch * h + y) * w + x] = acc as f32;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Multi-octave smoothed noise field: Gaussian-blurred white noise at
/// blur scales {1,2,4}, summed and min-max renormalized to [0,1].
pub fn make_real(seed: u64, channels: usize, size: usize) -> Tensor<f32> {
    let mut rng = DetRng::new(seed);
    let shape = vec![channels, size, size];
    let mut acc = Tensor::zeros(&shape);
    for octave in [1.0f64, 2.0, 4.0] {
        let noise = Tensor::new(
            shape.clone(),
            (0..channels * size * size)
                .map(|_| rng.normal() as f32)
                .collect(),
        )
        .expect("consistent");
        let blurred = gaussian_blur(&noise, octave).expect("image shaped");
        for (a, b) in acc.data_mut().iter_mut().zip(blurred.data()) {
            *a += *b;
        }
    }
    let mut lo = f32::MAX;
    let mut hi = f32::MIN;
    for &v in acc.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in acc.data_mut() {
        *v = (*v - lo) / span;
    }
    acc
}

/// Imprint one generator fingerprint, clipping back to [0,1]. The three
/// kinds are fixed deterministic patterns.
pub fn apply_fingerprint(image: &Tensor<f32>, spec: &FingerprintSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let (c, h, w) = image_dims(image)?;
    let amp = spec.amplitude;
    let mut out = image.clone();
    match spec.kind {
        FingerprintKind::Checkerboard { period } => {
            let cell = period / 2;
            let data = out.data_mut();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sign = if ((y / cell) + (x / cell)) % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        };
                        data[(ch * h + y) * w + x] += amp * sign;
                    }
                }
            }
        }
        FingerprintKind::SpectralPeak { frequency } => {
            let data = out.data_mut();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let phase = std::f64::consts::TAU * frequency as f64 * x as f64 / w as f64;
                        data[(ch * h + y) * w + x] += amp * phase.sin() as f32;
                    }
                }
            }
        }
        FingerprintKind::Blockiness { block } => {
            let weight = (amp * block as f32).min(1.0);
            let data = out.data_mut();
            for ch in 0..c {
                for by in 0..h.div_ceil(block) {
                    for bx in 0..w.div_ceil(block) {
                        let y0 = by * block;
                        let x0 = bx * block;
                        let y1 = (y0 + block).min(h);
                        let x1 = (x0 + block).min(w);
                        let mut mean = 0.0f32;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                mean += data[(ch * h + y) * w + x];
                            }
                        }
                        mean /= ((y1 - y0) * (x1 - x0)) as f32;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                let v = &mut data[(ch * h + y) * w + x];
                                *v = (1.0 - weight) * *v + weight * mean;
                            }
                        }
                    }
                }
            }
        }
    }
    clip01(&mut out);
    Ok(out)
}

/// Per-transform probabilities and parameter ranges for train-time
/// augmentation.
#[derive(Clone, Debug)]
pub struct AugmentationConfig {
    pub flip_p: f64,
    pub quality_p: f64,
    pub quality_range: (f64, f64),
    pub blur_p: f64,
    pub blur_range: (f64, f64),
    pub brightness_contrast_p: f64,
    pub brightness_contrast_range: f64,
    pub channel_mix_p: f64,
    pub channel_mix_range: f64,
    pub noise_p: f64,
    pub noise_sigma_max: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip_p: 0.5,
            quality_p: 0.3,
            quality_range: (60.0, 95.0),
            blur_p: 0.3,
            blur_range: (0.3, 1.0),
            brightness_contrast_p: 0.3,
            brightness_contrast_range: 0.2,
            channel_mix_p: 0.3,
            channel_mix_range: 0.1,
            noise_p: 0.3,
            noise_sigma_max: 0.02,
        }
    }
}

fn flip_horizontal(image: &mut Tensor<f32>) {
    let (c, h, w) = image_dims(image).expect("validated");
    let data = image.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let row = &mut data[(ch * h + y) * w..(ch * h + y + 1) * w];
            row.reverse();
        }
    }
}

// Classic 8x8 luminance quantization table.
const QUANT_TABLE: [f32; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

fn dct8(input: &[f32; 8]) -> [f32; 8] {
    let mut out = [0.0f32; 8];
    for (k, o) in out.iter_mut().enumerate() {
        let s = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        let mut acc = 0.0f64;
        for (n, &v) in input.iter().enumerate() {
            acc += v as f64
                * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / 16.0).cos();
        }
        *o = (s * acc) as f32;
    }
    out
}

fn idct8(input: &[f32; 8]) -> [f32; 8] {
    let mut out = [0.0f32; 8];
    for (n, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (k, &v) in input.iter().enumerate() {
            let s = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            acc += s
                * v as f64
                * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / 16.0).cos();
        }
        *o = acc as f32;
    }
    out
}

/// Quality-reduction surrogate: 8×8 block cosine-transform coefficient
/// quantization at the given quality, applied per channel.
pub fn quality_reduce(image: &Tensor<f32>, quality: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = image_dims(image)?;
    let quality = quality.clamp(1.0, 100.0);
    let scale = if quality < 50.0 {
        5000.0 / quality
    } else {
        200.0 - 2.0 * quality
    };
    let mut steps = [0.0f32; 64];
    for i in 0..64 {
        steps[i] = ((QUANT_TABLE[i] * scale as f32 + 50.0) / 100.0).clamp(1.0, 255.0);
    }

    let mut out = image.clone();
    let data = out.data_mut();
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                // gather (clamp-pad partial edge blocks)
                let mut block = [[0.0f32; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let yy = (by + y).min(h - 1);
                        let xx = (bx + x).min(w - 1);
                        *v = data[(ch * h + yy) * w + xx] * 255.0 - 128.0;
                    }
                }
                // 2-D DCT, quantize, inverse
                let mut tmp = [[0.0f32; 8]; 8];
                for y in 0..8 {
                    tmp[y] = dct8(&block[y]);
                }
                let mut freq = [[0.0f32; 8]; 8];
                for x in 0..8 {
                    let col: [f32; 8] = std::array::from_fn(|y| tmp[y][x]);
                    let t = dct8(&col);
                    for y in 0..8 {
                        freq[y][x] = t[y];
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let s = steps[y * 8 + x];
                        freq[y][x] = (freq[y][x] / s).round() * s;
                    }
                }
                for x in 0..8 {
                    let col: [f32; 8] = std::array::from_fn(|y| freq[y][x]);
                    let t = idct8(&col);
                    for y in 0..8 {
                        tmp[y][x] = t[y];
                    }
                }
                for y in 0..8 {
                    let row = idct8(&{
                        let r: [f32; 8] = std::array::from_fn(|x| tmp[y][x]);
                        r
                    });
                    for x in 0..8 {
                        let yy = by + y;
                        let xx = bx + x;
                        if yy < h && xx < w {
                            data[(ch * h + yy) * w + xx] = (row[x] + 128.0) / 255.0;
                        }
                    }
                }
            }
        }
    }
    clip01(&mut out);
    Ok(out)
}

/// Apply each configured transform independently with its probability.
/// Deterministic per seed; output clipped to [0,1].
pub fn augment(image: &Tensor<f32>, cfg: &AugmentationConfig, seed: u64) -> Result<Tensor<f32>> {
    let (c, h, w) = image_dims(image)?;
    let mut rng = DetRng::new(seed);
    let mut out = image.clone();

    if rng.bernoulli(cfg.flip_p) {
        flip_horizontal(&mut out);
    }
    if rng.bernoulli(cfg.quality_p) {
        let q = rng.uniform(cfg.quality_range.0, cfg.quality_range.1);
        out = quality_reduce(&out, q)?;
    }
    if rng.bernoulli(cfg.blur_p) {
        let sigma = rng.uniform(cfg.blur_range.0, cfg.blur_range.1);
        out = gaussian_blur(&out, sigma)?;
    }
    if rng.bernoulli(cfg.brightness_contrast_p) {
        let r = cfg.brightness_contrast_range;
        let brightness = rng.uniform(-r, r) as f32;
        let contrast = 1.0 + rng.uniform(-r, r) as f32;
        for v in out.data_mut() {
            *v = (*v - 0.5) * contrast + 0.5 + brightness;
        }
    }
    if rng.bernoulli(cfg.channel_mix_p) {
        // small random channel-mixing matrix near identity
        let r = cfg.channel_mix_range;
        let mut mix = [[0.0f32; 3]; 3];
        for (i, row) in mix.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { 1.0 } else { 0.0 } + rng.uniform(-r, r) as f32;
            }
        }
        if c == 3 {
            let data = out.data_mut();
            for y in 0..h {
                for x in 0..w {
                    let pix: [f32; 3] =
                        std::array::from_fn(|ch| data[(ch * h + y) * w + x]);
                    for ch in 0..3 {
                        data[(ch * h + y) * w + x] =
                            mix[ch][0] * pix[0] + mix[ch][1] * pix[1] + mix[ch][2] * pix[2];
                    }
                }
            }
        }
    }
    if rng.bernoulli(cfg.noise_p) {
        let sigma = rng.uniform(0.0, cfg.noise_sigma_max);
        for v in out.data_mut() {
            *v += (rng.normal() * sigma) as f32;
        }
    }
    clip01(&mut out);
    Ok(out)
}

/// Per-channel (x − mean_c)/std_c with the published constants.
pub fn normalize(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = image_dims(image)?;
    if c != 3 {
        return Err(Error::Dimension(format!("normalize expects 3 channels, got {c}")));
    }
    let mut out = image.clone();
    let data = out.data_mut();
    for ch in 0..3 {
        for i in 0..h * w {
            data[ch * h * w + i] = (data[ch * h * w + i] - NORM_MEAN[ch]) / NORM_STD[ch];
        }
    }
    Ok(out)
}

pub fn denormalize(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = image_dims(image)?;
    if c != 3 {
        return Err(Error::Dimension(format!("denormalize expects 3 channels, got {c}")));
    }
    let mut out = image.clone();
    let data = out.data_mut();
    for ch in 0..3 {
        for i in 0..h * w {
            data[ch * h * w + i] = data[ch * h * w + i] * NORM_STD[ch] + NORM_MEAN[ch];
        }
    }
    Ok(out)
}

/// Fake-fake pixel interpolation: λ·I_a + (1−λ)·I_b across two different
/// generator families, before augmentation and normalization.
pub fn genmix(a: &Sample, b: &Sample, lambda: f32) -> Result<Sample> {
    if a.label != 1 || b.label != 1 {
        return Err(Error::Data("fusion requires two fake samples".into()));
    }
    if a.generator == b.generator {
        return Err(Error::Data(format!(
            "fusion requires distinct generators, both are {}",
            a.generator
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Data(format!("mixing ratio {lambda} outside [0,1]")));
    }
    if a.image.shape() != b.image.shape() {
        return Err(Error::Dimension("fused images must share a shape".into()));
    }
    let inv = 1.0 - lambda;
    let data = a
        .image
        .data()
        .iter()
        .zip(b.image.data())
        .map(|(&pa, &pb)| lambda * pa + inv * pb)
        .collect();
    Ok(Sample {
        image: Tensor::new(a.image.shape().to_vec(), data)?,
        label: 1,
        generator: a.generator,
        fusion: Some(Fusion {
            a: a.generator,
            b: b.generator,
            lambda,
        }),
    })
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub generators: Vec<(String, FingerprintSpec)>,
    pub train_real: usize,
    pub train_fake_per_gen: usize,
    pub test_real: usize,
    pub test_fake_per_gen: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn with_defaults(generators: Vec<(String, FingerprintSpec)>, seed: u64) -> Self {
        DatasetSpec {
            generators,
            train_real: 500,
            train_fake_per_gen: 500,
            test_real: 100,
            test_fake_per_gen: 100,
            image_size: 32,
            channels: 3,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn generator_names(&self) -> Vec<String> {
        self.spec.generators.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn k(&self) -> usize {
        self.spec.generators.len()
    }

    /// Training subset for one generator: all reals plus that generator's
    /// fakes, in stored order.
    pub fn stage1_subset(&self, generator_id: usize) -> Vec<Sample> {
        self.train
            .iter()
            .filter(|s| s.generator == 0 || s.generator == generator_id)
            .cloned()
            .collect()
    }
}

fn build_split(spec: &DatasetSpec, tag: u64, reals: usize, fakes_per_gen: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(reals + fakes_per_gen * spec.generators.len());
    let mut index: u64 = 0;
    for _ in 0..reals {
        let s = derive_seed(spec.seed, &[tag, index]);
        out.push(Sample {
            image: make_real(s, spec.channels, spec.image_size),
            label: 0,
            generator: 0,
            fusion: None,
        });
        index += 1;
    }
    for (gi, (_, fp)) in spec.generators.iter().enumerate() {
        for _ in 0..fakes_per_gen {
            let s = derive_seed(spec.seed, &[tag, index]);
            let base = make_real(s, spec.channels, spec.image_size);
            out.push(Sample {
                image: apply_fingerprint(&base, fp)?,
                label: 1,
                generator: gi + 1,
                fusion: None,
            });
            index += 1;
        }
    }
    Ok(out)
}

/// Deterministic train/test build: disjoint image seeds between splits,
/// train shuffled, exact class balance per the spec.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.generators.is_empty() {
        return Err(Error::Config("dataset needs at least one generator".into()));
    }
    if spec.train_real == 0
        || spec.train_fake_per_gen == 0
        || spec.test_real == 0
        || spec.test_fake_per_gen == 0
    {
        return Err(Error::Config("dataset split sizes must be positive".into()));
    }
    let mut names = std::collections::HashSet::new();
    for (name, fp) in &spec.generators {
        crate::lora::validate_generator_name(name)?;
        if !names.insert(name.clone()) {
            return Err(Error::Registry(format!("duplicate generator name '{name}'")));
        }
        fp.validate()?;
    }

    let mut train = build_split(spec, TRAIN_TAG, spec.train_real, spec.train_fake_per_gen)?;
    let test = build_split(spec, TEST_TAG, spec.test_real, spec.test_fake_per_gen)?;
    let mut rng = DetRng::new(derive_seed(spec.seed, &[SHUFFLE_TAG]));
    rng.shuffle(&mut train);
    for s in train.iter().chain(test.iter()) {
        s.check()?;
    }
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
    })
}

fn fingerprint_meta(fp: &FingerprintSpec) -> (String, String) {
    match fp.kind {
        FingerprintKind::Checkerboard { period } => ("period".into(), period.to_string()),
        FingerprintKind::SpectralPeak { frequency } => ("frequency".into(), frequency.to_string()),
        FingerprintKind::Blockiness { block } => ("block".into(), block.to_string()),
    }
}

fn split_to_container(samples: &[Sample], registry: Vec<String>) -> Result<Container> {
    let mut c = Container::new(registry);
    let n = samples.len();
    c.push(
        "labels",
        Tensor::new(vec![n], samples.iter().map(|s| s.label as f32).collect())?,
    )?;
    c.push(
        "gens",
        Tensor::new(vec![n], samples.iter().map(|s| s.generator as f32).collect())?,
    )?;
    for (i, s) in samples.iter().enumerate() {
        c.push(&format!("img.{i}"), s.image.clone())?;
    }
    Ok(c)
}

fn split_from_container(mut c: Container) -> Result<Vec<Sample>> {
    let labels = c
        .take("labels")
        .ok_or_else(|| Error::Format { offset: 0, msg: "missing 'labels' tensor".into() })?;
    let gens = c
        .take("gens")
        .ok_or_else(|| Error::Format { offset: 0, msg: "missing 'gens' tensor".into() })?;
    if labels.numel() != gens.numel() {
        return Err(Error::Data("labels/gens length mismatch".into()));
    }
    let n = labels.numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let image = c
            .take(&format!("img.{i}"))
            .ok_or_else(|| Error::Format { offset: 0, msg: format!("missing 'img.{i}' tensor") })?;
        let s = Sample {
            image,
            label: labels.data()[i] as u8,
            generator: gens.data()[i] as usize,
            fusion: None,
        };
        s.check()?;
        out.push(s);
    }
    Ok(out)
}

/// Dataset directory: `meta` (text key=value), `train.bin`, `test.bin`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut meta = String::new();
    meta.push_str(&format!("k={}\n", ds.k()));
    meta.push_str(&format!("train_real={}\n", ds.spec.train_real));
    meta.push_str(&format!("train_fake_per_gen={}\n", ds.spec.train_fake_per_gen));
    meta.push_str(&format!("test_real={}\n", ds.spec.test_real));
    meta.push_str(&format!("test_fake_per_gen={}\n", ds.spec.test_fake_per_gen));
    meta.push_str(&format!("image_size={}\n", ds.spec.image_size));
    meta.push_str(&format!("channels={}\n", ds.spec.channels));
    meta.push_str(&format!("seed={}\n", ds.spec.seed));
    for (i, (name, fp)) in ds.spec.generators.iter().enumerate() {
        let idx = i + 1;
        meta.push_str(&format!("generator.{idx}.name={name}\n"));
        meta.push_str(&format!("generator.{idx}.kind={}\n", fp.kind.tag()));
        meta.push_str(&format!("generator.{idx}.amplitude={}\n", fp.amplitude));
        let (key, value) = fingerprint_meta(fp);
        meta.push_str(&format!("generator.{idx}.{key}={value}\n"));
    }
    let meta_path = dir.join("meta");
    fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path.display().to_string(), e))?;

    let names = ds.generator_names();
    split_to_container(&ds.train, names.clone())?.write_file(&dir.join("train.bin"))?;
    split_to_container(&ds.test, names)?.write_file(&dir.join("test.bin"))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta");
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let mut kv = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Data(format!("meta line {} is not key=value: '{line}'", lineno + 1))
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| Error::Data(format!("meta is missing '{key}'")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Data(format!("meta '{key}' is not an integer")))
    };
    let k = parse_usize("k")?;
    let mut generators = Vec::with_capacity(k);
    for i in 1..=k {
        let name = get(&format!("generator.{i}.name"))?.clone();
        let kind_tag = get(&format!("generator.{i}.kind"))?.clone();
        let amplitude: f32 = get(&format!("generator.{i}.amplitude"))?
            .parse()
            .map_err(|_| Error::Data(format!("generator.{i}.amplitude is not a number")))?;
        let param = |key: &str| -> Result<usize> { parse_usize(&format!("generator.{i}.{key}")) };
        let kind = match kind_tag.as_str() {
            "checkerboard" => FingerprintKind::Checkerboard { period: param("period")? },
            "spectral_peak" => FingerprintKind::SpectralPeak { frequency: param("frequency")? },
            "blockiness" => FingerprintKind::Blockiness { block: param("block")? },
            other => return Err(Error::Data(format!("unknown fingerprint kind '{other}'"))),
        };
        generators.push((name, FingerprintSpec { kind, amplitude }));
    }
    let spec = DatasetSpec {
        generators,
        train_real: parse_usize("train_real")?,
        train_fake_per_gen: parse_usize("train_fake_per_gen")?,
        test_real: parse_usize("test_real")?,
        test_fake_per_gen: parse_usize("test_fake_per_gen")?,
        image_size: parse_usize("image_size")?,
        channels: parse_usize("channels")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Data("meta 'seed' is not an integer".into()))?,
    };
    let train = split_from_container(Container::read_file(&dir.join("train.bin"))?)?;
    let test = split_from_container(Container::read_file(&dir.join("test.bin"))?)?;
    Ok(Dataset { spec, train, test })
}
