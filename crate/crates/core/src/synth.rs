//! Two-modality phantom generator.
//!
//! Each image holds one spiculated mass (the label) and a few round
//! distractors. In the master modality the mass and the distractors share an
//! overlapping bright band, so the master alone over-segments. In the
//! assistant modality the distractors sit in a bright band disjoint from the
//! mass band, and assistant-only decoys appear at the mass band where the
//! master is dark. Only the combination isolates the mass.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    fn overlaps(&self, other: &Range) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    fn within_unit(&self) -> bool {
        0.0 <= self.lo && self.lo <= self.hi && self.hi <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomParams {
    /// Pixels per side; divisible by 32.
    pub image_size: usize,
    /// Inclusive range of distractor count.
    pub n_distractors: (usize, usize),
    /// Inclusive range of assistant-only decoy count.
    pub n_decoys: (usize, usize),
    /// Semi-axis range of the mass ellipse, pixels.
    pub mass_radius: Range,
    /// Radius range of distractor and decoy blobs, pixels.
    pub blob_radius: Range,
    /// Relative boundary perturbation amplitude of the mass, in [0, 1].
    pub spiculation: f64,
    pub background: Range,
    pub master_fg_intensity: Range,
    pub distractor_intensity: Range,
    pub assistant_mass_contrast: Range,
    pub assistant_distractor_intensity: Range,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            image_size: 64,
            n_distractors: (1, 4),
            n_decoys: (0, 2),
            mass_radius: Range::new(4.0, 12.0),
            blob_radius: Range::new(3.0, 7.0),
            spiculation: 0.3,
            background: Range::new(0.05, 0.15),
            master_fg_intensity: Range::new(0.65, 0.9),
            distractor_intensity: Range::new(0.6, 0.95),
            assistant_mass_contrast: Range::new(0.4, 0.55),
            assistant_distractor_intensity: Range::new(0.8, 1.0),
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

/// Placement attempts per object before giving up.
pub const MAX_ATTEMPTS: usize = 100;

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!("image_size {} is not a positive multiple of 32", self.image_size));
        }
        if self.n_distractors.0 > self.n_distractors.1 || self.n_decoys.0 > self.n_decoys.1 {
            return bad("count ranges must satisfy min <= max".into());
        }
        for (name, r) in [("mass_radius", self.mass_radius), ("blob_radius", self.blob_radius)] {
            if !(r.lo > 0.0 && r.lo <= r.hi) {
                return bad(format!("{name} must be a positive range"));
            }
        }
        if !(0.0..=1.0).contains(&self.spiculation) {
            return bad(format!("spiculation {} outside [0, 1]", self.spiculation));
        }
        let bands = [
            ("background", self.background),
            ("master_fg_intensity", self.master_fg_intensity),
            ("distractor_intensity", self.distractor_intensity),
            ("assistant_mass_contrast", self.assistant_mass_contrast),
            ("assistant_distractor_intensity", self.assistant_distractor_intensity),
        ];
        for (name, r) in bands {
            if !r.within_unit() {
                return bad(format!("{name} must be a nonempty range within [0, 1]"));
            }
        }
        if !self.master_fg_intensity.overlaps(&self.distractor_intensity) {
            return bad("master mass and distractor bands must overlap".into());
        }
        if self.assistant_mass_contrast.overlaps(&self.assistant_distractor_intensity) {
            return bad("assistant mass and distractor bands must be disjoint".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub sample_id: String,
    /// `(1, H, W)` in [0, 1].
    pub master: Tensor,
    /// `(1, H, W)` in [0, 1].
    pub assistant: Tensor,
    /// `(1, H, W)` binary mass mask.
    pub label: Tensor,
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// A generated sample plus the geometry it was drawn from.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub sample: SegmentationSample,
    pub distractor_mask: Vec<bool>,
    pub decoy_mask: Vec<bool>,
    /// Noisy images before clamping and normalization.
    pub raw_master: Vec<f64>,
    pub raw_assistant: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    /// Bounding radius used for non-overlap tests.
    reach: f64,
}

/// Spiculated mass boundary in polar form around its centre.
struct MassShape {
    a: f64,
    b: f64,
    rotation: f64,
    harmonics: [(f64, f64, f64); 3],
    spiculation: f64,
}

impl MassShape {
    fn radius(&self, theta: f64) -> f64 {
        let t = theta - self.rotation;
        let (c, s) = (libm::cos(t), libm::sin(t));
        let ellipse = self.a * self.b / libm::sqrt((self.b * c) * (self.b * c) + (self.a * s) * (self.a * s));
        let spikes: f64 = self
            .harmonics
            .iter()
            .map(|&(amp, freq, phase)| amp * libm::sin(freq * theta + phase))
            .sum();
        ellipse * (1.0 + self.spiculation * spikes)
    }

    fn reach(&self) -> f64 {
        self.a.max(self.b) * (1.0 + self.spiculation)
    }
}

fn place(rng: &mut ChaCha8Rng, size: f64, reach: f64, taken: &[Blob], what: &str) -> Result<Blob> {
    const GAP: f64 = 2.0;
    for _ in 0..MAX_ATTEMPTS {
        let lo = reach + 1.0;
        let hi = size - reach - 1.0;
        if hi <= lo {
            break;
        }
        let cx = rng.random_range(lo..hi);
        let cy = rng.random_range(lo..hi);
        let clear = taken.iter().all(|o| {
            let (dx, dy) = (o.cx - cx, o.cy - cy);
            libm::sqrt(dx * dx + dy * dy) > o.reach + reach + GAP
        });
        if clear {
            return Ok(Blob { cx, cy, reach });
        }
    }
    Err(Error::Geometry(format!(
        "no non-overlapping position for {what} (reach {reach:.1}) in a {size}px image after {MAX_ATTEMPTS} attempts"
    )))
}

fn disc_mask(size: usize, blob: &Blob) -> Vec<bool> {
    let mut m = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - blob.cx, y as f64 + 0.5 - blob.cy);
            m[y * size + x] = dx * dx + dy * dy <= blob.reach * blob.reach;
        }
    }
    m
}

/// Draws sample `index` of the dataset defined by `params`. The result is
/// a pure function of `(params, index)`.
pub fn generate_phantom(params: &PhantomParams, index: usize) -> Result<Phantom> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64);
    let n = params.image_size;
    let size = n as f64;

    let mut harmonics = [(0.0, 0.0, 0.0); 3];
    let weights: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.1..1.0));
    let total: f64 = weights.iter().sum();
    for (h, w) in harmonics.iter_mut().zip(weights) {
        *h = (
            w / total,
            rng.random_range(3..=9) as f64,
            rng.random_range(0.0..2.0 * PI),
        );
    }
    let shape = MassShape {
        a: params.mass_radius.sample(&mut rng),
        b: params.mass_radius.sample(&mut rng),
        rotation: rng.random_range(0.0..PI),
        harmonics,
        spiculation: params.spiculation,
    };
    let mass = place(&mut rng, size, shape.reach(), &[], "mass")?;
    let mut label = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 + 0.5 - mass.cx, y as f64 + 0.5 - mass.cy);
            label[y * n + x] = libm::sqrt(dx * dx + dy * dy) <= shape.radius(libm::atan2(dy, dx));
        }
    }
    if label.iter().filter(|&&v| v).count() < 10 {
        return Err(Error::Geometry(format!("mass of sample {index} covers fewer than 10 pixels")));
    }

    let mut taken = vec![mass];
    let n_distractors = rng.random_range(params.n_distractors.0..=params.n_distractors.1);
    let n_decoys = rng.random_range(params.n_decoys.0..=params.n_decoys.1);
    let mut distractors = Vec::with_capacity(n_distractors);
    for _ in 0..n_distractors {
        let reach = params.blob_radius.sample(&mut rng);
        let b = place(&mut rng, size, reach, &taken, "distractor")?;
        taken.push(b);
        distractors.push(b);
    }
    let mut decoys = Vec::with_capacity(n_decoys);
    for _ in 0..n_decoys {
        let reach = params.blob_radius.sample(&mut rng);
        let b = place(&mut rng, size, reach, &taken, "decoy")?;
        taken.push(b);
        decoys.push(b);
    }

    let master_bg = params.background.sample(&mut rng);
    let assistant_bg = params.background.sample(&mut rng);
    let mut master = vec![master_bg; n * n];
    let mut assistant = vec![assistant_bg; n * n];
    let mass_master = params.master_fg_intensity.sample(&mut rng);
    let mass_assistant = params.assistant_mass_contrast.sample(&mut rng);
    for (i, _) in label.iter().enumerate().filter(|(_, &v)| v) {
        master[i] = mass_master;
        assistant[i] = mass_assistant;
    }
    let mut distractor_mask = vec![false; n * n];
    for blob in &distractors {
        let (im, ia) = (
            params.distractor_intensity.sample(&mut rng),
            params.assistant_distractor_intensity.sample(&mut rng),
        );
        for (i, inside) in disc_mask(n, blob).into_iter().enumerate() {
            if inside {
                distractor_mask[i] = true;
                master[i] = im;
                assistant[i] = ia;
            }
        }
    }
    let mut decoy_mask = vec![false; n * n];
    for blob in &decoys {
        let ia = params.assistant_mass_contrast.sample(&mut rng);
        for (i, inside) in disc_mask(n, blob).into_iter().enumerate() {
            if inside {
                decoy_mask[i] = true;
                assistant[i] = ia;
            }
        }
    }

    if params.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, params.noise_sigma).map_err(|e| Error::Config(format!("noise: {e}")))?;
        for v in master.iter_mut().chain(assistant.iter_mut()) {
            *v += noise.sample(&mut rng);
        }
    }

    let image = |raw: &[f64]| -> Result<Tensor> {
        let clamped = Tensor::new([1, n, n], raw.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
        Ok(normalize(&clamped))
    };
    let sample = SegmentationSample {
        sample_id: sample_id(index),
        master: image(&master)?,
        assistant: image(&assistant)?,
        label: Tensor::new([1, n, n], label.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())?,
    };
    Ok(Phantom {
        sample,
        distractor_mask,
        decoy_mask,
        raw_master: master,
        raw_assistant: assistant,
    })
}

pub fn generate_sample(params: &PhantomParams, index: usize) -> Result<SegmentationSample> {
    generate_phantom(params, index).map(|p| p.sample)
}

pub fn generate_dataset(params: &PhantomParams, count: usize) -> Result<Vec<SegmentationSample>> {
    (0..count).map(|i| generate_sample(params, i)).collect()
}

/// Per-image min-max scaling to [0, 1]; a constant image maps to zeros.
pub fn normalize(image: &Tensor) -> Tensor {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return image.map(|_| 0.0);
    }
    image.map(|v| (v - lo) / span)
}

/// Shuffled partition of `0..n_samples` into `k` folds whose sizes differ by
/// at most one; the first `n_samples % k` folds hold the extra element.
/// Indices within a fold are sorted.
pub fn kfold_split(n_samples: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("fold count must be positive".into()));
    }
    if n_samples < k {
        return Err(Error::Config(format!("{n_samples} samples cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n_samples / k, n_samples % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}
