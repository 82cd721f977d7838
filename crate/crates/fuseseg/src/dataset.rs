//! On-disk datasets and PGM export.
//!
//! A dataset directory holds `manifest.txt` and one subdirectory per sample
//! with `master.ftns`, `assistant.ftns` and `label.ftns`. The manifest is
//! `key=value` lines for the generating parameters, a blank line, then one
//! sample id per line.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use fuseseg_core::synth::{PhantomParams, Range, SegmentationSample};
use fuseseg_core::Tensor;

use crate::error::{Error, Result};
use crate::format::{read_tensor_file, write_tensor};

pub const MANIFEST: &str = "manifest.txt";
const FILES: [&str; 3] = ["master.ftns", "assistant.ftns", "label.ftns"];

/// Parameter lines of a manifest. Floats use Rust's shortest round-trip form.
pub fn params_lines(p: &PhantomParams) -> Vec<String> {
    let range = |r: Range| format!("{},{}", r.lo, r.hi);
    vec![
        format!("image_size={}", p.image_size),
        format!("n_distractors={},{}", p.n_distractors.0, p.n_distractors.1),
        format!("n_decoys={},{}", p.n_decoys.0, p.n_decoys.1),
        format!("mass_radius={}", range(p.mass_radius)),
        format!("blob_radius={}", range(p.blob_radius)),
        format!("spiculation={}", p.spiculation),
        format!("background={}", range(p.background)),
        format!("master_fg_intensity={}", range(p.master_fg_intensity)),
        format!("distractor_intensity={}", range(p.distractor_intensity)),
        format!("assistant_mass_contrast={}", range(p.assistant_mass_contrast)),
        format!("assistant_distractor_intensity={}", range(p.assistant_distractor_intensity)),
        format!("noise_sigma={}", p.noise_sigma),
        format!("seed={}", p.seed),
    ]
}

pub fn write_dataset(samples: &[SegmentationSample], params: &PhantomParams, dir: &Path) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in samples {
        if !seen.insert(s.sample_id.as_str()) {
            return Err(Error::Validation(format!("duplicate sample id {}", s.sample_id)));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        let sub = dir.join(&s.sample_id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (file, t) in FILES.iter().zip([&s.master, &s.assistant, &s.label]) {
            write_tensor(&sub.join(file), t)?;
        }
    }
    let mut text = params_lines(params).join("\n");
    text.push_str("\n\n");
    for s in samples {
        text.push_str(&s.sample_id);
        text.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Parameter lines and sample ids of a manifest.
pub fn read_manifest(dir: &Path) -> Result<(Vec<(String, String)>, Vec<String>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (head, tail) = text
        .split_once("\n\n")
        .ok_or_else(|| Error::Format(format!("{}: missing blank line after parameters", path.display())))?;
    let mut params = Vec::new();
    for line in head.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{}: bad parameter line {line:?}", path.display())))?;
        params.push((k.to_owned(), v.to_owned()));
    }
    let ids: Vec<String> = tail.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect();
    Ok((params, ids))
}

/// Reads every sample listed in the manifest, in manifest order. Sample
/// directories not listed in the manifest are an error, as are listed
/// samples with missing files.
pub fn read_dataset(dir: &Path) -> Result<Vec<SegmentationSample>> {
    let (_, ids) = read_manifest(dir)?;
    let listed: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    if listed.len() != ids.len() {
        return Err(Error::Format("manifest lists a sample id twice".into()));
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if !listed.contains(name.as_str()) {
                return Err(Error::Format(format!("sample directory {name} is not in the manifest")));
            }
        }
    }
    ids.into_iter()
        .map(|id| {
            let sub = dir.join(&id);
            let [master, assistant, label] = FILES.map(|f| read_tensor_file(&sub.join(f)));
            let sample = SegmentationSample {
                sample_id: id,
                master: master?,
                assistant: assistant?,
                label: label?,
            };
            if sample.master.shape() != sample.label.shape() || sample.assistant.shape() != sample.label.shape() {
                return Err(Error::Format(format!("{}: modality shapes differ", sub.display())));
            }
            Ok(sample)
        })
        .collect()
}

/// 8-bit grey levels of a single-channel image, min-max scaled. A constant
/// image keeps its own level, clamped to [0, 1].
pub fn to_gray(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = match image.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
        other => return Err(Error::Validation(format!("PGM export needs one channel, got shape {other:?}"))),
    };
    if !image.is_finite() {
        return Err(Error::Validation("PGM export of a non-finite image".into()));
    }
    let data = image.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = |v: f64| {
        let unit = if hi > lo { (v - lo) / (hi - lo) } else { v.clamp(0.0, 1.0) };
        (unit * 255.0).round() as u8
    };
    Ok((h, w, data.iter().map(|&v| level(v)).collect()))
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, pixels) = to_gray(image)?;
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(&pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
