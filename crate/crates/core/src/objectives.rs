//! Dice + cross-entropy training loss and the evaluation metrics.
//!
//! The loss is `L = L_dice + alpha * L_ce`, computed per image and averaged
//! over the batch. Rank-4 tensors are treated as `(N, 1, H, W)` batches;
//! any other rank is a single image.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// Dice smoothing constant.
    pub epsilon: f64,
    /// Probability clamp applied inside the logarithms.
    pub clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            epsilon: 1.0,
            clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.clamp > 0.0 && self.clamp < 0.5) {
            return Err(Error::Config(format!("clamp must lie in (0, 0.5), got {}", self.clamp)));
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, p: &Tensor, y: &Tensor) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", p.shape(), y.shape())));
    }
    check_binary(op, y)
}

fn check_binary(op: &'static str, t: &Tensor) -> Result<()> {
    match t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&value) => Err(Error::NotBinary { op, value }),
        None => Ok(()),
    }
}

/// Number of images and pixels per image.
fn batch_layout(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n, ..] if t.rank() == 4 && *n > 0 => (*n, t.len() / n),
        _ => (1, t.len()),
    }
}

struct DiceTerms {
    intersection: f64,
    pred: f64,
    label: f64,
}

fn dice_terms(p: &[f64], y: &[f64]) -> DiceTerms {
    let mut t = DiceTerms {
        intersection: 0.0,
        pred: 0.0,
        label: 0.0,
    };
    for (&pi, &yi) in p.iter().zip(y) {
        t.intersection += pi * yi;
        t.pred += pi;
        t.label += yi;
    }
    t
}

/// `1 - (2·Σp·y + ε) / (Σp + Σy + ε)`, averaged over images.
pub fn dice_loss(p: &Tensor, y: &Tensor, epsilon: f64) -> Result<f64> {
    check_pair("dice_loss", p, y)?;
    let (n, px) = batch_layout(p);
    let total: f64 = p
        .data()
        .chunks_exact(px)
        .zip(y.data().chunks_exact(px))
        .map(|(pi, yi)| {
            let t = dice_terms(pi, yi);
            1.0 - (2.0 * t.intersection + epsilon) / (t.pred + t.label + epsilon)
        })
        .sum();
    Ok(total / n as f64)
}

pub(crate) fn dice_loss_grad(p: &Tensor, y: &Tensor, epsilon: f64) -> Result<Vec<f64>> {
    check_pair("dice_loss", p, y)?;
    let (n, px) = batch_layout(p);
    let mut grad = Vec::with_capacity(p.len());
    for (pi, yi) in p.data().chunks_exact(px).zip(y.data().chunks_exact(px)) {
        let t = dice_terms(pi, yi);
        let num = 2.0 * t.intersection + epsilon;
        let den = t.pred + t.label + epsilon;
        grad.extend(yi.iter().map(|&yv| -(2.0 * yv * den - num) / (den * den) / n as f64));
    }
    Ok(grad)
}

/// Mean binary cross-entropy over all pixels with `p` clamped to
/// `[clamp, 1 - clamp]`.
pub fn ce_loss(p: &Tensor, y: &Tensor, clamp: f64) -> Result<f64> {
    check_pair("ce_loss", p, y)?;
    let sum: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pv, &yv)| {
            let q = pv.clamp(clamp, 1.0 - clamp);
            -(yv * libm::log(q) + (1.0 - yv) * libm::log(1.0 - q))
        })
        .sum();
    Ok(sum / p.len() as f64)
}

pub(crate) fn ce_loss_grad(p: &Tensor, y: &Tensor, clamp: f64) -> Result<Vec<f64>> {
    check_pair("ce_loss", p, y)?;
    let m = p.len() as f64;
    Ok(p.data()
        .iter()
        .zip(y.data())
        .map(|(&pv, &yv)| {
            if pv <= clamp || pv >= 1.0 - clamp {
                0.0
            } else {
                -(yv / pv - (1.0 - yv) / (1.0 - pv)) / m
            }
        })
        .collect())
}

pub fn combined_loss_value(p: &Tensor, y: &Tensor, config: &LossConfig) -> Result<f64> {
    Ok(dice_loss(p, y, config.epsilon)? + config.alpha * ce_loss(p, y, config.clamp)?)
}

/// Records `dice + alpha * ce` on the graph and returns the scalar node.
pub fn combined_loss(graph: &mut Graph<'_>, p: Var, y: &Tensor, config: &LossConfig) -> Result<Var> {
    let dice = graph.dice_loss(p, y, config.epsilon)?;
    let ce = graph.cross_entropy(p, y, config.clamp)?;
    let weighted = graph.scale(ce, config.alpha);
    graph.add(dice, weighted)
}

/// Foreground mask `p >= threshold` as a 0/1 tensor.
pub fn binarize(p: &Tensor, threshold: f64) -> Tensor {
    p.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub dice: f64,
    pub sensitivity: f64,
    /// |A_pred - A_label| / A_label as a fraction.
    pub relative_area_difference: f64,
}

const DICE_GUARD: f64 = 1e-7;

/// Pixel confusion counts `(tp, fp, fn_)` of two binary masks.
pub fn confusion(pred: &Tensor, label: &Tensor) -> Result<(usize, usize, usize)> {
    if pred.shape() != label.shape() {
        return Err(Error::shape(
            "compute_metrics",
            format!("{:?} vs {:?}", pred.shape(), label.shape()),
        ));
    }
    check_binary("compute_metrics", pred)?;
    check_binary("compute_metrics", label)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &y) in pred.data().iter().zip(label.data()) {
        match (p == 1.0, y == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fn_))
}

pub fn compute_metrics(pred: &Tensor, label: &Tensor) -> Result<MetricsRecord> {
    let (tp, fp, fn_) = confusion(pred, label)?;
    let label_area = tp + fn_;
    if label_area == 0 {
        return Err(Error::EmptyLabel);
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let pred_area = tp + fp;
    let label_area = label_area as f64;
    Ok(MetricsRecord {
        dice: (2.0 * tp + DICE_GUARD) / (2.0 * tp + fp + fn_ + DICE_GUARD),
        sensitivity: tp / label_area,
        relative_area_difference: (pred_area - label_area).abs() / label_area,
    })
}

/// Dice and sensitivity only; defined for empty labels (sensitivity 1).
pub fn overlap_metrics(pred: &Tensor, label: &Tensor) -> Result<(f64, f64)> {
    let (tp, fp, fn_) = confusion(pred, label)?;
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let dice = (2.0 * tp + DICE_GUARD) / (2.0 * tp + fp + fn_ + DICE_GUARD);
    let sens = if tp + fn_ == 0.0 { 1.0 } else { tp / (tp + fn_) };
    Ok((dice, sens))
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Result<MeanSd> {
        if values.is_empty() {
            return Err(Error::Empty { op: "aggregate" });
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(MeanSd {
            mean,
            sd: libm::sqrt(var),
        })
    }
}

/// Percent with one decimal: `75.0 ± 4.1`.
impl fmt::Display for MeanSd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.sd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSummary {
    pub dice: MeanSd,
    pub sensitivity: MeanSd,
    pub relative_area_difference: MeanSd,
}

/// Averages images within each run, then reports mean ± population sd
/// across runs.
pub fn aggregate(runs: &[Vec<MetricsRecord>]) -> Result<MetricsSummary> {
    if runs.is_empty() {
        return Err(Error::Empty { op: "aggregate" });
    }
    let mut per_run = [Vec::new(), Vec::new(), Vec::new()];
    for run in runs {
        let n = run.len() as f64;
        if run.is_empty() {
            return Err(Error::Empty { op: "aggregate" });
        }
        per_run[0].push(run.iter().map(|r| r.dice).sum::<f64>() / n);
        per_run[1].push(run.iter().map(|r| r.sensitivity).sum::<f64>() / n);
        per_run[2].push(run.iter().map(|r| r.relative_area_difference).sum::<f64>() / n);
    }
    Ok(MetricsSummary {
        dice: MeanSd::of(&per_run[0])?,
        sensitivity: MeanSd::of(&per_run[1])?,
        relative_area_difference: MeanSd::of(&per_run[2])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn dice_loss_cases() {
        let y = Tensor::new([100], vec![1.0; 100]).unwrap();
        assert_eq!(dice_loss(&y, &y, 1.0).unwrap(), 0.0);
        let z = Tensor::zeros([16]);
        assert_eq!(dice_loss(&z, &z, 1.0).unwrap(), 0.0);
        let v = dice_loss(&t(&[0.5; 4]), &t(&[1.0, 0.0, 0.0, 0.0]), 1.0).unwrap();
        assert!((v - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn ce_loss_cases() {
        let y = t(&[1.0, 0.0, 0.0, 0.0]);
        assert!((ce_loss(&t(&[0.5; 4]), &y, 1e-7).unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
        let v = ce_loss(&t(&[0.9, 0.1, 0.1, 0.1]), &y, 1e-7).unwrap();
        assert!((v - 0.105_360_515_657_826_3).abs() < 1e-12);
        let perfect = ce_loss(&y, &y, 1e-7).unwrap();
        assert!(perfect >= 0.0 && perfect <= 1.0000001e-7);
    }

    #[test]
    fn alpha_zero_reduces_to_dice() {
        let y = t(&[1.0, 0.0, 1.0, 0.0]);
        let p = t(&[0.7, 0.2, 0.4, 0.9]);
        let cfg = LossConfig { alpha: 0.0, ..LossConfig::default() };
        assert_eq!(combined_loss_value(&p, &y, &cfg).unwrap(), dice_loss(&p, &y, 1.0).unwrap());
    }

    #[test]
    fn losses_reject_bad_inputs() {
        assert!(matches!(dice_loss(&t(&[0.5; 3]), &t(&[1.0; 4]), 1.0), Err(Error::Shape { .. })));
        assert!(matches!(
            ce_loss(&t(&[0.5; 2]), &t(&[0.5, 1.0]), 1e-7),
            Err(Error::NotBinary { .. })
        ));
        assert!(LossConfig { clamp: 0.5, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { alpha: -1.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { epsilon: 0.0, ..LossConfig::default() }.validate().is_err());
    }

    #[test]
    fn binarize_ties_go_foreground() {
        assert_eq!(binarize(&t(&[0.5, 0.49, 0.51, 0.0]), 0.5).data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn metric_cases() {
        let mut label = vec![0.0; 200];
        label[..50].fill(1.0);
        let label = t(&label);
        let m = compute_metrics(&label, &label).unwrap();
        assert_eq!((m.dice, m.sensitivity, m.relative_area_difference), (1.0, 1.0, 0.0));

        let mut pred = vec![0.0; 200];
        pred[..100].fill(1.0);
        let m = compute_metrics(&t(&pred), &label).unwrap();
        assert!((m.dice - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(m.sensitivity, 1.0);
        assert_eq!(m.relative_area_difference, 1.0);

        let mut disjoint = vec![0.0; 200];
        disjoint[100..150].fill(1.0);
        let m = compute_metrics(&t(&disjoint), &label).unwrap();
        assert!(m.dice < 1e-8);
        assert_eq!(m.sensitivity, 0.0);
        assert_eq!(m.relative_area_difference, 0.0);

        assert_eq!(compute_metrics(&label, &t(&[0.0; 200])), Err(Error::EmptyLabel));
        assert!(matches!(compute_metrics(&t(&[0.3; 200]), &label), Err(Error::NotBinary { .. })));
    }

    #[test]
    fn aggregate_population_sd() {
        let run = |d: f64| {
            vec![MetricsRecord {
                dice: d,
                sensitivity: d,
                relative_area_difference: 0.0,
            }]
        };
        let s = aggregate(&[run(0.70), run(0.75), run(0.80)]).unwrap();
        assert_eq!(alloc::format!("{}", s.dice), "75.0 ± 4.1");
        let single = aggregate(&[run(0.7)]).unwrap();
        assert_eq!(single.dice.sd, 0.0);
        let same = aggregate(&[run(0.6), run(0.6)]).unwrap();
        assert_eq!(same.dice.sd, 0.0);
        assert!(aggregate(&[]).is_err());
    }
}
