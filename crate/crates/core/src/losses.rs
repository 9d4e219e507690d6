//! Training objectives and their weighted combination.
//!
//! Every loss is evaluated in `f64` outside the tape together with its
//! analytic gradient w.r.t. the head outputs; [`objective`] bundles them into
//! seed gradients for [`crate::network::Tape::backward`].

use log::warn;
use serde::{Deserialize, Serialize};

use crate::alphabet::BLANK;
use crate::error::{Error, Result};
use crate::geometry::AxisAlignedBox;
use crate::labelgen::TargetBundle;
use crate::network::{gather_logits, HeadOutputs};
use crate::tensor::{Scalar, Tensor};

pub const DICE_EPS: f64 = 1e-6;
/// Lower clamp of the IoU inside `-ln(IoU)`.
pub const MIN_IOU: f64 = 1e-6;
/// Loss reported for a transcription that cannot be aligned to `K` steps.
pub const CTC_INFEASIBLE_PENALTY: f64 = 100.0;
/// Pixels added on each side of the box that crops mask losses and masks.
pub const MASK_CROP_MARGIN: f64 = 4.0;

/// Weights `lambda1..lambda5` of the confidence, IoU, mask, sampling and
/// CTC terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub confidence: f64,
    pub iou: f64,
    pub mask: f64,
    pub sampling: f64,
    pub ctc: f64,
    /// Sampling supervision is on in pre-training only.
    pub sampling_supervision_enabled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            confidence: 5.0,
            iou: 5.0,
            mask: 5.0,
            sampling: 1.0,
            ctc: 1.0,
            sampling_supervision_enabled: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.confidence, self.iou, self.mask, self.sampling, self.ctc];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        Ok(())
    }

    /// Effective sampling weight.
    pub fn sampling_weight(&self) -> f64 {
        if self.sampling_supervision_enabled {
            self.sampling
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtcReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub ctc_reduction: CtcReduction,
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub confidence: f64,
    pub iou: f64,
    pub mask: f64,
    pub sampling: f64,
    pub ctc: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("confidence", self.confidence),
            ("iou", self.iou),
            ("mask", self.mask),
            ("sampling", self.sampling),
            ("ctc", self.ctc),
        ]
    }

    /// Fails on the first non-finite term.
    pub fn check(&self, step: usize) -> Result<()> {
        match self.named().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(Error::NonFiniteLoss { term, step }),
            None => Ok(()),
        }
    }
}

/// `l1*Lc + l2*Liou + l3*Lmask + l4*Ls + l5*Lctc`, with `Ls` dropped when
/// sampling supervision is off.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    parts.check(0)?;
    Ok(w.confidence * parts.confidence
        + w.iou * parts.iou
        + w.mask * parts.mask
        + w.sampling_weight() * parts.sampling
        + w.ctc * parts.ctc)
}

/// `1 - 2 sum(p g) / (sum p + sum g + eps)`.
pub fn dice_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    Ok(dice_loss_grad(pred, gt)?.0)
}

/// Dice loss and its gradient w.r.t. `pred`.
pub fn dice_loss_grad(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "dice: prediction has {} cells, target {}",
            pred.len(),
            gt.len()
        )));
    }
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let denom = pred.iter().sum::<f64>() + gt.iter().sum::<f64>() + DICE_EPS;
    let loss = 1.0 - 2.0 * inter / denom;
    let grad = gt
        .iter()
        .map(|g| -2.0 * (g * denom - inter) / (denom * denom))
        .collect();
    Ok((loss, grad))
}

fn box_area(d: &[f64; 4]) -> f64 {
    (d[0] + d[2]) * (d[1] + d[3])
}

/// `-ln IoU` of two boxes given as `(top, right, bottom, left)` distances
/// from a shared anchor.
pub fn iou_box_loss(pred: &[f64; 4], gt: &[f64; 4]) -> f64 {
    iou_box_loss_grad(pred, gt).0
}

/// IoU loss and its gradient w.r.t. the predicted distances.
pub fn iou_box_loss_grad(pred: &[f64; 4], gt: &[f64; 4]) -> (f64, [f64; 4]) {
    let ih = pred[0].min(gt[0]) + pred[2].min(gt[2]);
    let iw = pred[1].min(gt[1]) + pred[3].min(gt[3]);
    let inter = ih * iw;
    let union = box_area(pred) + box_area(gt) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if iou <= MIN_IOU {
        return (-MIN_IOU.ln(), [0.0; 4]);
    }
    // L = ln U - ln I
    let (ph, pw) = (pred[0] + pred[2], pred[1] + pred[3]);
    let mut g = [0.0; 4];
    for i in 0..4 {
        let vertical = i % 2 == 0;
        let d_area = if vertical { pw } else { ph };
        let d_inter = if pred[i] < gt[i] {
            if vertical {
                iw
            } else {
                ih
            }
        } else {
            0.0
        };
        g[i] = (d_area - d_inter) / union - d_inter / inter;
    }
    (-iou.ln(), g)
}

/// Dice of an assembled soft mask against the instance mask.
pub fn mask_loss(mask: &[f64], gt: &[f64]) -> Result<f64> {
    dice_loss(mask, gt)
}

/// Mean absolute difference.
pub fn sampling_l1_loss(pred: &[f64], gt: &[f64]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "sampling vectors differ in length");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64
}

/// Minimum number of steps that can emit `target`.
pub fn ctc_required_length(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `-log P(target | seq)` for a `K x classes` sequence of probabilities.
/// An infeasible target yields [`CTC_INFEASIBLE_PENALTY`].
pub fn ctc_loss(probs: &[Vec<f64>], target: &[usize]) -> f64 {
    let logp: Vec<Vec<f64>> = probs.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
    match ctc_alpha_beta(&logp, target) {
        Some((nll, _, _)) => nll,
        None => {
            warn!("target of length {} cannot fit {} steps", target.len(), probs.len());
            CTC_INFEASIBLE_PENALTY
        }
    }
}

/// CTC loss and its gradient w.r.t. the pre-softmax logits, or `None` when
/// the target cannot be aligned.
pub fn ctc_loss_grad(logits: &[Vec<f64>], target: &[usize]) -> Option<(f64, Vec<Vec<f64>>)> {
    let logp: Vec<Vec<f64>> = logits.iter().map(|r| log_softmax(r)).collect();
    let (nll, alpha, beta) = ctc_alpha_beta(&logp, target)?;
    let ext = extend(target);
    let grad = logp
        .iter()
        .enumerate()
        .map(|(t, row)| {
            let mut occ = vec![f64::NEG_INFINITY; row.len()];
            for (s, &l) in ext.iter().enumerate() {
                occ[l] = log_sum_exp(occ[l], alpha[t][s] + beta[t][s]);
            }
            row.iter()
                .zip(&occ)
                .map(|(&lp, &o)| lp.exp() - (o + nll).exp())
                .collect()
        })
        .collect();
    Some((nll, grad))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn extend(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Log-space forward and backward variables. `alpha[t][s]` includes the
/// emission at `t`; `beta[t][s]` covers steps after `t` only.
#[allow(clippy::type_complexity)]
fn ctc_alpha_beta(logp: &[Vec<f64>], target: &[usize]) -> Option<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let steps = logp.len();
    if steps == 0 || ctc_required_length(target) > steps {
        return None;
    }
    let ext = extend(target);
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![vec![ninf; s_len]; steps];
    alpha[0][0] = logp[0][ext[0]];
    if s_len > 1 {
        alpha[0][1] = logp[0][ext[1]];
    }
    for t in 1..steps {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_sum_exp(a, alpha[t - 1][s - 1]);
            }
            if skip(s) {
                a = log_sum_exp(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + logp[t][ext[s]];
        }
    }

    let mut beta = vec![vec![ninf; s_len]; steps];
    beta[steps - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[steps - 1][s_len - 2] = 0.0;
    }
    for t in (0..steps - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s] + logp[t + 1][ext[s]];
            if s + 1 < s_len {
                b = log_sum_exp(b, beta[t + 1][s + 1] + logp[t + 1][ext[s + 1]]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_sum_exp(b, beta[t + 1][s + 2] + logp[t + 1][ext[s + 2]]);
            }
            beta[t][s] = b;
        }
    }

    let mut ll = alpha[steps - 1][s_len - 1];
    if s_len > 1 {
        ll = log_sum_exp(ll, alpha[steps - 1][s_len - 2]);
    }
    if ll == ninf {
        return None;
    }
    Some((-ll, alpha, beta))
}

/// Gradients of the weighted objective w.r.t. one level's head outputs.
#[derive(Debug, Clone)]
pub struct LevelGradients {
    pub confidence: Tensor<f64>,
    pub geometry: Tensor<f64>,
    pub coefficients: Tensor<f64>,
    pub sampling: Tensor<f64>,
    pub char_logits: Tensor<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadGradients {
    pub levels: Vec<LevelGradients>,
    pub prototypes: Tensor<f64>,
}

/// Anchors that contributed to each group of terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorCounts {
    /// Fully annotated positives: IoU, mask and sampling.
    pub full: usize,
    /// Weak positives, which only feed recognition.
    pub weak: usize,
    /// Positives with a transcription: CTC.
    pub recognition: usize,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub parts: LossParts,
    pub counts: AnchorCounts,
    pub total: f64,
    pub grads: HeadGradients,
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` of `b` grown by the crop margin.
pub fn mask_crop(b: &AxisAlignedBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    let x0 = clamp((b.left - MASK_CROP_MARGIN).floor(), width);
    let y0 = clamp((b.top - MASK_CROP_MARGIN).floor(), height);
    let x1 = clamp((b.right + MASK_CROP_MARGIN).ceil(), width).max(x0);
    let y1 = clamp((b.bottom + MASK_CROP_MARGIN).ceil(), height).max(y0);
    (x0, y0, x1, y1)
}

/// Evaluates every loss of a batch and its gradient w.r.t. the head
/// outputs. `targets[n]` must be built for the padded input size.
pub fn objective<T: Scalar>(heads: &HeadOutputs<T>, targets: &[TargetBundle], cfg: &LossConfig) -> Result<Objective> {
    let w = &cfg.weights;
    let (img_w, img_h) = heads.input_size;
    let batch = heads.prototypes.dims4().0;
    if targets.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{} target bundles for a batch of {batch}",
            targets.len()
        )));
    }
    for t in targets {
        if (t.image_width, t.image_height) != (img_w, img_h) || t.levels.len() != heads.levels.len() {
            return Err(Error::ShapeMismatch(format!(
                "targets built for {}x{} with {} levels, input is {img_w}x{img_h} with {}",
                t.image_width,
                t.image_height,
                t.levels.len(),
                heads.levels.len()
            )));
        }
    }
    let mut grads = HeadGradients {
        levels: heads
            .levels
            .iter()
            .map(|l| LevelGradients {
                confidence: Tensor::zeros(l.confidence.shape()),
                geometry: Tensor::zeros(l.geometry.shape()),
                coefficients: Tensor::zeros(l.coefficients.shape()),
                sampling: Tensor::zeros(l.sampling.shape()),
                char_logits: Tensor::zeros(l.char_logits.shape()),
            })
            .collect(),
        prototypes: Tensor::zeros(heads.prototypes.shape()),
    };
    let mut parts = LossParts::default();

    // confidence: one dice per image over the cells of all its levels,
    // averaged over the batch
    for l in &heads.levels {
        if l.confidence.numel() % batch != 0 {
            return Err(Error::ShapeMismatch("confidence map does not split into the batch".into()));
        }
    }
    for (n, t) in targets.iter().enumerate() {
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for (li, l) in heads.levels.iter().enumerate() {
            let lt = &t.levels[li];
            let cells = l.confidence.numel() / batch;
            if lt.cells() != cells {
                return Err(Error::ShapeMismatch(format!(
                    "level {li}: {} target cells, {cells} predicted",
                    lt.cells()
                )));
            }
            pred.extend(l.confidence.plane(n, 0).iter().map(|v| v.f64()));
            gt.extend(lt.owner.iter().map(|o| o.is_some() as u8 as f64));
        }
        let (lc, gc) = dice_loss_grad(&pred, &gt)?;
        parts.confidence += lc / batch as f64;
        let mut offset = 0;
        for g in &mut grads.levels {
            let cells = g.confidence.numel() / batch;
            let dst = &mut g.confidence.data_mut()[n * cells..(n + 1) * cells];
            for (d, src) in dst.iter_mut().zip(&gc[offset..offset + cells]) {
                *d = w.confidence * src / batch as f64;
            }
            offset += cells;
        }
    }

    // per-anchor terms
    let full = anchors(targets, |lt, c| lt.is_full(c));

    let full_count = full.len() as f64;
    let plane_area = img_w * img_h;
    let k_coef = heads.prototypes.dims4().1;
    for &(n, li, cell) in &full {
        let lh = &heads.levels[li];
        let lt = &targets[n].levels[li];
        let owner = lt.owner[cell].expect("positive");
        let inst = &targets[n].instances[owner];
        let (gw, hw) = (lt.width, lt.cells());
        let (cx, cy) = (cell % gw, cell / gw);
        let unit = if heads.geometry_in_stride_units { lt.spec.stride as f64 } else { 1.0 };
        let g = &mut grads.levels[li];

        // IoU
        let p = [0, 1, 2, 3].map(|ch| lh.geometry.at4(n, ch, cy, cx).f64() * unit);
        let (li_loss, li_grad) = iou_box_loss_grad(&p, &lt.geometry_at(cell));
        parts.iou += li_loss / full_count;
        for ch in 0..4 {
            g.geometry.data_mut()[(n * 4 + ch) * hw + cell] += w.iou * li_grad[ch] * unit / full_count;
        }

        // sampling; left at zero when supervision is off so logs show it
        let k2 = lh.sampling.dims4().1;
        let gt_s = if w.sampling_supervision_enabled { lt.sampling_at(cell) } else { Vec::new() };
        for (ch, &gs) in gt_s.iter().enumerate() {
            let d = lh.sampling.at4(n, ch, cy, cx).f64() - gs;
            parts.sampling += d.abs() / (full_count * k2 as f64);
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            g.sampling.data_mut()[(n * k2 + ch) * hw + cell] += w.sampling_weight() * sign / (full_count * k2 as f64);
        }

        // mask within the padded ground-truth box
        let (Some(bbox), Some(gt_mask)) = (&inst.bbox, &inst.mask) else {
            continue;
        };
        let (x0, y0, x1, y1) = mask_crop(bbox, img_w, img_h);
        let coef: Vec<f64> = (0..k_coef).map(|j| lh.coefficients.at4(n, j, cy, cx).f64()).collect();
        let mut soft = Vec::with_capacity((x1 - x0) * (y1 - y0));
        let mut truth = Vec::with_capacity(soft.capacity());
        for y in y0..y1 {
            for x in x0..x1 {
                let z: f64 = (0..k_coef)
                    .map(|j| coef[j] * heads.prototypes.data()[(n * k_coef + j) * plane_area + y * img_w + x].f64())
                    .sum();
                soft.push(crate::network::tape::sigmoid(z));
                truth.push(gt_mask.get(x, y) as u8 as f64);
            }
        }
        let (lm, gm) = dice_loss_grad(&soft, &truth)?;
        parts.mask += lm / full_count;
        let scale = w.mask / full_count;
        let mut gcoef = vec![0.0; k_coef];
        let mut i = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let dz = gm[i] * soft[i] * (1.0 - soft[i]) * scale;
                i += 1;
                if dz == 0.0 {
                    continue;
                }
                for j in 0..k_coef {
                    let idx = (n * k_coef + j) * plane_area + y * img_w + x;
                    gcoef[j] += dz * heads.prototypes.data()[idx].f64();
                    grads.prototypes.data_mut()[idx] += dz * coef[j];
                }
            }
        }
        for (j, gj) in gcoef.into_iter().enumerate() {
            g.coefficients.data_mut()[(n * k_coef + j) * hw + cell] += gj;
        }
    }

    // recognition on every positive anchor, weak ones included
    let recog: Vec<_> = anchors(targets, |lt, c| lt.is_positive(c))
        .into_iter()
        .filter(|&(n, li, c)| {
            let o = targets[n].levels[li].owner[c].expect("positive");
            !targets[n].instances[o].labels.is_empty()
        })
        .collect();
    let norm = match cfg.ctc_reduction {
        CtcReduction::Mean => recog.len().max(1) as f64,
        CtcReduction::Sum => 1.0,
    };
    for &(n, li, cell) in &recog {
        let lh = &heads.levels[li];
        let lt = &targets[n].levels[li];
        let owner = lt.owner[cell].expect("positive");
        let labels = &targets[n].instances[owner].labels;
        let gathered = gather_logits(&lh.sampling, &lh.char_logits, n, (cell % lt.width, cell / lt.width));
        match ctc_loss_grad(&gathered.logits, labels) {
            Some((nll, gl)) => {
                parts.ctc += nll / norm;
                let scaled: Vec<Vec<f64>> = gl
                    .into_iter()
                    .map(|r| r.into_iter().map(|v| v * w.ctc / norm).collect())
                    .collect();
                let g = &mut grads.levels[li];
                gathered.backward(&scaled, &lh.char_logits, &mut g.sampling, &mut g.char_logits);
            }
            None => {
                warn!(
                    "transcription of length {} does not fit {} sampling points",
                    labels.len(),
                    gathered.len()
                );
                parts.ctc += CTC_INFEASIBLE_PENALTY / norm;
            }
        }
    }

    let counts = AnchorCounts {
        full: full.len(),
        weak: anchors(targets, |lt, c| lt.is_positive(c) && !lt.is_full(c)).len(),
        recognition: recog.len(),
    };
    let total = total_loss(&parts, w)?;
    Ok(Objective {
        parts,
        counts,
        total,
        grads,
    })
}

/// `(batch item, level, cell)` of every cell accepted by `keep`.
fn anchors(
    targets: &[TargetBundle],
    keep: impl Fn(&crate::labelgen::LevelTargets, usize) -> bool,
) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (n, t) in targets.iter().enumerate() {
        for (li, lt) in t.levels.iter().enumerate() {
            out.extend((0..lt.cells()).filter(|&c| keep(lt, c)).map(|c| (n, li, c)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        let m = [1.0, 0.0, 1.0, 1.0];
        assert!(dice_loss(&m, &m).unwrap() < 1e-6);
        assert!((dice_loss(&[1.0; 5], &[0.0; 5]).unwrap() - 1.0).abs() < 1e-12);
        assert!((dice_loss(&[0.5; 8], &[1.0; 8]).unwrap() - 1.0 / 3.0).abs() < 1e-6);
        assert!(matches!(dice_loss(&[0.5; 3], &[1.0; 2]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn iou_examples() {
        let gt = [4.0, 6.0, 4.0, 6.0];
        assert!(iou_box_loss(&gt, &gt).abs() < 1e-12);
        let half = [2.0, 6.0, 2.0, 6.0];
        assert!((iou_box_loss(&half, &gt) - 2f64.ln()).abs() < 1e-12);
        let degenerate = iou_box_loss(&[0.0; 4], &gt);
        assert!(degenerate.is_finite() && degenerate > 0.0);
        assert!(iou_box_loss(&[1e-3, 50.0, 1e-3, 0.2], &[9.0, 1.0, 9.0, 1.0]).is_finite());
    }

    #[test]
    fn mask_examples() {
        // a 10x4 rectangle inside a 20x4 frame
        let gt: Vec<f64> = (0..80).map(|i| ((i % 20) < 10) as u8 as f64).collect();
        assert!(mask_loss(&gt, &gt).unwrap() < 1e-6);
        let inverted: Vec<f64> = gt.iter().map(|v| 1.0 - v).collect();
        assert!((mask_loss(&inverted, &gt).unwrap() - 1.0).abs() < 1e-6);
        let half: Vec<f64> = (0..80).map(|i| ((i % 20) < 5) as u8 as f64).collect();
        assert!((mask_loss(&half, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn sampling_examples() {
        let gt = [0.5, -1.0, 2.0, 0.0];
        assert_eq!(sampling_l1_loss(&gt, &gt), 0.0);
        let shifted: Vec<f64> = gt.iter().map(|v| v + 0.5).collect();
        assert!((sampling_l1_loss(&shifted, &gt) - 0.5).abs() < 1e-12);
        let mixed = [1.5, -1.25, 2.0, -2.0];
        // |1| + |-0.25| + |0| + |-2| = 3.25 over 4
        assert!((sampling_l1_loss(&mixed, &gt) - 0.8125).abs() < 1e-12);
    }

    fn brute_force_ctc(probs: &[Vec<f64>], target: &[usize]) -> f64 {
        let (steps, classes) = (probs.len(), probs[0].len());
        let mut total = 0.0;
        for code in 0..classes.pow(steps as u32) {
            let mut c = code;
            let path: Vec<usize> = (0..steps)
                .map(|_| {
                    let v = c % classes;
                    c /= classes;
                    v
                })
                .collect();
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &p in &path {
                if Some(p) != prev && p != BLANK {
                    collapsed.push(p);
                }
                prev = Some(p);
            }
            if collapsed == target {
                total += path.iter().enumerate().map(|(t, &p)| probs[t][p]).product::<f64>();
            }
        }
        -total.ln()
    }

    #[test]
    fn ctc_examples() {
        // classes: blank, a
        assert!((ctc_loss(&[vec![0.1, 0.9]], &[1]) - 0.9f64.ln().abs()).abs() < 1e-12);
        let two = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert!((ctc_loss(&two, &[1]) - -(0.75f64.ln())).abs() < 1e-12);
        let certain = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert!(ctc_loss(&certain, &[1, 2]).abs() < 1e-12);
        assert_eq!(ctc_loss(&[vec![0.5, 0.5]], &[1, 1]), CTC_INFEASIBLE_PENALTY);
    }

    #[test]
    fn ctc_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for steps in 1..=4 {
            for alphabet in 1..=3 {
                for _ in 0..20 {
                    let probs: Vec<Vec<f64>> = (0..steps)
                        .map(|_| {
                            let r: Vec<f64> = (0..=alphabet).map(|_| rng.random_range(0.05..1.0)).collect();
                            let s: f64 = r.iter().sum();
                            r.into_iter().map(|v| v / s).collect()
                        })
                        .collect();
                    let len = rng.random_range(1..=steps);
                    let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..=alphabet)).collect();
                    if ctc_required_length(&target) > steps {
                        continue;
                    }
                    let a = ctc_loss(&probs, &target);
                    let b = brute_force_ctc(&probs, &target);
                    assert!((a - b).abs() < 1e-9, "{target:?}: {a} vs {b}");
                }
            }
        }
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let eps = 1e-6;
        for i in 0..x.len() {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += eps;
            m[i] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(rel < 1e-3, "component {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let pred = [0.2, 0.7, 0.4, 0.9, 0.1];
        let gt = [0.0, 1.0, 1.0, 1.0, 0.0];
        fd_check(|p| dice_loss(p, &gt).unwrap(), &pred, &dice_loss_grad(&pred, &gt).unwrap().1);

        let g = [3.0, 5.0, 2.0, 7.0];
        for p in [[1.0, 6.0, 3.0, 2.0], [4.0, 4.5, 1.0, 9.0]] {
            let f = |v: &[f64]| iou_box_loss(&[v[0], v[1], v[2], v[3]], &g);
            fd_check(f, &p, &iou_box_loss_grad(&p, &g).1);
        }

        let logits = vec![
            vec![0.3, -1.2, 0.8, 0.1],
            vec![1.1, 0.4, -0.5, 0.0],
            vec![-0.2, 0.9, 0.3, 1.4],
            vec![0.6, -0.7, 1.0, 0.2],
        ];
        let target = [1, 3, 3];
        let flat: Vec<f64> = logits.concat();
        let (_, grad) = ctc_loss_grad(&logits, &target).unwrap();
        let f = |v: &[f64]| {
            let rows: Vec<Vec<f64>> = v.chunks(4).map(|c| c.to_vec()).collect();
            ctc_loss_grad(&rows, &target).unwrap().0
        };
        fd_check(f, &flat, &grad.concat());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossParts::default(), &w).unwrap(), 0.0);
        let ones = LossParts {
            confidence: 1.0,
            iou: 1.0,
            mask: 1.0,
            sampling: 1.0,
            ctc: 1.0,
        };
        assert_eq!(total_loss(&ones, &w).unwrap(), 17.0);
        let off = LossWeights {
            sampling_supervision_enabled: false,
            ..w
        };
        assert_eq!(total_loss(&ones, &off).unwrap(), 16.0);
        let bad = LossParts { mask: f64::NAN, ..ones };
        match total_loss(&bad, &w) {
            Err(Error::NonFiniteLoss { term, .. }) => assert_eq!(term, "mask"),
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
        // exact linearity in each part
        let twice = LossParts { ctc: 2.0, ..ones };
        assert_eq!(total_loss(&twice, &w).unwrap() - total_loss(&ones, &w).unwrap(), w.ctc);
    }

    fn random_heads(rng: &mut rand_chacha::ChaCha8Rng, size: usize, k: usize) -> HeadOutputs<f64> {
        use crate::network::LevelHeads;
        use rand::Rng;
        let mut t = |shape: &[usize], lo: f64, hi: f64| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
        };
        let levels = [4, 8]
            .map(|s| {
                let g = size / s;
                LevelHeads {
                    stride: s,
                    confidence: t(&[1, 1, g, g], 0.05, 0.95),
                    geometry: t(&[1, 4, g, g], 0.5, 3.0),
                    coefficients: t(&[1, 4, g, g], -1.0, 1.0),
                    sampling: t(&[1, 2 * k, g, g], -2.3, 2.3),
                    char_logits: t(&[1, 37, g, g], -1.0, 1.0),
                }
            })
            .to_vec();
        HeadOutputs {
            levels,
            prototypes: t(&[1, 4, size, size], -1.0, 1.0),
            input_size: (size, size),
            geometry_in_stride_units: true,
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        use crate::geometry::{Point, Polygon};
        use crate::labelgen::{build_targets, InstanceAnnotation, LabelConfig};
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let k = 5;
        let insts = vec![
            InstanceAnnotation::with_polygon(Polygon::rect(6.0, 8.0, 50.0, 22.0), "ab"),
            InstanceAnnotation::weak(Point::new(30.0, 50.0), "c"),
        ];
        let cfg = LabelConfig {
            num_points: k,
            ..LabelConfig::default()
        };
        let targets = vec![build_targets(&insts, (64, 64), &cfg).unwrap()];
        let heads = random_heads(&mut rng, 64, k);
        let loss_cfg = LossConfig::default();
        let obj = objective(&heads, &targets, &loss_cfg).unwrap();
        assert!(obj.parts.iou > 0.0 && obj.parts.mask > 0.0 && obj.parts.ctc > 0.0);

        let eps = 1e-6;
        let eval = |h: &HeadOutputs<f64>| objective(h, &targets, &loss_cfg).unwrap().total;
        let mut checked = 0;
        for field in 0..6 {
            // entries with a nonzero analytic gradient, plus a few random ones
            let (tensor, grad): (fn(&mut HeadOutputs<f64>) -> &mut Tensor<f64>, &Tensor<f64>) = match field {
                0 => (|h| &mut h.levels[0].confidence, &obj.grads.levels[0].confidence),
                1 => (|h| &mut h.levels[0].geometry, &obj.grads.levels[0].geometry),
                2 => (|h| &mut h.levels[0].coefficients, &obj.grads.levels[0].coefficients),
                3 => (|h| &mut h.levels[0].sampling, &obj.grads.levels[0].sampling),
                4 => (|h| &mut h.levels[0].char_logits, &obj.grads.levels[0].char_logits),
                _ => (|h| &mut h.prototypes, &obj.grads.prototypes),
            };
            let nonzero: Vec<usize> = (0..grad.numel()).filter(|&i| grad.data()[i] != 0.0).collect();
            assert!(!nonzero.is_empty(), "field {field} has no gradient");
            for _ in 0..8 {
                let i = nonzero[rng.random_range(0..nonzero.len())];
                let (mut hp, mut hm) = (heads.clone(), heads.clone());
                tensor(&mut hp).data_mut()[i] += eps;
                tensor(&mut hm).data_mut()[i] -= eps;
                let fd = (eval(&hp) - eval(&hm)) / (2.0 * eps);
                let an = grad.data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-3, "field {field} entry {i}: {fd} vs {an}");
                checked += 1;
            }
        }
        assert_eq!(checked, 48);
    }
}
