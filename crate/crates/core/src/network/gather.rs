//! Differentiable point gathering of character logits.
//!
//! Offsets are stride-normalized, so an anchor cell `(cx, cy)` with offset
//! `(ox, oy)` samples grid position `(cx + ox, cy + oy)`, where integer grid
//! positions are cell centers. Logits are bilinearly interpolated with border
//! clamping and softmaxed per point afterwards.

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Axis {
    lo: usize,
    hi: usize,
    frac: f64,
    /// False when the coordinate was clamped, which zeroes its gradient.
    active: bool,
}

fn axis(coord: f64, size: usize) -> Axis {
    let max = (size - 1) as f64;
    let (c, active) = if coord < 0.0 {
        (0.0, false)
    } else if coord > max {
        (max, false)
    } else {
        (coord, true)
    };
    let lo = (c.floor() as usize).min(size - 1);
    let hi = (lo + 1).min(size - 1);
    Axis {
        lo,
        hi,
        frac: c - lo as f64,
        active: active && hi != lo,
    }
}

/// Interpolated logits of the K points sampled around one anchor, with the
/// taps needed to back-propagate into the sampling and logit maps.
#[derive(Debug, Clone)]
pub struct GatheredSequence {
    pub batch_index: usize,
    pub cell: (usize, usize),
    /// `K` rows of interpolated logits.
    pub logits: Vec<Vec<f64>>,
    taps: Vec<(Axis, Axis)>,
}

/// Gathers the `K x classes` logit sequence of anchor `cell` = `(x, y)` in
/// batch item `n`. `sampling` is `[N, 2K, h, w]`, `char_logits` is
/// `[N, classes, h, w]`.
pub fn gather_logits<T: Scalar>(
    sampling: &Tensor<T>,
    char_logits: &Tensor<T>,
    n: usize,
    cell: (usize, usize),
) -> GatheredSequence {
    let (_, two_k, h, w) = sampling.dims4();
    let (_, classes, lh, lw) = char_logits.dims4();
    assert_eq!((h, w), (lh, lw), "sampling and logit grids differ");
    assert!(cell.0 < w && cell.1 < h, "anchor outside the grid");
    let k = two_k / 2;
    let mut logits = Vec::with_capacity(k);
    let mut taps = Vec::with_capacity(k);
    for i in 0..k {
        let ox = sampling.at4(n, 2 * i, cell.1, cell.0).f64();
        let oy = sampling.at4(n, 2 * i + 1, cell.1, cell.0).f64();
        let ax = axis(cell.0 as f64 + ox, w);
        let ay = axis(cell.1 as f64 + oy, h);
        let row = (0..classes)
            .map(|c| {
                let p = char_logits.plane(n, c);
                interpolate(p, w, ax, ay)
            })
            .collect();
        logits.push(row);
        taps.push((ax, ay));
    }
    GatheredSequence {
        batch_index: n,
        cell,
        logits,
        taps,
    }
}

fn interpolate<T: Scalar>(plane: &[T], w: usize, ax: Axis, ay: Axis) -> f64 {
    let v = |y: usize, x: usize| plane[y * w + x].f64();
    let top = v(ay.lo, ax.lo) * (1.0 - ax.frac) + v(ay.lo, ax.hi) * ax.frac;
    let bot = v(ay.hi, ax.lo) * (1.0 - ax.frac) + v(ay.hi, ax.hi) * ax.frac;
    top * (1.0 - ay.frac) + bot * ay.frac
}

impl GatheredSequence {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|r| softmax(r)).collect()
    }

    /// Accumulates the gradient `grad` (w.r.t. the interpolated logits) into
    /// `grad_sampling` and `grad_logits`, shaped like the gathered maps.
    pub fn backward<T: Scalar>(
        &self,
        grad: &[Vec<f64>],
        char_logits: &Tensor<T>,
        grad_sampling: &mut Tensor<f64>,
        grad_logits: &mut Tensor<f64>,
    ) {
        let (_, classes, h, w) = char_logits.dims4();
        let n = self.batch_index;
        let (cx, cy) = self.cell;
        let two_k = grad_sampling.dims4().1;
        for (i, ((ax, ay), g)) in self.taps.iter().zip(grad).enumerate() {
            let (mut gx, mut gy) = (0.0, 0.0);
            let weights = [
                (ay.lo, ax.lo, (1.0 - ay.frac) * (1.0 - ax.frac)),
                (ay.lo, ax.hi, (1.0 - ay.frac) * ax.frac),
                (ay.hi, ax.lo, ay.frac * (1.0 - ax.frac)),
                (ay.hi, ax.hi, ay.frac * ax.frac),
            ];
            for (c, &gc) in g.iter().enumerate().take(classes) {
                if gc == 0.0 {
                    continue;
                }
                let plane = char_logits.plane(n, c);
                let v = |y: usize, x: usize| plane[y * w + x].f64();
                if ax.active {
                    let d = (1.0 - ay.frac) * (v(ay.lo, ax.hi) - v(ay.lo, ax.lo))
                        + ay.frac * (v(ay.hi, ax.hi) - v(ay.hi, ax.lo));
                    gx += gc * d;
                }
                if ay.active {
                    let d = (1.0 - ax.frac) * (v(ay.hi, ax.lo) - v(ay.lo, ax.lo))
                        + ax.frac * (v(ay.hi, ax.hi) - v(ay.lo, ax.hi));
                    gy += gc * d;
                }
                let base = (n * classes + c) * h * w;
                let dst = grad_logits.data_mut();
                for &(y, x, wt) in &weights {
                    dst[base + y * w + x] += gc * wt;
                }
            }
            let sbase = n * two_k * h * w + cy * w + cx;
            let dst = grad_sampling.data_mut();
            dst[sbase + 2 * i * h * w] += gx;
            dst[sbase + (2 * i + 1) * h * w] += gy;
        }
    }
}

/// The `K x classes` probability sequence of one anchor.
pub fn gather_sequence<T: Scalar>(
    sampling: &Tensor<T>,
    char_logits: &Tensor<T>,
    n: usize,
    cell: (usize, usize),
) -> Vec<Vec<f64>> {
    gather_logits(sampling, char_logits, n, cell).probabilities()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
