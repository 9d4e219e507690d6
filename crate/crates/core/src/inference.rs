//! From head outputs to spotting results: candidate selection, cross-level
//! NMS, mask assembly, polygon extraction and CTC decoding.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alphabet::{self, BLANK};
use crate::error::{Error, Result};
use crate::geometry::{mask_to_polygons, AxisAlignedBox, BinaryGrid, Point, Polygon};
use crate::labelgen::cell_center;
use crate::losses::mask_crop;
use crate::network::{gather_sequence, prepare_batch, HeadOutputs, Mode, Model};
use crate::tensor::{Scalar, Tensor};

/// Normalized edit distance above which lexicon correction is refused.
pub const LEXICON_MAX_DISTANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub confidence_threshold: f64,
    pub nms_iou_threshold: f64,
    pub mask_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.5,
            nms_iou_threshold: 0.5,
            mask_threshold: 0.5,
        }
    }
}

/// One positive anchor proposed by the confidence map.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub level: usize,
    /// `(x, y)` grid cell.
    pub cell: (usize, usize),
    pub score: f64,
    /// Box in padded-input pixels.
    pub bbox: AxisAlignedBox,
    pub coefficients: Vec<f64>,
    pub text: String,
    pub text_score: f64,
    pub polygon: Option<Polygon>,
}

/// Every cell of batch item `n` with confidence `>= threshold`, in level
/// then raster order.
pub fn select_candidates<T: Scalar>(heads: &HeadOutputs<T>, n: usize, threshold: f64) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (li, l) in heads.levels.iter().enumerate() {
        let (_, _, h, w) = l.confidence.dims4();
        let unit = if heads.geometry_in_stride_units { l.stride as f64 } else { 1.0 };
        let k = l.coefficients.dims4().1;
        for y in 0..h {
            for x in 0..w {
                let score = l.confidence.at4(n, 0, y, x).f64();
                if score < threshold {
                    continue;
                }
                let d = [0, 1, 2, 3].map(|c| l.geometry.at4(n, c, y, x).f64() * unit);
                out.push(Candidate {
                    level: li,
                    cell: (x, y),
                    score,
                    bbox: AxisAlignedBox::from_distances(cell_center(x, y, l.stride), d),
                    coefficients: (0..k).map(|j| l.coefficients.at4(n, j, y, x).f64()).collect(),
                    text: String::new(),
                    text_score: 0.0,
                    polygon: None,
                });
            }
        }
    }
    out
}

/// Indices kept by greedy box NMS. Ties in score keep the earlier index.
pub fn nms_indices(boxes: &[AxisAlignedBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&j| boxes[i].iou(&boxes[j]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Greedy suppression on box IoU across all levels jointly, highest score
/// first.
pub fn nms(cands: Vec<Candidate>, iou_threshold: f64) -> Vec<Candidate> {
    let boxes: Vec<AxisAlignedBox> = cands.iter().map(|c| c.bbox).collect();
    let scores: Vec<f64> = cands.iter().map(|c| c.score).collect();
    let keep = nms_indices(&boxes, &scores, iou_threshold);
    let mut slots: Vec<Option<Candidate>> = cands.into_iter().map(Some).collect();
    keep.into_iter().map(|i| slots[i].take().expect("kept once")).collect()
}

/// `sigmoid(sum_j c_j P_j) >= threshold` over batch item `n` of the
/// `[N, k, H, W]` prototypes, restricted to `crop` = `(x0, y0, x1, y1)`
/// when given. Ties at the threshold are foreground.
pub fn assemble_mask<T: Scalar>(
    prototypes: &Tensor<T>,
    n: usize,
    coefficients: &[f64],
    threshold: f64,
    crop: Option<(usize, usize, usize, usize)>,
) -> BinaryGrid {
    let (_, k, h, w) = prototypes.dims4();
    assert_eq!(k, coefficients.len(), "coefficient count");
    let (x0, y0, x1, y1) = crop.unwrap_or((0, 0, w, h));
    // sigmoid(z) >= t  <=>  z >= logit(t)
    let cut = if threshold <= 0.0 {
        f64::NEG_INFINITY
    } else if threshold >= 1.0 {
        f64::INFINITY
    } else {
        (threshold / (1.0 - threshold)).ln()
    };
    let mut grid = BinaryGrid::new(w, h);
    let planes: Vec<&[T]> = (0..k).map(|j| prototypes.plane(n, j)).collect();
    for y in y0..y1.min(h) {
        for x in x0..x1.min(w) {
            let z: f64 = planes.iter().zip(coefficients).map(|(p, c)| c * p[y * w + x].f64()).sum();
            if z >= cut {
                grid.set(x, y, true);
            }
        }
    }
    grid
}

/// Per-step argmax (lowest index on ties), repeats collapsed, blanks
/// removed.
pub fn ctc_greedy_decode(seq: &[Vec<f64>]) -> String {
    ctc_greedy_decode_scored(seq).0
}

/// Decoded text and the mean max-probability over its non-blank
/// emissions (0 for an empty result).
pub fn ctc_greedy_decode_scored(seq: &[Vec<f64>]) -> (String, f64) {
    let mut labels = Vec::new();
    let mut probs = Vec::new();
    let mut prev = None;
    for row in seq {
        let (best, p) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if Some(best) != prev && best != BLANK {
            labels.push(best);
            probs.push(p);
        }
        prev = Some(best);
    }
    let score = if probs.is_empty() {
        0.0
    } else {
        probs.iter().sum::<f64>() / probs.len() as f64
    };
    (alphabet::decode(&labels), score)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LexiconMode {
    #[default]
    None,
    /// Every word of the test set.
    Full,
    /// A user-supplied list (strong, weak or generic style).
    Custom,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    pub mode: LexiconMode,
    pub words: BTreeSet<String>,
}

impl Lexicon {
    pub fn none() -> Self {
        Self::default()
    }

    /// Words are case-folded to the alphabet; empty results are dropped.
    pub fn new<S: AsRef<str>>(mode: LexiconMode, words: impl IntoIterator<Item = S>) -> Self {
        Self {
            mode,
            words: words
                .into_iter()
                .map(|w| alphabet::normalize(w.as_ref()))
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    /// One word per line.
    pub fn from_file(mode: LexiconMode, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(mode, text.lines()))
    }
}

/// Nearest lexicon word by edit distance, ties broken lexicographically.
/// The text is returned unchanged when the lexicon is off or empty, the
/// text is empty, or the best normalized distance exceeds
/// [`LEXICON_MAX_DISTANCE`].
pub fn lexicon_correct(text: &str, lex: &Lexicon) -> String {
    if lex.mode == LexiconMode::None || text.is_empty() {
        return text.to_string();
    }
    // BTreeSet iteration is sorted, so the first minimum is the
    // lexicographically smallest
    let best = lex
        .words
        .iter()
        .map(|w| (strsim::levenshtein(text, w), w))
        .min_by_key(|&(d, _)| d);
    match best {
        Some((d, w)) => {
            let norm = d as f64 / text.chars().count().max(w.chars().count()) as f64;
            if norm > LEXICON_MAX_DISTANCE {
                text.to_string()
            } else {
                w.clone()
            }
        }
        None => text.to_string(),
    }
}

/// One spotted word in original-image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpottedWord {
    #[serde(with = "flat_polygon")]
    pub polygon: Polygon,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotResult {
    pub image: String,
    pub results: Vec<SpottedWord>,
}

mod flat_polygon {
    use super::Polygon;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &Polygon, s: S) -> Result<S::Ok, S::Error> {
        p.to_flat().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Polygon, D::Error> {
        let flat = Vec::<f64>::deserialize(d)?;
        Polygon::from_flat(&flat).map_err(serde::de::Error::custom)
    }
}

/// Decodes the transcription read at one anchor.
pub fn recognize_at<T: Scalar>(heads: &HeadOutputs<T>, n: usize, level: usize, cell: (usize, usize)) -> (String, f64) {
    let l = &heads.levels[level];
    ctc_greedy_decode_scored(&gather_sequence(&l.sampling, &l.char_logits, n, cell))
}

/// Runs selection, NMS, mask assembly and recognition on batch item `n`,
/// returning the surviving candidates with text and polygon filled in.
/// Coordinates are in padded-input pixels.
pub fn decode_candidates<T: Scalar>(
    heads: &HeadOutputs<T>,
    n: usize,
    cfg: &InferenceConfig,
    lex: &Lexicon,
) -> Vec<Candidate> {
    let (w, h) = heads.input_size;
    let mut kept = nms(select_candidates(heads, n, cfg.confidence_threshold), cfg.nms_iou_threshold);
    for c in &mut kept {
        let crop = mask_crop(&c.bbox, w, h);
        let mask = assemble_mask(&heads.prototypes, n, &c.coefficients, cfg.mask_threshold, Some(crop));
        // fall back to the box when the mask is empty or fragmented below
        // the minimum component size
        c.polygon = Some(
            mask_to_polygons(&mask)
                .into_iter()
                .next()
                .unwrap_or_else(|| c.bbox.to_polygon()),
        );
        let (text, score) = recognize_at(heads, n, c.level, c.cell);
        c.text = lexicon_correct(&text, lex);
        c.text_score = score;
    }
    kept
}

/// Clamps a polygon into `[0, width] x [0, height]`.
pub fn clip_to_image(poly: &Polygon, width: usize, height: usize) -> Polygon {
    poly.map_points(|p| Point::new(p.x.clamp(0.0, width as f64), p.y.clamp(0.0, height as f64)))
}

/// Spots every word of `image`.
pub fn spot<T: Scalar>(
    model: &Model<T>,
    image: &image::RgbImage,
    name: &str,
    cfg: &InferenceConfig,
    lex: &Lexicon,
) -> SpotResult {
    spot_traced(model, image, name, cfg, lex).0
}

/// Where one spotted word was read: its anchor cell center and the sampled
/// points, in image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorTrace {
    pub anchor: Point,
    pub samples: Vec<Point>,
}

/// Sampled points of the anchor at `cell`, in input pixels.
pub fn sample_points<T: Scalar>(heads: &HeadOutputs<T>, n: usize, level: usize, cell: (usize, usize)) -> Vec<Point> {
    let l = &heads.levels[level];
    let c = cell_center(cell.0, cell.1, l.stride);
    let s = l.stride as f64;
    (0..l.sampling.dims4().1 / 2)
        .map(|i| {
            let ox = l.sampling.at4(n, 2 * i, cell.1, cell.0).f64();
            let oy = l.sampling.at4(n, 2 * i + 1, cell.1, cell.0).f64();
            Point::new(c.x + ox * s, c.y + oy * s)
        })
        .collect()
}

/// [`spot`] that also returns one [`AnchorTrace`] per result.
pub fn spot_traced<T: Scalar>(
    model: &Model<T>,
    image: &image::RgbImage,
    name: &str,
    cfg: &InferenceConfig,
    lex: &Lexicon,
) -> (SpotResult, Vec<AnchorTrace>) {
    let (batch, sizes) = prepare_batch::<T>(&[image]);
    let heads = model.forward(&batch, Mode::Eval).heads(model.config.geometry_in_stride_units);
    let (w, h) = sizes[0];
    let mut results = Vec::new();
    let mut traces = Vec::new();
    for c in decode_candidates(&heads, 0, cfg, lex) {
        if c.text.is_empty() {
            continue;
        }
        traces.push(AnchorTrace {
            anchor: cell_center(c.cell.0, c.cell.1, heads.levels[c.level].stride),
            samples: sample_points(&heads, 0, c.level, c.cell),
        });
        results.push(SpottedWord {
            polygon: clip_to_image(c.polygon.as_ref().expect("filled"), w, h),
            text: c.text,
            score: c.score,
        });
    }
    (
        SpotResult {
            image: name.to_string(),
            results,
        },
        traces,
    )
}

/// Loads and spots an image file.
pub fn spot_file<T: Scalar>(model: &Model<T>, path: &Path, cfg: &InferenceConfig, lex: &Lexicon) -> Result<SpotResult> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(spot(model, &img, &name, cfg, lex))
}

pub fn write_results(path: &Path, results: &[SpotResult]) -> Result<()> {
    let text = serde_json::to_string_pretty(results)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<SpotResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
