//! Detection, end-to-end and word-spotting scores, and the recognition
//! error rate of well-localized detections.
//!
//! Matching is greedy and one-to-one by descending polygon IoU. End-to-end
//! scoring reuses the detection matching and additionally requires the
//! case-folded transcriptions to agree, so its true positives are always a
//! subset of the detection ones. An image with neither predictions nor
//! ground truth scores a perfect 1 by convention.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alphabet;
use crate::geometry::{polygon_iou, Polygon};
use crate::inference::{lexicon_correct, Lexicon};

pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub polygon: Polygon,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub polygon: Polygon,
    pub text: String,
    /// `false` for unreadable words excluded from word spotting.
    pub care: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Matches and counts, per image or accumulated over a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matches: Vec<Match>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchReport {
    fn empty_case(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn precision(&self) -> f64 {
        match (self.empty_case(), self.tp + self.fp) {
            (true, _) => 1.0,
            (false, 0) => 0.0,
            (false, d) => self.tp as f64 / d as f64,
        }
    }

    pub fn recall(&self) -> f64 {
        match (self.empty_case(), self.tp + self.fn_) {
            (true, _) => 1.0,
            (false, 0) => 0.0,
            (false, d) => self.tp as f64 / d as f64,
        }
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }

    /// Adds the counts of `other`; match indices are per image and are not
    /// carried over.
    pub fn accumulate(&mut self, other: &MatchReport) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Harmonic mean, 0 when both are 0.
pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Greedy one-to-one matching of pairs with IoU `>= iou_threshold`.
pub fn match_polygons(preds: &[Polygon], gts: &[Polygon], iou_threshold: f64) -> Vec<Match> {
    let mut pairs = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let iou = polygon_iou(p, g);
            if iou >= iou_threshold {
                pairs.push(Match { pred: i, gt: j, iou });
            }
        }
    }
    pairs.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.pred.cmp(&b.pred)).then(a.gt.cmp(&b.gt)));
    let mut used_p = vec![false; preds.len()];
    let mut used_g = vec![false; gts.len()];
    let mut out = Vec::new();
    for m in pairs {
        if !used_p[m.pred] && !used_g[m.gt] {
            used_p[m.pred] = true;
            used_g[m.gt] = true;
            out.push(m);
        }
    }
    out.sort_by_key(|m| m.pred);
    out
}

pub fn match_detections(preds: &[Polygon], gts: &[Polygon], iou_threshold: f64) -> MatchReport {
    let matches = match_polygons(preds, gts, iou_threshold);
    let tp = matches.len();
    MatchReport {
        tp,
        fp: preds.len() - tp,
        fn_: gts.len() - tp,
        matches,
    }
}

fn texts_agree(pred: &str, gt: &str, lex: &Lexicon) -> bool {
    let p = lexicon_correct(&alphabet::normalize(pred), lex);
    p == alphabet::normalize(gt)
}

fn polygons<'a>(it: impl Iterator<Item = &'a Polygon>) -> Vec<Polygon> {
    it.cloned().collect()
}

/// A match is a true positive only when the (lexicon-corrected)
/// transcription equals the ground truth.
pub fn e2e_score(preds: &[Prediction], gts: &[GroundTruth], lex: &Lexicon) -> MatchReport {
    let det = match_polygons(
        &polygons(preds.iter().map(|p| &p.polygon)),
        &polygons(gts.iter().map(|g| &g.polygon)),
        MATCH_IOU,
    );
    let matches: Vec<Match> = det
        .into_iter()
        .filter(|m| texts_agree(&preds[m.pred].text, &gts[m.gt].text, lex))
        .collect();
    let tp = matches.len();
    MatchReport {
        tp,
        fp: preds.len() - tp,
        fn_: gts.len() - tp,
        matches,
    }
}

/// Like [`e2e_score`], but ground truth with `care == false` never counts
/// as a miss, and predictions matched to it are neither hits nor false
/// alarms.
pub fn word_spotting_score(preds: &[Prediction], gts: &[GroundTruth], lex: &Lexicon) -> MatchReport {
    let det = match_polygons(
        &polygons(preds.iter().map(|p| &p.polygon)),
        &polygons(gts.iter().map(|g| &g.polygon)),
        MATCH_IOU,
    );
    let ignored_preds = det.iter().filter(|m| !gts[m.gt].care).count();
    let matches: Vec<Match> = det
        .into_iter()
        .filter(|m| gts[m.gt].care && texts_agree(&preds[m.pred].text, &gts[m.gt].text, lex))
        .collect();
    let tp = matches.len();
    let cared = gts.iter().filter(|g| g.care).count();
    MatchReport {
        tp,
        fp: preds.len() - tp - ignored_preds,
        fn_: cared - tp,
        matches,
    }
}

/// Transcription errors among detections matched with IoU strictly above
/// 0.5.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCount {
    pub matched: usize,
    pub wrong: usize,
}

impl ErrorCount {
    /// `None` when nothing was matched.
    pub fn rate(&self) -> Option<f64> {
        (self.matched > 0).then(|| self.wrong as f64 / self.matched as f64)
    }

    pub fn accumulate(&mut self, other: &ErrorCount) {
        self.matched += other.matched;
        self.wrong += other.wrong;
    }
}

pub fn recognition_errors(preds: &[Prediction], gts: &[GroundTruth]) -> ErrorCount {
    let det = match_polygons(
        &polygons(preds.iter().map(|p| &p.polygon)),
        &polygons(gts.iter().map(|g| &g.polygon)),
        MATCH_IOU,
    );
    let mut c = ErrorCount::default();
    for m in det.iter().filter(|m| m.iou > MATCH_IOU) {
        c.matched += 1;
        if !texts_agree(&preds[m.pred].text, &gts[m.gt].text, &Lexicon::none()) {
            c.wrong += 1;
        }
    }
    c
}

/// Fraction of wrong transcriptions among matches, or `None` when there
/// are no matches.
pub fn recognition_error_rate(preds: &[Prediction], gts: &[GroundTruth]) -> Option<f64> {
    recognition_errors(preds, gts).rate()
}

/// Dataset-level scores under the None and Full lexicon protocols.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub images: usize,
    pub detection: MatchReport,
    pub e2e_none: MatchReport,
    pub e2e_full: MatchReport,
    pub spotting_none: MatchReport,
    pub spotting_full: MatchReport,
    pub errors: ErrorCount,
}

impl ScoreReport {
    /// Adds one image; `full` is the lexicon of the Full protocol.
    pub fn add_image(&mut self, preds: &[Prediction], gts: &[GroundTruth], full: &Lexicon) {
        let none = Lexicon::none();
        let polys = |v: Vec<&Polygon>| v.into_iter().cloned().collect::<Vec<_>>();
        self.images += 1;
        self.detection.accumulate(&match_detections(
            &polys(preds.iter().map(|p| &p.polygon).collect()),
            &polys(gts.iter().map(|g| &g.polygon).collect()),
            MATCH_IOU,
        ));
        self.e2e_none.accumulate(&e2e_score(preds, gts, &none));
        self.e2e_full.accumulate(&e2e_score(preds, gts, full));
        self.spotting_none.accumulate(&word_spotting_score(preds, gts, &none));
        self.spotting_full.accumulate(&word_spotting_score(preds, gts, full));
        self.errors.accumulate(&recognition_errors(preds, gts));
    }

    /// Fixed-layout text table with columns `task lexicon R P F`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images {}", self.images);
        let _ = writeln!(s, "{:<14} {:<8} {:>7} {:>7} {:>7}", "task", "lexicon", "R", "P", "F");
        let rows = [
            ("detection", "-", &self.detection),
            ("e2e", "None", &self.e2e_none),
            ("e2e", "Full", &self.e2e_full),
            ("word_spotting", "None", &self.spotting_none),
            ("word_spotting", "Full", &self.spotting_full),
        ];
        for (task, lex, r) in rows {
            let _ = writeln!(
                s,
                "{:<14} {:<8} {:>7.4} {:>7.4} {:>7.4}",
                task,
                lex,
                r.recall(),
                r.precision(),
                r.f_measure()
            );
        }
        match self.errors.rate() {
            Some(e) => {
                let _ = writeln!(s, "recognition_error_rate {e:.4} ({}/{})", self.errors.wrong, self.errors.matched);
            }
            None => {
                let _ = writeln!(s, "recognition_error_rate n/a (no matches)");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::LexiconMode;

    fn sq(x: f64) -> Polygon {
        Polygon::rect(x, 0.0, x + 10.0, 10.0)
    }

    fn pred(x: f64, text: &str) -> Prediction {
        Prediction {
            polygon: sq(x),
            text: text.into(),
            score: 0.9,
        }
    }

    fn gt(x: f64, text: &str, care: bool) -> GroundTruth {
        GroundTruth {
            polygon: sq(x),
            text: text.into(),
            care,
        }
    }

    #[test]
    fn detection_examples() {
        let g = [sq(0.0), sq(20.0)];
        let r = match_detections(&g, &g, MATCH_IOU);
        assert_eq!((r.precision(), r.recall(), r.f_measure()), (1.0, 1.0, 1.0));
        let r = match_detections(&[], &g, MATCH_IOU);
        assert_eq!((r.recall(), r.precision(), r.f_measure()), (0.0, 0.0, 0.0));
        let r = match_detections(&[sq(0.0), sq(1.0)], &[sq(0.0)], MATCH_IOU);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 0));
        assert_eq!(r.matches[0].pred, 0);
        let r = match_detections(&[], &[], MATCH_IOU);
        assert_eq!((r.precision(), r.recall(), r.f_measure()), (1.0, 1.0, 1.0));
    }

    #[test]
    fn e2e_examples() {
        let none = Lexicon::none();
        let r = e2e_score(&[pred(0.0, "cat")], &[gt(0.0, "dog", true)], &none);
        assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));
        let full = Lexicon::new(LexiconMode::Full, ["mirvish", "dog"]);
        let p = [pred(0.0, "MIRVISS")];
        let g = [gt(0.0, "Mirvish", true)];
        assert_eq!(e2e_score(&p, &g, &none).tp, 0);
        assert_eq!(e2e_score(&p, &g, &full).tp, 1);
        let r = e2e_score(&[], &[], &none);
        assert_eq!(r.f_measure(), 1.0);
    }

    #[test]
    fn word_spotting_examples() {
        let none = Lexicon::none();
        let p = [pred(0.0, "a"), pred(20.0, "b")];
        let g = [gt(0.0, "a", true), gt(20.0, "x", true)];
        assert_eq!(word_spotting_score(&p, &g, &none), e2e_score(&p, &g, &none));
        let r = word_spotting_score(&[pred(0.0, "a")], &[gt(0.0, "a", true), gt(40.0, "zz", false)], &none);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
        let r = word_spotting_score(&[pred(0.0, "a"), pred(40.0, "q")], &[gt(0.0, "a", true), gt(40.0, "zz", false)], &none);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
    }

    #[test]
    fn error_rate_examples() {
        let g: Vec<GroundTruth> = (0..4).map(|i| gt(20.0 * i as f64, "ab", true)).collect();
        let right: Vec<Prediction> = (0..4).map(|i| pred(20.0 * i as f64, "ab")).collect();
        assert_eq!(recognition_error_rate(&right, &g), Some(0.0));
        let half: Vec<Prediction> = (0..4).map(|i| pred(20.0 * i as f64, if i < 2 { "ab" } else { "x" })).collect();
        assert_eq!(recognition_error_rate(&half, &g), Some(0.5));
        assert_eq!(recognition_error_rate(&[], &g), None);
        // 250 matches with 44 wrong
        let mut total = ErrorCount::default();
        for i in 0..250 {
            let text = if i < 44 { "wrong" } else { "ab" };
            total.accumulate(&recognition_errors(&[pred(0.0, text)], &[gt(0.0, "ab", true)]));
        }
        assert!((total.rate().unwrap() - 0.176).abs() < 1e-12);
    }

    #[test]
    fn report_layout() {
        let mut r = ScoreReport::default();
        r.add_image(&[pred(0.0, "ab")], &[gt(0.0, "ab", true)], &Lexicon::none());
        let text = r.render();
        let header = text.lines().nth(1).unwrap();
        assert_eq!(header.split_whitespace().collect::<Vec<_>>(), ["task", "lexicon", "R", "P", "F"]);
        assert!(text.contains("e2e            None"));
        assert!(text.contains("e2e            Full"));
    }
}
