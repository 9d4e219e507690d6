use std::path::Path;

use log::warn;

use crate::error::Result;
use crate::inference::{spot, InferenceConfig, Lexicon, LexiconMode, SpotResult};
use crate::labelgen::InstanceAnnotation;
use crate::metrics::{GroundTruth, Prediction, ScoreReport};
use crate::network::{load_checkpoint, Model};
use crate::synthdata::Dataset;
use crate::tensor::Scalar;

/// Ground truth of one image. Weak instances have no polygon to match and
/// are left out.
pub fn ground_truth(annos: &[InstanceAnnotation]) -> Vec<GroundTruth> {
    annos
        .iter()
        .filter_map(|a| {
            a.polygon.as_ref().map(|p| GroundTruth {
                polygon: p.clone(),
                text: a.text.clone(),
                care: a.care,
            })
        })
        .collect()
}

/// The Full lexicon: every cared-for transcription of the dataset.
pub fn full_lexicon(ds: &Dataset) -> Lexicon {
    Lexicon::new(
        LexiconMode::Full,
        ds.records
            .iter()
            .flat_map(|r| &r.instances)
            .filter(|a| a.care)
            .map(|a| a.text.as_str()),
    )
}

pub fn predictions(result: &SpotResult) -> Vec<Prediction> {
    result
        .results
        .iter()
        .map(|w| Prediction {
            polygon: w.polygon.clone(),
            text: w.text.clone(),
            score: w.score,
        })
        .collect()
}

/// Spots every image of `ds` without a lexicon and scores it under both
/// protocols. Images are split across `workers` threads; the report does
/// not depend on the split.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    cfg: &InferenceConfig,
    workers: usize,
) -> Result<(ScoreReport, Vec<SpotResult>)> {
    let none = Lexicon::none();
    let run = |i: usize| -> Result<SpotResult> {
        let img = ds.load_image(i)?;
        Ok(spot(model, &img, &ds.records[i].image, cfg, &none))
    };
    let idx: Vec<usize> = (0..ds.len()).collect();
    let results: Vec<SpotResult> = if workers <= 1 || idx.len() <= 1 {
        idx.iter().map(|&i| run(i)).collect::<Result<_>>()?
    } else {
        let chunk = idx.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = idx
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|&i| run(i)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(idx.len());
            for h in handles {
                out.extend(h.join().expect("evaluation thread panicked")?);
            }
            Ok::<_, crate::Error>(out)
        })?
    };
    Ok((score(ds, &results), results))
}

/// Scores spotting results against `ds`, pairing them by image name.
pub fn score(ds: &Dataset, results: &[SpotResult]) -> ScoreReport {
    let full = full_lexicon(ds);
    let mut report = ScoreReport::default();
    for r in &ds.records {
        let preds = match results.iter().find(|s| s.image == r.image) {
            Some(s) => predictions(s),
            None => {
                warn!("no result for {}", r.image);
                Vec::new()
            }
        };
        report.add_image(&preds, &ground_truth(&r.instances), &full);
    }
    report
}

/// Loads a checkpoint and evaluates it.
pub fn evaluate_checkpoint(
    path: &Path,
    ds: &Dataset,
    cfg: &InferenceConfig,
    workers: usize,
) -> Result<(ScoreReport, Vec<SpotResult>)> {
    let ck = load_checkpoint::<f32>(path)?;
    evaluate(&ck.model, ds, cfg, workers)
}
