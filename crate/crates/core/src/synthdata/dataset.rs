//! On-disk datasets and proportional sampling across several of them.
//!
//! A dataset directory holds PNG images under `images/` and a single
//! `annotations.json`:
//!
//! ```json
//! {"version": 1, "records": [{"image": "images/000000.png", "width": 320,
//!   "height": 320, "instances": [{"polygon": [x0, y0, ...], "text": "open"},
//!   {"anchor_hint": [x, y], "text": "exit"}, {"polygon": [...], "text": "ab",
//!   "care": false}]}]}
//! ```

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::labelgen::InstanceAnnotation;

pub const DATASET_VERSION: u32 = 1;
pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// Image path relative to the dataset root.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<InstanceAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    version: u32,
    records: Vec<DatasetRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].image)
    }

    pub fn load_image(&self, i: usize) -> Result<RgbImage> {
        let path = self.image_path(i);
        Ok(image::open(&path)
            .map_err(|e| Error::Image { path, source: e })?
            .to_rgb8())
    }

    pub fn sample(&self, i: usize) -> Result<Sample> {
        Ok(Sample {
            image: self.load_image(i)?,
            instances: self.records[i].instances.clone(),
        })
    }

    /// Rewrites only the annotation file, keeping the images.
    pub fn save_annotations(&self) -> Result<()> {
        write_annotations(&self.root, &self.records)
    }
}

fn write_annotations(root: &Path, records: &[DatasetRecord]) -> Result<()> {
    let file = AnnotationFile {
        version: DATASET_VERSION,
        records: records.to_vec(),
    };
    let path = root.join(ANNOTATIONS_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&file)? + "\n").map_err(|e| Error::io(&path, e))
}

/// Writes `samples` as `images/NNNNNN.png` plus the annotation file.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<Dataset> {
    let images = root.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:06}.png");
        let path = root.join(&rel);
        s.image.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
        records.push(DatasetRecord {
            image: rel,
            width: s.image.width(),
            height: s.image.height(),
            instances: s.instances.clone(),
        });
    }
    write_annotations(root, &records)?;
    Ok(Dataset {
        root: root.to_path_buf(),
        records,
    })
}

/// Reads the annotation file; images are loaded on demand.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(ANNOTATIONS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            what: "dataset",
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let file: AnnotationFile = serde_json::from_value(value)?;
    for (i, r) in file.records.iter().enumerate() {
        for inst in &r.instances {
            inst.validate()
                .map_err(|e| Error::MalformedInput(format!("record {i} ({}): {e}", r.image)))?;
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        records: file.records,
    })
}

/// Copies `src` to `dst` with every polygon replaced by its anchor hint.
pub fn convert_to_weak(src: &Dataset, dst: &Path) -> Result<Dataset> {
    let images = dst.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(src.len());
    for (i, r) in src.records.iter().enumerate() {
        let to = dst.join(&r.image);
        if let Some(parent) = to.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::copy(src.image_path(i), &to).map_err(|e| Error::io(&to, e))?;
        let instances = r
            .instances
            .iter()
            .map(|a| if a.is_weak() { Ok(a.clone()) } else { a.to_weak() })
            .collect::<Result<Vec<_>>>()?;
        records.push(DatasetRecord {
            instances,
            ..r.clone()
        });
    }
    write_annotations(dst, &records)?;
    Ok(Dataset {
        root: dst.to_path_buf(),
        records,
    })
}

/// Draws `(dataset, record)` pairs with datasets chosen in proportion to
/// their ratios and records uniformly within them.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    sizes: Vec<usize>,
    weights: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl MixtureSampler {
    pub fn new(sizes: &[usize], ratios: &[f64], seed: u64) -> Result<Self> {
        if sizes.len() != ratios.len() || sizes.is_empty() {
            return Err(Error::Config("one ratio per dataset is required".into()));
        }
        if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config(format!("ratios must be nonnegative: {ratios:?}")));
        }
        for (i, (&n, &r)) in sizes.iter().zip(ratios).enumerate() {
            if r > 0.0 && n == 0 {
                return Err(Error::Config(format!("dataset {i} is empty but has ratio {r}")));
            }
        }
        let weights =
            WeightedIndex::new(ratios).map_err(|e| Error::Config(format!("invalid mixture ratios: {e}")))?;
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_index(&mut self) -> (usize, usize) {
        let d = self.weights.sample(&mut self.rng);
        (d, self.rng.random_range(0..self.sizes[d]))
    }
}

impl Iterator for MixtureSampler {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_index())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point, Polygon};
    use crate::synthdata::{render_sample, SynthConfig};

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            image_size: 96,
            cap_height: (10.0, 16.0),
            ..SynthConfig::default()
        };
        let mut samples: Vec<Sample> = (0..3).map(|i| render_sample(&cfg, i)).collect();
        samples[1].instances.push(InstanceAnnotation::weak(Point::new(12.5, 40.25), "exit"));
        let mut flagged = InstanceAnnotation::with_polygon(Polygon::rect(1.0, 2.0, 30.0, 12.0), "ab");
        flagged.care = false;
        samples[2].instances.push(flagged);
        let written = write_dataset(dir.path(), &samples).unwrap();
        let read = read_dataset(dir.path()).unwrap();
        assert_eq!(read, written);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(&read.sample(i).unwrap(), s);
        }
        let text = std::fs::read_to_string(dir.path().join(ANNOTATIONS_FILE)).unwrap();
        assert!(text.contains("\"anchor_hint\": [\n"));
    }

    #[test]
    fn missing_images_and_versions_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![render_sample(&SynthConfig { image_size: 64, ..SynthConfig::default() }, 0)];
        let ds = write_dataset(dir.path(), &samples).unwrap();
        std::fs::remove_file(ds.image_path(0)).unwrap();
        assert!(matches!(ds.load_image(0), Err(Error::Image { .. })));
        std::fs::write(dir.path().join(ANNOTATIONS_FILE), r#"{"version": 7, "records": []}"#).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn weak_conversion_keeps_images_and_anchors() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = SynthConfig {
            image_size: 96,
            cap_height: (10.0, 16.0),
            ..SynthConfig::default()
        };
        let samples: Vec<Sample> = (0..2).map(|i| render_sample(&cfg, i)).collect();
        let strong = write_dataset(a.path(), &samples).unwrap();
        let weak = convert_to_weak(&strong, b.path()).unwrap();
        assert_eq!(read_dataset(b.path()).unwrap(), weak);
        for (i, (s, w)) in strong.records.iter().zip(&weak.records).enumerate() {
            assert_eq!(strong.load_image(i).unwrap(), weak.load_image(i).unwrap());
            for (x, y) in s.instances.iter().zip(&w.instances) {
                assert!(y.is_weak() && y.text == x.text);
                assert_eq!(y.anchor_point().unwrap(), x.anchor_point().unwrap());
            }
        }
    }

    #[test]
    fn mixture_follows_ratios() {
        let mut only_a = MixtureSampler::new(&[5, 5], &[1.0, 0.0], 1).unwrap();
        assert!((0..1000).all(|_| only_a.next_index().0 == 0));
        let mut single = MixtureSampler::new(&[7], &[1.0], 1).unwrap();
        assert!((0..100).all(|_| single.next_index().1 < 7));
        let mut even = MixtureSampler::new(&[3, 3], &[1.0, 1.0], 2).unwrap();
        let n = 10_000;
        let a = (0..n).filter(|_| even.next_index().0 == 0).count() as f64;
        // three standard deviations of Binomial(n, 1/2)
        assert!((a - n as f64 / 2.0).abs() <= 3.0 * (n as f64 * 0.25).sqrt());
        assert!(MixtureSampler::new(&[0, 3], &[1.0, 1.0], 0).is_err());
        assert!(MixtureSampler::new(&[3], &[0.0], 0).is_err());
        assert!(MixtureSampler::new(&[3], &[-1.0], 0).is_err());
    }
}
