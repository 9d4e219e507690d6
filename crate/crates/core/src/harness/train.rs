use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{poly_lr, Stage, TrainConfig};
use super::eval::evaluate;
use crate::error::{Error, Result};
use crate::labelgen::{build_targets, InstanceAnnotation, TargetBundle};
use crate::losses::{objective, AnchorCounts, HeadGradients, LossParts};
use crate::network::{
    load_checkpoint, prepare_batch, save_checkpoint, Checkpoint, ForwardPass, Mode, Model, ParamKind, ParamStore, Var,
};
use crate::synthdata::{augment, read_dataset, Dataset, MixtureSampler};
use crate::tensor::{Scalar, Tensor};

/// Decoded images are kept in memory while their total size stays below
/// this many bytes.
const IMAGE_CACHE_BYTES: usize = 768 << 20;
pub const LOSS_LOG_FILE: &str = "losses.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub parts: LossParts,
    pub counts: AnchorCounts,
}

/// Training datasets with their mixture ratios.
pub struct TrainData {
    pub datasets: Vec<Dataset>,
    pub ratios: Vec<f64>,
    cache: HashMap<(usize, usize), RgbImage>,
}

impl TrainData {
    pub fn new(datasets: Vec<Dataset>, ratios: Vec<f64>) -> Result<Self> {
        if datasets.len() != ratios.len() || datasets.is_empty() {
            return Err(Error::Config("training needs at least one dataset and one ratio each".into()));
        }
        let mut data = Self {
            datasets,
            ratios,
            cache: HashMap::new(),
        };
        let bytes: usize = data
            .datasets
            .iter()
            .flat_map(|d| &d.records)
            .map(|r| r.width as usize * r.height as usize * 3)
            .sum();
        if bytes <= IMAGE_CACHE_BYTES {
            for (d, ds) in data.datasets.iter().enumerate() {
                for i in 0..ds.len() {
                    data.cache.insert((d, i), ds.load_image(i)?);
                }
            }
        }
        Ok(data)
    }

    pub fn open(cfg: &TrainConfig) -> Result<Self> {
        let datasets = cfg.datasets.iter().map(|s| read_dataset(&s.path)).collect::<Result<Vec<_>>>()?;
        Self::new(datasets, cfg.datasets.iter().map(|s| s.ratio).collect())
    }

    fn image(&self, d: usize, i: usize) -> Result<RgbImage> {
        match self.cache.get(&(d, i)) {
            Some(img) => Ok(img.clone()),
            None => self.datasets[d].load_image(i),
        }
    }

    /// The augmented batch of `step`. Depends only on `(seed, step)`, so
    /// resumed runs see the same data.
    pub fn batch(&self, cfg: &TrainConfig, step: usize) -> Result<Vec<(RgbImage, Vec<InstanceAnnotation>)>> {
        let sizes: Vec<usize> = self.datasets.iter().map(Dataset::len).collect();
        let mut sampler = MixtureSampler::new(&sizes, &self.ratios, step_seed(cfg.seed, step))?;
        let picks: Vec<(usize, usize, u64)> = (0..cfg.batch_size)
            .map(|i| {
                let (d, r) = sampler.next_index();
                (d, r, (step * cfg.batch_size + i) as u64)
            })
            .collect();
        let load = |&(d, r, stream): &(usize, usize, u64)| -> Result<(RgbImage, Vec<InstanceAnnotation>)> {
            let img = self.image(d, r)?;
            let annos = &self.datasets[d].records[r].instances;
            Ok(match &cfg.augment {
                Some(a) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(stream);
                    augment(&img, annos, a, &mut rng)
                }
                None => (img, annos.clone()),
            })
        };
        let workers = cfg.effective_workers().min(picks.len());
        if workers <= 1 {
            return picks.iter().map(load).collect();
        }
        let chunk = picks.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = picks
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(load).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(picks.len());
            for h in handles {
                out.extend(h.join().expect("loader thread panicked")?);
            }
            Ok(out)
        })
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// SGD with momentum and L2 weight decay:
/// `v = m v + g + wd w; w -= lr v`.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub momentum: ParamStore<f32>,
    /// Next step to run.
    pub step: usize,
    pub data: TrainData,
    pub history: Vec<StepLog>,
}

impl Trainer {
    /// Builds the model from `resume`, `init_from` or a fresh seed, in that
    /// order of precedence.
    pub fn new(cfg: TrainConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        let (model, momentum, step) = if let Some(path) = &cfg.resume {
            let ck = load_checkpoint::<f32>(path)?;
            let step = ck.meta.get("step").and_then(|v| v.as_u64()).ok_or_else(|| {
                Error::Checkpoint(format!("{} has no step; it cannot be resumed", path.display()))
            })? as usize;
            let momentum = ck.momentum.unwrap_or_else(|| zero_momentum(&ck.model));
            info!("resuming from {} at step {step}", path.display());
            (ck.model, momentum, step)
        } else if let Some(path) = &cfg.init_from {
            let ck = load_checkpoint::<f32>(path)?;
            if ck.model.config != cfg.model {
                warn!("{} has a different model config; using the checkpoint's", path.display());
            }
            let m = zero_momentum(&ck.model);
            (ck.model, m, 0)
        } else {
            let model = Model::new(cfg.model.clone(), cfg.seed)?;
            let m = zero_momentum(&model);
            (model, m, 0)
        };
        Ok(Self {
            cfg,
            model,
            momentum,
            step,
            data,
            history: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    /// Runs one optimization step and returns its log line.
    pub fn step_once(&mut self) -> Result<StepLog> {
        let step = self.step;
        let batch = self.data.batch(&self.cfg, step)?;
        let images: Vec<&RgbImage> = batch.iter().map(|b| &b.0).collect();
        let (input, _) = prepare_batch::<f32>(&images);
        let (_, _, h, w) = input.dims4();
        let label_cfg = self.cfg.label_config();
        let targets = batch
            .iter()
            .map(|(_, annos)| build_targets(annos, (w, h), &label_cfg))
            .collect::<Result<Vec<TargetBundle>>>()?;

        let pass = self.model.forward(&input, Mode::Train);
        let heads = pass.heads(self.model.config.geometry_in_stride_units);
        // the objective does not know the step; put it into the error
        let obj = objective(&heads, &targets, &self.cfg.stage_loss()).map_err(|e| match e {
            Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss { term, step },
            e => e,
        })?;
        let lr = poly_lr(step, self.cfg.steps, self.cfg.learning_rate(), self.cfg.poly_power);
        let grads = pass.tape.backward(seeds(&pass, &obj.grads));
        self.apply(grads.params, lr);
        self.model.update_running_stats(&pass, self.cfg.bn_momentum);

        self.step += 1;
        let log = StepLog {
            step,
            lr,
            total: obj.total,
            parts: obj.parts,
            counts: obj.counts,
        };
        self.history.push(log);
        Ok(log)
    }

    fn apply(&mut self, grads: Vec<(usize, Tensor<f32>)>, lr: f64) {
        let (lr, mu, wd) = (lr as f32, self.cfg.momentum as f32, self.cfg.weight_decay as f32);
        for (slot, g) in grads {
            let entry = self.model.params.entry(slot);
            if entry.kind != ParamKind::Trainable {
                continue;
            }
            let name = entry.name.clone();
            let weights = self.model.params.value_mut(slot);
            let v = self.momentum.get_mut(&name).expect("momentum for every trainable tensor");
            for ((wi, vi), gi) in weights.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = mu * *vi + *gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            model: self.model.clone(),
            momentum: Some(self.momentum.clone()),
            meta: serde_json::json!({
                "step": self.step,
                "stage": self.cfg.stage,
                "seed": self.cfg.seed,
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint())
    }

    /// Trains to `cfg.steps`, logging, evaluating and checkpointing as
    /// configured. Returns the final checkpoint path when a directory is set.
    pub fn run(&mut self) -> Result<Option<PathBuf>> {
        let dir = self.cfg.checkpoint_dir.clone();
        let mut log_file = match &dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let path = d.join(LOSS_LOG_FILE);
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(self.step > 0)
                    .write(true)
                    .truncate(self.step == 0)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, f))
            }
            None => None,
        };
        let eval_set = match (&self.cfg.eval_dataset, self.cfg.eval_interval) {
            (Some(p), n) if n > 0 => Some(read_dataset(p)?),
            _ => None,
        };
        while !self.is_done() {
            let log = self.step_once()?;
            if let Some((path, f)) = &mut log_file {
                let line = serde_json::to_string(&log)?;
                writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            if self.cfg.log_interval > 0 && (log.step % self.cfg.log_interval == 0 || self.is_done()) {
                let terms: Vec<String> = log.parts.named().iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
                info!(
                    "step {} lr {:.2e} total {:.4} | {} | anchors full {} weak {} ctc {}",
                    log.step,
                    log.lr,
                    log.total,
                    terms.join(" "),
                    log.counts.full,
                    log.counts.weak,
                    log.counts.recognition
                );
            }
            if let Some(ds) = &eval_set {
                if self.step.is_multiple_of(self.cfg.eval_interval) {
                    let (report, _) = evaluate(&self.model, ds, &self.cfg.inference, self.cfg.effective_workers())?;
                    info!("eval at step {}:\n{}", self.step, report.render());
                }
            }
            if let Some(d) = &dir {
                let n = self.cfg.checkpoint_interval;
                if n > 0 && self.step.is_multiple_of(n) && !self.is_done() {
                    self.save(&d.join(format!("step{:07}.ckpt", self.step)))?;
                }
            }
        }
        match &dir {
            Some(d) => {
                let path = d.join(FINAL_CHECKPOINT);
                self.save(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }
}

fn zero_momentum(model: &Model<f32>) -> ParamStore<f32> {
    let mut m = ParamStore::new();
    for e in model.params.entries().iter().filter(|e| e.kind == ParamKind::Trainable) {
        m.insert(&e.name, Tensor::zeros(e.value.shape()), ParamKind::Trainable);
    }
    m
}

/// Backward seeds pairing every head output with its loss gradient.
pub fn seeds<T: Scalar>(pass: &ForwardPass<T>, grads: &HeadGradients) -> Vec<(Var, Tensor<T>)> {
    let mut out = Vec::new();
    for (v, g) in pass.levels.iter().zip(&grads.levels) {
        out.push((v.confidence, g.confidence.cast()));
        out.push((v.geometry, g.geometry.cast()));
        out.push((v.coefficients, g.coefficients.cast()));
        out.push((v.sampling, g.sampling.cast()));
        out.push((v.char_logits, g.char_logits.cast()));
    }
    out.push((pass.prototypes, grads.prototypes.cast()));
    out
}

/// Opens the configured datasets and trains.
pub fn train(cfg: TrainConfig) -> Result<Trainer> {
    let data = TrainData::open(&cfg)?;
    let stage = cfg.stage;
    let mut t = Trainer::new(cfg, data)?;
    info!(
        "{} stage: {} trainable scalars, steps {}..{}",
        match stage {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        },
        t.model.params.trainable_count(),
        t.step,
        t.cfg.steps
    );
    t.run()?;
    Ok(t)
}
