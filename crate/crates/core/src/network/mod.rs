//! The differentiable model and its supporting machinery.

mod checkpoint;
mod config;
mod gather;
mod model;
mod params;
pub mod tape;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION, MAGIC,
};
pub use config::ModelConfig;
pub use gather::{gather_logits, gather_sequence, softmax, GatheredSequence};
pub use model::{ForwardPass, HeadOutputs, LevelHeads, LevelVars, Mode, Model};
pub use params::{ParamEntry, ParamKind, ParamStore};
pub use tape::{Gradients, Tape, Var};

use crate::tensor::{Scalar, Tensor};

/// Per-channel input normalization: `(v - INPUT_MEAN) / INPUT_SCALE`.
pub const INPUT_MEAN: f64 = 127.5;
pub const INPUT_SCALE: f64 = 64.0;

/// Converts RGB images to a normalized `[N, 3, H, W]` batch padded (bottom
/// and right, with the normalized zero) to a common size that is a multiple
/// of [`ModelConfig::MAX_STRIDE`]. Returns the batch and the original sizes.
pub fn prepare_batch<T: Scalar>(images: &[&image::RgbImage]) -> (Tensor<T>, Vec<(usize, usize)>) {
    let s = ModelConfig::MAX_STRIDE;
    let sizes: Vec<(usize, usize)> = images.iter().map(|i| (i.width() as usize, i.height() as usize)).collect();
    let pw = sizes.iter().map(|z| z.0).max().unwrap_or(0).max(1).div_ceil(s) * s;
    let ph = sizes.iter().map(|z| z.1).max().unwrap_or(0).max(1).div_ceil(s) * s;
    let mut t = Tensor::zeros(&[images.len(), 3, ph, pw]);
    let data = t.data_mut();
    for (n, img) in images.iter().enumerate() {
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                let idx = ((n * 3 + c) * ph + y as usize) * pw + x as usize;
                data[idx] = T::of((p.0[c] as f64 - INPUT_MEAN) / INPUT_SCALE);
            }
        }
    }
    (t, sizes)
}
