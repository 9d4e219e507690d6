use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::params::{ParamKind, ParamStore};
use super::tape::{BatchStats, Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

const BN_EPS: f64 = 1e-5;
/// Initial anchor probability; the confidence bias starts at its logit.
const CONFIDENCE_PRIOR: f64 = 0.02;
/// Horizontal extent, in cells, of the initial sampling points.
const INITIAL_SAMPLING_SPAN: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Tape nodes of the heads of one pyramid level, all `[N, ch, h, w]`.
#[derive(Debug, Clone, Copy)]
pub struct LevelVars {
    pub stride: usize,
    /// Sigmoid anchor confidence, 1 channel.
    pub confidence: Var,
    /// `(top, right, bottom, left)` distances, positive, 4 channels.
    pub geometry: Var,
    /// Mask coefficients, `k` channels.
    pub coefficients: Var,
    /// Stride-normalized sampling offsets `(x0, y0, ...)`, `2K` channels.
    pub sampling: Var,
    /// Character logits, 37 channels.
    pub char_logits: Var,
}

/// Result of one forward pass, ready for a backward pass.
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    pub input: Var,
    pub levels: Vec<LevelVars>,
    /// `[N, k, H, W]` prototypes at input resolution.
    pub prototypes: Var,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

/// Head outputs detached from the tape.
#[derive(Debug, Clone)]
pub struct LevelHeads<T> {
    pub stride: usize,
    pub confidence: Tensor<T>,
    pub geometry: Tensor<T>,
    pub coefficients: Tensor<T>,
    pub sampling: Tensor<T>,
    pub char_logits: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct HeadOutputs<T> {
    pub levels: Vec<LevelHeads<T>>,
    pub prototypes: Tensor<T>,
    /// `(width, height)` of the padded input.
    pub input_size: (usize, usize),
    pub geometry_in_stride_units: bool,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn heads(&self, geometry_in_stride_units: bool) -> HeadOutputs<T> {
        let t = &self.tape;
        let (_, _, h, w) = t.value(self.input).dims4();
        HeadOutputs {
            levels: self
                .levels
                .iter()
                .map(|l| LevelHeads {
                    stride: l.stride,
                    confidence: t.value(l.confidence).clone(),
                    geometry: t.value(l.geometry).clone(),
                    coefficients: t.value(l.coefficients).clone(),
                    sampling: t.value(l.sampling).clone(),
                    char_logits: t.value(l.char_logits).clone(),
                })
                .collect(),
            prototypes: t.value(self.prototypes).clone(),
            input_size: (w, h),
            geometry_in_stride_units,
        }
    }
}

enum Store<'a, T> {
    Read(&'a ParamStore<T>),
    Declare(&'a mut ParamStore<T>, &'a mut ChaCha8Rng),
}

#[derive(Clone, Copy)]
enum Init {
    He,
    Zeros,
    Ones,
}

struct Ctx<'a, T> {
    tape: Tape<T>,
    store: Store<'a, T>,
    bound: HashMap<String, Var>,
    mode: Mode,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init, fan_in: usize) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let (slot, value) = match &mut self.store {
            Store::Read(s) => {
                let slot = s
                    .slot(name)
                    .unwrap_or_else(|| panic!("parameter {name} was never declared"));
                (slot, s.entry(slot).value.clone())
            }
            Store::Declare(s, rng) => {
                let value = match s.get(name) {
                    Some(v) => v.clone(),
                    None => init_tensor(shape, init, fan_in, rng),
                };
                (s.insert(name, value.clone(), ParamKind::Trainable), value)
            }
        };
        assert_eq!(value.shape(), shape, "parameter {name}");
        let v = self.tape.param(slot, value);
        self.bound.insert(name.to_string(), v);
        v
    }

    fn buffer(&mut self, name: &str, c: usize, fill: f64) -> Vec<T> {
        match &mut self.store {
            Store::Read(s) => s
                .get(name)
                .unwrap_or_else(|| panic!("buffer {name} was never declared"))
                .data()
                .to_vec(),
            Store::Declare(s, _) => {
                let t = s.get(name).cloned().unwrap_or_else(|| Tensor::full(&[c], T::of(fill)));
                s.insert(name, t.clone(), ParamKind::Buffer);
                t.data().to_vec()
            }
        }
    }

    fn conv(&mut self, name: &str, x: Var, out: usize, k: usize, stride: usize, bias: bool) -> Var {
        let cin = self.tape.value(x).dims4().1;
        let fan_in = cin * k * k;
        let w = self.param(&format!("{name}.weight"), &[out, cin, k, k], Init::He, fan_in);
        let b = bias.then(|| self.param(&format!("{name}.bias"), &[out], Init::Zeros, fan_in));
        self.tape.conv2d(x, w, b, stride, k / 2)
    }

    fn bn(&mut self, name: &str, x: Var) -> Var {
        let c = self.tape.value(x).dims4().1;
        let gamma = self.param(&format!("{name}.gamma"), &[c], Init::Ones, c);
        let beta = self.param(&format!("{name}.beta"), &[c], Init::Zeros, c);
        let rm = self.buffer(&format!("{name}.running_mean"), c, 0.0);
        let rv = self.buffer(&format!("{name}.running_var"), c, 1.0);
        let running = (self.mode == Mode::Eval).then_some((rm.as_slice(), rv.as_slice()));
        let (y, stats) = self.tape.batch_norm(x, gamma, beta, running, T::of(BN_EPS));
        if let Some(s) = stats {
            self.bn_stats.push((name.to_string(), s));
        }
        y
    }

    /// 3x3 convolution, batch norm, ReLU.
    fn cbr(&mut self, name: &str, x: Var, out: usize, stride: usize) -> Var {
        let y = self.conv(&format!("{name}.conv"), x, out, 3, stride, false);
        let y = self.bn(&format!("{name}.bn"), y);
        self.tape.relu(y)
    }

    fn residual(&mut self, name: &str, x: Var) -> Var {
        let c = self.tape.value(x).dims4().1;
        let y = self.cbr(&format!("{name}.a"), x, c, 1);
        let y = self.conv(&format!("{name}.b.conv"), y, c, 3, 1, false);
        let y = self.bn(&format!("{name}.b.bn"), y);
        let y = self.tape.add(y, x);
        self.tape.relu(y)
    }
}

fn init_tensor<T: Scalar>(shape: &[usize], init: Init, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, T::one()),
        Init::He => normal_tensor(shape, (2.0 / fan_in as f64).sqrt(), rng),
    }
}

fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect()).expect("shape")
}

/// The spotting network: a residual backbone, a two-level bidirectional
/// feature pyramid, per-level anchor / detector / sampling / classifier
/// heads and a prototype branch on the finest level.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        {
            let probe = Tensor::zeros(&[1, 3, ModelConfig::MAX_STRIDE * 2, ModelConfig::MAX_STRIDE * 2]);
            let ctx = Ctx {
                tape: Tape::new(),
                store: Store::Declare(&mut params, &mut rng),
                bound: HashMap::new(),
                mode: Mode::Eval,
                bn_stats: Vec::new(),
            };
            build(ctx, &config, probe);
        }
        let mut model = Self { config, params };
        model.init_output_layers(&mut rng);
        Ok(model)
    }

    fn init_output_layers(&mut self, rng: &mut ChaCha8Rng) {
        let k = self.config.num_points;
        for level in self.config.levels.clone() {
            let p = format!("head{}", level.level_index);
            for head in ["anchor", "geometry", "coeff", "sampling", "cls"] {
                let name = format!("{p}.{head}.out.weight");
                let shape = self.params.get(&name).expect("declared").shape().to_vec();
                let std = if head == "sampling" { 1e-3 } else { 1e-2 };
                *self.params.get_mut(&name).expect("declared") = normal_tensor(&shape, std, rng);
            }
            let prior = -((1.0 - CONFIDENCE_PRIOR) / CONFIDENCE_PRIOR).ln();
            *self.params.get_mut(&format!("{p}.anchor.out.bias")).expect("declared") =
                Tensor::full(&[1], T::of(prior));
            let spread: Vec<T> = (0..2 * k)
                .map(|ch| {
                    if ch % 2 == 1 || k == 1 {
                        T::zero()
                    } else {
                        let i = (ch / 2) as f64;
                        T::of((i / (k - 1) as f64 - 0.5) * INITIAL_SAMPLING_SPAN)
                    }
                })
                .collect();
            *self.params.get_mut(&format!("{p}.sampling.out.bias")).expect("declared") =
                Tensor::from_vec(&[2 * k], spread).expect("shape");
        }
    }

    /// Runs the network on a `[N, 3, H, W]` batch with `H` and `W` multiples
    /// of [`ModelConfig::MAX_STRIDE`].
    pub fn forward(&self, images: &Tensor<T>, mode: Mode) -> ForwardPass<T> {
        let ctx = Ctx {
            tape: Tape::new(),
            store: Store::Read(&self.params),
            bound: HashMap::new(),
            mode,
            bn_stats: Vec::new(),
        };
        build(ctx, &self.config, images.clone())
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, pass: &ForwardPass<T>, momentum: f64) {
        let m = T::of(momentum);
        for (name, stats) in &pass.bn_stats {
            if let Some(rm) = self.params.get_mut(&format!("{name}.running_mean")) {
                for (r, &b) in rm.data_mut().iter_mut().zip(&stats.mean) {
                    *r = *r * (T::one() - m) + b * m;
                }
            }
            if let Some(rv) = self.params.get_mut(&format!("{name}.running_var")) {
                for (r, &b) in rv.data_mut().iter_mut().zip(&stats.var) {
                    *r = *r * (T::one() - m) + b * m;
                }
            }
        }
    }

    /// Names of parameters owned by the detector heads (geometry,
    /// coefficients) and the prototype branch.
    pub fn detector_parameter_names(&self) -> Vec<String> {
        self.params
            .entries()
            .iter()
            .filter(|e| e.name.contains(".geometry.") || e.name.contains(".coeff.") || e.name.starts_with("proto."))
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

fn build<T: Scalar>(mut ctx: Ctx<'_, T>, cfg: &ModelConfig, images: Tensor<T>) -> ForwardPass<T> {
    let (_, _, h, w) = images.dims4();
    assert!(
        h % ModelConfig::MAX_STRIDE == 0 && w % ModelConfig::MAX_STRIDE == 0,
        "input {w}x{h} is not padded to a multiple of {}",
        ModelConfig::MAX_STRIDE
    );
    let input = ctx.tape.input(images);
    let [c0, c1, c2, c3] = cfg.backbone_channels;
    let c = cfg.pyramid_channels;

    let mut x = ctx.cbr("backbone.stem", input, c0, 2);
    let mut feats = Vec::new();
    for (s, ch) in [(1, c1), (2, c2), (3, c3)] {
        x = ctx.cbr(&format!("backbone.s{s}.down"), x, ch, 2);
        for b in 0..cfg.blocks_per_stage {
            x = ctx.residual(&format!("backbone.s{s}.b{b}"), x);
        }
        feats.push(x);
    }

    // top-down then bottom-up fusion, keeping strides 4 and 8
    let l2 = ctx.conv("neck.lateral2", feats[0], c, 1, 1, true);
    let l3 = ctx.conv("neck.lateral3", feats[1], c, 1, 1, true);
    let l4 = ctx.conv("neck.lateral4", feats[2], c, 1, 1, true);
    let up4 = ctx.tape.upsample_nearest(l4, 2);
    let td3 = ctx.tape.add(l3, up4);
    let td3 = ctx.cbr("neck.td3", td3, c, 1);
    let up3 = ctx.tape.upsample_nearest(td3, 2);
    let p2 = ctx.tape.add(l2, up3);
    let p2 = ctx.cbr("neck.p2", p2, c, 1);
    let down2 = ctx.conv("neck.down2", p2, c, 3, 2, true);
    let p3 = ctx.tape.add(td3, down2);
    let p3 = ctx.tape.add(p3, l3);
    let p3 = ctx.cbr("neck.p3", p3, c, 1);

    let mut levels = Vec::new();
    for (spec, feat) in cfg.levels.iter().zip([p2, p3]) {
        let p = format!("head{}", spec.level_index);

        let a = ctx.cbr(&format!("{p}.anchor.c0"), feat, c, 1);
        let a = ctx.conv(&format!("{p}.anchor.out"), a, 1, 1, 1, true);
        let confidence = ctx.tape.sigmoid(a);

        let g = ctx.cbr(&format!("{p}.geometry.c0"), feat, c, 1);
        let g = ctx.conv(&format!("{p}.geometry.out"), g, 4, 1, 1, true);
        let geometry = ctx.tape.exp(g);

        let m = ctx.cbr(&format!("{p}.coeff.c0"), feat, c, 1);
        let coefficients = ctx.conv(&format!("{p}.coeff.out"), m, cfg.num_coefficients, 1, 1, true);

        let mut s = feat;
        for i in 0..3 {
            s = ctx.cbr(&format!("{p}.sampling.c{i}"), s, c, 1);
        }
        let sampling = ctx.conv(&format!("{p}.sampling.out"), s, 2 * cfg.num_points, 1, 1, true);

        let mut k = feat;
        for i in 0..4 {
            k = ctx.conv(&format!("{p}.cls.c{i}"), k, c, 3, 1, true);
            k = ctx.tape.relu(k);
        }
        let char_logits = ctx.conv(&format!("{p}.cls.out"), k, cfg.num_classes, 1, 1, true);

        levels.push(LevelVars {
            stride: spec.stride,
            confidence,
            geometry,
            coefficients,
            sampling,
            char_logits,
        });
    }

    let mut t = ctx.cbr("proto.c0", p2, c, 1);
    t = ctx.cbr("proto.c1", t, c, 1);
    let t = ctx.conv("proto.out", t, cfg.num_coefficients, 1, 1, true);
    let prototypes = ctx.tape.resize_bilinear(t, h, w);

    ForwardPass {
        tape: ctx.tape,
        input,
        levels,
        prototypes,
        bn_stats: ctx.bn_stats,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_images(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = n * 3 * h * w;
        Tensor::from_vec(&[n, 3, h, w], (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn zeroed(mut m: Model<f64>) -> Model<f64> {
        for i in 0..m.params.len() {
            if m.params.entry(i).kind == ParamKind::Trainable {
                let v = m.params.value_mut(i);
                *v = Tensor::zeros(v.shape());
            }
        }
        m
    }

    #[test]
    fn level_shapes_follow_strides() {
        let m = Model::<f32>::new(ModelConfig::tiny(), 0).unwrap();
        let pass = m.forward(&Tensor::zeros(&[1, 3, 64, 64]), Mode::Eval);
        let heads = pass.heads(true);
        let l2 = &heads.levels[0];
        assert_eq!(l2.confidence.shape(), &[1, 1, 16, 16]);
        assert_eq!(l2.geometry.shape(), &[1, 4, 16, 16]);
        assert_eq!(l2.coefficients.shape(), &[1, 4, 16, 16]);
        assert_eq!(l2.sampling.shape(), &[1, 10, 16, 16]);
        assert_eq!(l2.char_logits.shape(), &[1, 37, 16, 16]);
        assert_eq!(heads.levels[1].confidence.shape(), &[1, 1, 8, 8]);
        assert_eq!(heads.prototypes.shape(), &[1, 4, 64, 64]);
    }

    #[test]
    fn default_config_shapes_at_640() {
        let m = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
        let pass = m.forward(&Tensor::zeros(&[1, 3, 640, 640]), Mode::Eval);
        let heads = pass.heads(true);
        assert_eq!(heads.levels[0].sampling.shape(), &[1, 50, 160, 160]);
        assert_eq!(heads.levels[0].char_logits.shape(), &[1, 37, 160, 160]);
        assert_eq!(heads.levels[1].confidence.shape(), &[1, 1, 80, 80]);
        assert_eq!(heads.prototypes.shape(), &[1, 4, 640, 640]);
    }

    #[test]
    fn zero_parameters_give_neutral_heads() {
        let m = zeroed(Model::<f64>::new(ModelConfig::tiny(), 1).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pass = m.forward(&random_images(1, 32, 32, &mut rng), Mode::Eval);
        for l in pass.heads(true).levels {
            assert!(l.confidence.data().iter().all(|&v| v == 0.5));
            assert!(l.geometry.data().iter().all(|&v| v == 1.0));
            assert!(l.sampling.data().iter().all(|&v| v == 0.0));
            let (_, _, h, w) = l.char_logits.dims4();
            let seq = super::super::gather_sequence(&l.sampling, &l.char_logits, 0, (w / 2, h / 2));
            for row in seq {
                assert!(row.iter().all(|&p| (p - 1.0 / 37.0).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let m = Model::<f32>::new(ModelConfig::tiny(), 5).unwrap();
        let zeros = Tensor::zeros(&[1, 3, 32, 32]);
        let a = m.forward(&zeros, Mode::Eval).heads(true);
        let b = m.forward(&zeros, Mode::Eval).heads(true);
        assert_eq!(a.prototypes.data(), b.prototypes.data());
        assert_eq!(a.levels[1].char_logits.data(), b.levels[1].char_logits.data());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x: Tensor<f32> = random_images(1, 32, 32, &mut rng).cast();
            let h = m.forward(&x, Mode::Train).heads(true);
            assert!(h.prototypes.is_finite());
            for l in &h.levels {
                assert!(l.confidence.data().iter().all(|&v| v > 0.0 && v < 1.0));
                assert!(l.geometry.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
                assert!(l.coefficients.is_finite() && l.sampling.is_finite() && l.char_logits.is_finite());
            }
        }
    }

    /// Random linear functional of every head output.
    fn probe_objective(pass: &ForwardPass<f64>, seed: u64) -> (f64, Vec<(Var, Tensor<f64>)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vars = vec![pass.prototypes];
        for l in &pass.levels {
            vars.extend([l.confidence, l.geometry, l.coefficients, l.sampling, l.char_logits]);
        }
        let mut total = 0.0;
        let mut seeds = Vec::new();
        for v in vars {
            let val = pass.tape.value(v);
            let w: Vec<f64> = (0..val.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
            total += val.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            seeds.push((v, Tensor::from_vec(val.shape(), w).unwrap()));
        }
        (total, seeds)
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let cfg = ModelConfig::tiny();
        let mut model = Model::<f64>::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_images(2, 32, 32, &mut rng);
        let pass = model.forward(&x, Mode::Train);
        let (_, seeds) = probe_objective(&pass, 13);
        let grads = pass.tape.backward(seeds);
        let analytic: HashMap<usize, Tensor<f64>> = grads.params.into_iter().collect();
        let trainable: Vec<usize> = (0..model.params.len())
            .filter(|&i| model.params.entry(i).kind == ParamKind::Trainable)
            .collect();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let slot = trainable[rng.random_range(0..trainable.len())];
            let idx = rng.random_range(0..model.params.entry(slot).value.numel());
            let orig = model.params.entry(slot).value.data()[idx];
            let mut eval = |v: f64| {
                model.params.value_mut(slot).data_mut()[idx] = v;
                probe_objective(&model.forward(&x, Mode::Train), 13).0
            };
            let fd = (eval(orig + eps) - eval(orig - eps)) / (2.0 * eps);
            model.params.value_mut(slot).data_mut()[idx] = orig;
            let an = analytic.get(&slot).map_or(0.0, |g| g.data()[idx]);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn shifting_input_by_deepest_stride_shifts_heads() {
        let cfg = ModelConfig::tiny();
        let model = Model::<f64>::new(cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (size, shift) = (320, ModelConfig::MAX_STRIDE);
        let base = random_images(1, size, size, &mut rng);
        let mut shifted = Tensor::zeros(base.shape());
        for c in 0..3 {
            for y in 0..size {
                for x in shift..size {
                    shifted.data_mut()[(c * size + y) * size + x] = base.data()[(c * size + y) * size + x - shift];
                }
            }
        }
        let a = model.forward(&base, Mode::Eval).heads(true);
        let b = model.forward(&shifted, Mode::Eval).heads(true);
        // receptive fields reach well past the border; compare the centre only
        let margin = 128;
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            let s = la.stride;
            let d = shift / s;
            for (ta, tb) in [
                (&la.confidence, &lb.confidence),
                (&la.geometry, &lb.geometry),
                (&la.sampling, &lb.sampling),
                (&la.char_logits, &lb.char_logits),
            ] {
                let (_, ch, h, w) = ta.dims4();
                for c in 0..ch {
                    for y in margin / s..h - margin / s {
                        for x in margin / s..w - margin / s - d {
                            let diff = (ta.at4(0, c, y, x) - tb.at4(0, c, y, x + d)).abs();
                            assert!(diff < 1e-4, "stride {s} channel {c} ({x},{y}): {diff}");
                        }
                    }
                }
            }
        }
    }
}
