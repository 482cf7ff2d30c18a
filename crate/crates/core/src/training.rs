//! Adam, the shared mini-batch engine, end-to-end training of the SR
//! model, and unsupervised pretraining of the warp predictor.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::element::Element;
use crate::error::{Error, Result, TensorError};
use crate::image_ops::Image;
use crate::layers::{Binding, Parameters};
use crate::model::{ArchConfig, ModelParams, ModelVariant, SrModel, WarpPredictor, GROUP_WARP};
use crate::perceptual::{self, FeatureNetwork, LossWeights};
use crate::run_config::RunConfig;
use crate::synth::{rng_for, Sample};
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;
use crate::tps::{self, ControlGrid, TpsSystem, WarpBasis};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers in [`Parameters::visit`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

/// Per-tensor gradients in [`Parameters::visit`] order; `None` leaves the
/// tensor and its moments untouched.
pub type ParamGrads<T> = Vec<Option<Vec<T>>>;

impl<T: Element> AdamState<T> {
    pub fn new(params: &impl Parameters<T>) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, t| m.push(Tensor::zeros(t.shape())));
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One bias-corrected update. Nothing is modified when any gradient is
    /// non-finite or mis-shaped.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut impl Parameters<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        let mut names = Vec::new();
        params.visit("", &mut |name, t| names.push((name, t.numel())));
        if names.len() != grads.len() || names.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors but got {} gradients for {} parameters",
                self.m.len(),
                grads.len(),
                names.len()
            )));
        }
        for (((name, n), g), m) in names.iter().zip(grads).zip(&self.m) {
            if let Some(g) = g {
                if g.len() != *n || m.numel() != *n {
                    return Err(Error::Config(format!("gradient of {name} has {} values, expected {n}", g.len())));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, p| {
            if let Some(g) = &grads[i] {
                let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
                for (j, x) in p.data_mut().iter_mut().enumerate() {
                    let gj = g[j].to_f64();
                    let mj = cfg.beta1 * m[j].to_f64() + (1.0 - cfg.beta1) * gj;
                    let vj = cfg.beta2 * v[j].to_f64() + (1.0 - cfg.beta2) * gj * gj;
                    m[j] = T::from_f64(mj);
                    v[j] = T::from_f64(vj);
                    let step = cfg.lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
                    *x = T::from_f64(x.to_f64() - step);
                }
            }
            i += 1;
        });
        Ok(())
    }
}

/// Gradients of every tensor of `params`, in visit order.
pub fn collect_grads<T: Element>(params: &impl Parameters<T>, g: &Gradients<T>) -> ParamGrads<T> {
    let mut out = Vec::new();
    params.visit("", &mut |_, t| out.push(g.param(t)));
    out
}

fn accumulate<T: Element>(acc: &mut ParamGrads<T>, g: ParamGrads<T>) {
    if acc.is_empty() {
        *acc = g;
        return;
    }
    for (a, b) in acc.iter_mut().zip(g) {
        match (a.as_mut(), b) {
            (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (None, Some(b)) => *a = Some(b),
            (_, None) => {}
        }
    }
}

/// Seeded permutation of `0..n` for one epoch; depends only on (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, 0x5eed_0000 + epoch as u64));
    order
}

/// One pass over `n` examples in seeded mini-batches. Per-example work may
/// run in parallel; gradients are summed in example order, so results do
/// not depend on the thread count. Returns the mean example loss, each
/// measured before its batch's update.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch<P, F>(
    params: &mut P,
    adam: &mut AdamState<f32>,
    adam_cfg: &AdamConfig,
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    example: F,
) -> Result<f64>
where
    P: Parameters<f32> + Sync,
    F: Fn(&P, usize) -> Result<(f64, ParamGrads<f32>)> + Sync,
{
    if n == 0 || batch_size == 0 {
        return Err(Error::Config("need at least one example and a batch size ≥ 1".into()));
    }
    let order = epoch_order(n, seed, epoch);
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let results: Vec<Result<(f64, ParamGrads<f32>)>> = batch.par_iter().map(|&i| example(params, i)).collect();
        let mut acc = Vec::new();
        for r in results {
            let (loss, g) = r?;
            total += loss;
            accumulate(&mut acc, g);
        }
        let inv = 1.0 / batch.len() as f32;
        for g in acc.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= inv);
        }
        adam.update(adam_cfg, params, &acc)?;
    }
    Ok(total / n as f64)
}

fn non_finite_as_loss(id: &str) -> impl Fn(TensorError) -> Error + '_ {
    move |e| match e {
        TensorError::NonFinite(op) => Error::NonFiniteLoss {
            sample: format!("{id} (in {op})"),
        },
        other => Error::Tensor(other),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time_s: f64,
}

pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss,wall_time_s\n");
    for r in history {
        out.push_str(&format!("{},{:e},{:.3}\n", r.epoch, r.mean_loss, r.wall_time_s));
    }
    out
}

/// Reconstruction loss and parameter gradients of one sample.
pub fn sample_loss(
    model: &SrModel<f32>,
    params: &ModelParams<f32>,
    net: &FeatureNetwork<f32>,
    weights: &LossWeights,
    sample: &Sample,
) -> Result<(f64, ParamGrads<f32>)> {
    let gt = sample
        .seq
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::Data(format!("sample {} has no ground truth", sample.id)))?;
    let wrap = non_finite_as_loss(&sample.id);
    let mut tape = Tape::new();
    let trace = model.forward_with(params, &mut tape, &sample.seq).map_err(&wrap)?;
    let target = tape.constant_ref(gt);
    let loss = perceptual::total_loss(&mut tape, trace.output, target, net, weights).map_err(&wrap)?;
    let value = f64::from(tape.value(loss).data()[0]);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            sample: sample.id.clone(),
        });
    }
    let g = tape.backward(loss).map_err(&wrap)?;
    Ok((value, collect_grads(params, &g)))
}

/// Everything needed to continue training: model, optimizer, progress.
pub struct Trainer {
    pub config: RunConfig,
    pub model: SrModel<f32>,
    pub adam: AdamState<f32>,
    pub feature_net: FeatureNetwork<f32>,
    /// Completed epochs.
    pub epoch: usize,
}

/// Outcome of restoring a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResumeInfo {
    /// The checkpoint was written under a different configuration.
    pub config_changed: bool,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let arch = config.arch()?;
        let mut model = SrModel::new(arch, config.variant, config.seed)?;
        model.freeze_warp = config.freeze_warp;
        let feature_net = match &config.feature_weights {
            Some(path) => FeatureNetwork::load(path)?,
            None => FeatureNetwork::seeded(config.feature_seed)?,
        };
        let adam = AdamState::new(&model.params);
        let mut t = Self {
            config,
            model,
            adam,
            feature_net,
            epoch: 0,
        };
        if let Some(path) = t.config.pretrained_warp.clone() {
            t.load_pretrained_warp(&Checkpoint::load(&path)?)?;
        }
        Ok(t)
    }

    /// Copies warp-predictor weights from a pretraining checkpoint.
    pub fn load_pretrained_warp(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.restore_params(GROUP_WARP, &mut self.model.params.warp)
    }

    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<EpochRecord> {
        let start = Instant::now();
        for s in data {
            if s.seq.len() != self.model.variant.frames() {
                return Err(Error::Data(format!(
                    "sample {} has {} frames but {} needs {}",
                    s.id,
                    s.seq.len(),
                    self.model.variant,
                    self.model.variant.frames()
                )));
            }
        }
        let weights = self.config.loss_weights();
        let shell = self.model.clone();
        let net = &self.feature_net;
        let mean = run_epoch(
            &mut self.model.params,
            &mut self.adam,
            &self.config.adam(),
            data.len(),
            self.config.batch_size,
            self.config.seed,
            self.epoch,
            |p, i| sample_loss(&shell, p, net, &weights, &data[i]),
        )?;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            mean_loss: mean,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining configured epochs, calling `after` once per epoch.
    pub fn train(
        &mut self,
        data: &[Sample],
        mut after: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let r = self.train_epoch(data)?;
            after(self, &r)?;
            history.push(r);
        }
        Ok(history)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(&self.config.to_text());
        c.epoch = self.epoch as u64;
        c.adam_step = self.adam.step;
        c.push_params("", &self.model.params);
        let mut names = Vec::new();
        self.model.params.visit("", &mut |n, _| names.push(n));
        for (kind, bufs) in [(ADAM_M, &self.adam.m), (ADAM_V, &self.adam.v)] {
            for (n, t) in names.iter().zip(bufs.iter()) {
                c.sections.push((format!("{kind}{n}"), t.clone()));
            }
        }
        c
    }

    /// Restores parameters, optimizer state and progress. The run keeps
    /// its own configuration; a differing checkpoint configuration is
    /// reported, not rejected.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<ResumeInfo> {
        ckpt.restore_params("", &mut self.model.params)?;
        let mut names = Vec::new();
        self.model.params.visit("", &mut |n, _| names.push(n));
        for (kind, bufs) in [(ADAM_M, &mut self.adam.m), (ADAM_V, &mut self.adam.v)] {
            for (n, t) in names.iter().zip(bufs.iter_mut()) {
                let key = format!("{kind}{n}");
                let s = ckpt
                    .section(&key)
                    .filter(|s| s.shape() == t.shape())
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("missing or mis-shaped section {key}")))?;
                *t = s.clone();
            }
        }
        self.adam.step = ckpt.adam_step;
        self.epoch = ckpt.epoch as usize;
        Ok(ResumeInfo {
            config_changed: ckpt.config_hash != crate::checkpoint::config_hash(&self.config.to_text()),
        })
    }
}

/// Model built from a finished training run's checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(RunConfig, SrModel<f32>)> {
    let config = RunConfig::parse(&ckpt.config_text)?;
    let arch: ArchConfig = config.arch()?;
    let mut model = SrModel::new(arch, config.variant, config.seed)?;
    ckpt.restore_params("", &mut model.params)?;
    model.freeze_warp = config.freeze_warp;
    Ok((config, model))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 10,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Reference and moving low-resolution images of one pretraining pair.
pub type ImagePair = (Image, Image);

/// Aligns image pairs at their own resolution.
pub struct WarpAligner {
    basis: WarpBasis<f32>,
}

impl WarpAligner {
    pub fn new(size: usize) -> Result<Self> {
        let system = TpsSystem::new(ControlGrid::default())?;
        Ok(Self {
            basis: WarpBasis::for_grid(&system, size, size),
        })
    }

    /// `‖warp(moving; P(reference, moving)) − reference‖²` and, when
    /// requested, the predictor gradients.
    pub fn pair_loss(
        &self,
        predictor: &WarpPredictor<f32>,
        pair: &ImagePair,
        want_grads: bool,
    ) -> Result<(f64, Option<ParamGrads<f32>>, Vec<f32>)> {
        let mut tape = Tape::new();
        let r = tape.constant_ref(&pair.0);
        let m = tape.constant_ref(&pair.1);
        let how = if want_grads { Binding::Trainable } else { Binding::Frozen };
        let wrap = non_finite_as_loss("pretraining pair");
        let s = predictor.forward(&mut tape, r, m, how).map_err(&wrap)?;
        let field = tps::tps_grid(&mut tape, s, &self.basis).map_err(&wrap)?;
        let warped = tps::grid_sample(&mut tape, m, field).map_err(&wrap)?;
        let loss = tape.sum_squared_error(warped, r).map_err(&wrap)?;
        let value = f64::from(tape.value(loss).data()[0]);
        let shifts = tape.value(s).data().to_vec();
        let grads = if want_grads {
            Some(collect_grads(predictor, &tape.backward(loss).map_err(&wrap)?))
        } else {
            None
        };
        Ok((value, grads, shifts))
    }

    pub fn mean_loss(&self, predictor: &WarpPredictor<f32>, pairs: &[ImagePair]) -> Result<f64> {
        let losses: Vec<f64> = pairs
            .par_iter()
            .map(|p| self.pair_loss(predictor, p, false).map(|r| r.0))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / pairs.len().max(1) as f64)
    }
}

/// Unsupervised pretraining of the warp predictor; returns the mean loss
/// of each epoch.
pub fn pretrain_warp(predictor: &mut WarpPredictor<f32>, pairs: &[ImagePair], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    let first = pairs.first().ok_or_else(|| Error::Data("no pretraining pairs".into()))?;
    let shape = first.0.shape().to_vec();
    if shape.len() != 3 || shape[1] != shape[2] || pairs.iter().any(|p| p.0.shape() != shape.as_slice() || p.1.shape() != shape.as_slice()) {
        return Err(Error::Data("pretraining pairs must be square images of one size".into()));
    }
    let aligner = WarpAligner::new(shape[1])?;
    let mut adam = AdamState::new(predictor);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mean = run_epoch(predictor, &mut adam, &cfg.adam, pairs.len(), cfg.batch_size, cfg.seed, epoch, |p, i| {
            let (l, g, _) = aligner.pair_loss(p, &pairs[i], true)?;
            Ok((l, g.expect("gradients requested")))
        })?;
        history.push(mean);
    }
    Ok(history)
}

/// (central, other) low-resolution pairs from every sample.
pub fn pretraining_pairs(samples: &[Sample]) -> Vec<ImagePair> {
    samples
        .iter()
        .flat_map(|s| {
            let k = s.seq.center();
            let c = s.seq.frames[k].clone();
            s.seq
                .frames
                .iter()
                .enumerate()
                .filter(move |&(i, _)| i != k)
                .map(move |(_, f)| (c.clone(), f.clone()))
        })
        .collect()
}

/// Builds a fresh predictor for `arch` and pretrains it.
pub fn pretrain_new(arch: &ArchConfig, pairs: &[ImagePair], cfg: &PretrainConfig) -> Result<(WarpPredictor<f32>, Vec<f64>)> {
    let variant = ModelVariant::warped(3)?;
    let mut predictor = ModelParams::<f32>::init(arch, variant, cfg.seed)?.warp;
    let h = pretrain_warp(&mut predictor, pairs, cfg)?;
    Ok((predictor, h))
}
