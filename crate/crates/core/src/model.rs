//! The three sub-networks (feature extraction, warp prediction,
//! reconstruction) and their assembly into the f1 / fK / fKwarp variants.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::element::Element;
use crate::error::{Error, Result, TensorError};
use crate::layers::{Binding, Conv2d, ConvTranspose2d, Linear, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tps::{self, ControlGrid, TpsSystem, WarpBasis};

/// Layer widths and resolutions of the whole model.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub lr_size: usize,
    pub hr_size: usize,
    /// Feature maps per frame, D.
    pub feature_channels: usize,
    pub extractor_fc_width: usize,
    pub warp_stream_channels: usize,
    pub warp_trunk_channels: usize,
    pub warp_trunk_layers: usize,
    pub warp_fc_width: usize,
    pub control_side: usize,
    pub recon_channels: Vec<usize>,
    pub recon_kernels: Vec<usize>,
}

impl ArchConfig {
    /// Full-size network: 16×16 frames, ×8 output.
    pub fn full() -> Self {
        Self {
            lr_size: 16,
            hr_size: 128,
            feature_channels: 16,
            extractor_fc_width: 256,
            warp_stream_channels: 20,
            warp_trunk_channels: 100,
            warp_trunk_layers: 5,
            warp_fc_width: 256,
            control_side: tps::GRID_SIDE,
            recon_channels: vec![16, 32, 64, 64, 64, 32, 16, 3],
            recon_kernels: vec![5, 7, 7, 7, 7, 7, 5, 5],
        }
    }

    /// Desk-scale profile: 8×8 frames, ×4 output, narrower layers.
    pub fn tiny() -> Self {
        Self {
            lr_size: 8,
            hr_size: 32,
            feature_channels: 8,
            extractor_fc_width: 16,
            warp_stream_channels: 10,
            warp_trunk_channels: 16,
            warp_trunk_layers: 5,
            warp_fc_width: 64,
            control_side: tps::GRID_SIDE,
            recon_channels: vec![8, 8, 8, 8, 8, 8, 8, 3],
            recon_kernels: vec![3, 3, 3, 3, 3, 3, 3, 3],
        }
    }

    /// Very small profile for finite-difference gradient checks.
    pub fn micro() -> Self {
        Self {
            lr_size: 4,
            hr_size: 8,
            feature_channels: 3,
            extractor_fc_width: 6,
            warp_stream_channels: 3,
            warp_trunk_channels: 4,
            warp_trunk_layers: 2,
            warp_fc_width: 6,
            control_side: tps::GRID_SIDE,
            recon_channels: vec![4, 3],
            recon_kernels: vec![3, 3],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!("unknown profile {other:?} (full, tiny, micro)"))),
        }
    }

    pub fn magnification(&self) -> usize {
        self.hr_size / self.lr_size
    }

    pub fn control_points(&self) -> usize {
        self.control_side * self.control_side
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.magnification();
        if self.lr_size == 0 || m * self.lr_size != self.hr_size || m < 2 || m % 2 != 0 {
            return Err(Error::Config(format!(
                "output size {} must be an even multiple (≥2) of input size {}",
                self.hr_size, self.lr_size
            )));
        }
        if self.feature_channels < 2 {
            return Err(Error::Config("need at least 2 feature channels".into()));
        }
        if self.recon_channels.len() != self.recon_kernels.len() || self.recon_channels.last() != Some(&3) {
            return Err(Error::Config("reconstruction must end in 3 channels, one kernel per layer".into()));
        }
        if let Some(k) = self.recon_kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("reconstruction kernels must be odd, got {k}")));
        }
        if self.warp_trunk_layers == 0 {
            return Err(Error::Config("warp trunk needs at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantKind {
    Single,
    Stacked,
    Warped,
}

/// `f1`, `fK` or `fKwarp`, with the sequence length 2k+1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelVariant {
    kind: VariantKind,
    frames: usize,
}

impl ModelVariant {
    pub fn new(kind: VariantKind, frames: usize) -> Result<Self> {
        if frames % 2 == 0 {
            return Err(Error::Config(format!("sequence length must be odd, got {frames}")));
        }
        match kind {
            VariantKind::Single if frames != 1 => Err(Error::Config("f1 takes exactly one frame".into())),
            VariantKind::Stacked | VariantKind::Warped if frames < 3 => {
                Err(Error::Config("multi-frame variants need at least 3 frames".into()))
            }
            _ => Ok(Self { kind, frames }),
        }
    }

    pub fn f1() -> Self {
        Self {
            kind: VariantKind::Single,
            frames: 1,
        }
    }

    pub fn stacked(frames: usize) -> Result<Self> {
        Self::new(VariantKind::Stacked, frames)
    }

    pub fn warped(frames: usize) -> Result<Self> {
        Self::new(VariantKind::Warped, frames)
    }

    pub fn kind(&self) -> VariantKind {
        self.kind
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn center(&self) -> usize {
        self.frames / 2
    }

    pub fn uses_warp(&self) -> bool {
        self.kind == VariantKind::Warped
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VariantKind::Single => write!(f, "f1"),
            VariantKind::Stacked => write!(f, "f{}", self.frames),
            VariantKind::Warped => write!(f, "f{}warp", self.frames),
        }
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown variant {s:?} (expected f1, fK or fKwarp)"));
        let rest = s.strip_prefix('f').ok_or_else(bad)?;
        let (digits, warped) = match rest.strip_suffix("warp") {
            Some(d) => (d, true),
            None => (rest, false),
        };
        let frames: usize = digits.parse().map_err(|_| bad())?;
        match (frames, warped) {
            (1, false) => Ok(Self::f1()),
            (n, false) => Self::stacked(n),
            (n, true) => Self::warped(n),
        }
    }
}

/// Low-resolution input frames plus the optional high-resolution target.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence<T> {
    pub frames: Vec<Tensor<T>>,
    pub ground_truth: Option<Tensor<T>>,
}

impl<T: Element> FrameSequence<T> {
    pub fn new(frames: Vec<Tensor<T>>, ground_truth: Option<Tensor<T>>) -> Result<Self> {
        if frames.is_empty() || frames.len() % 2 == 0 {
            return Err(Error::Data(format!("sequence length must be odd, got {}", frames.len())));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Data(format!("frames must be 3×h×w, got {shape:?}")));
        }
        for f in frames.iter().chain(ground_truth.iter()) {
            if f.data().iter().any(|&v| !(v >= T::ZERO && v <= T::ONE)) {
                return Err(Error::Data("pixel values must lie in [0, 1]".into()));
            }
        }
        if frames.iter().any(|f| f.shape() != shape.as_slice()) {
            return Err(Error::Data("all frames must share one shape".into()));
        }
        Ok(Self { frames, ground_truth })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn center(&self) -> usize {
        self.frames.len() / 2
    }

    pub fn central(&self) -> &Tensor<T> {
        &self.frames[self.center()]
    }
}

/// Two-stream per-frame feature extractor: a ×m deconvolution giving D−1
/// maps, and a four-layer fully connected stream giving one more map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T> {
    pub upsample: ConvTranspose2d<T>,
    pub fc: Vec<Linear<T>>,
    hr_size: usize,
}

impl<T: Element> FeatureExtractor<T> {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let lr_in = 3 * arch.lr_size * arch.lr_size;
        let w = arch.extractor_fc_width;
        let hr2 = arch.hr_size * arch.hr_size;
        Ok(Self {
            upsample: ConvTranspose2d::upsampling(3, arch.feature_channels - 1, arch.magnification(), seed)?,
            fc: vec![
                Linear::init(lr_in, w, seed + 1)?,
                Linear::init(w, w, seed + 2)?,
                Linear::init(w, w, seed + 3)?,
                Linear::init(w, hr2, seed + 4)?,
            ],
            hr_size: arch.hr_size,
        })
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, T>, frame: Var, how: Binding) -> Result<Var, TensorError> {
        let s = tape.shape(frame).to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] * self.upsample.stride != self.hr_size || s[1] != s[2] {
            return Err(TensorError::invalid("extract_features", format!("unexpected frame shape {s:?}")));
        }
        let a = self.upsample.forward(tape, frame, how)?;
        let mut h = tape.reshape(frame, &[s.iter().product()])?;
        let last = self.fc.len() - 1;
        for (i, layer) in self.fc.iter().enumerate() {
            h = layer.forward(tape, h, how)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        let b = tape.reshape(h, &[1, self.hr_size, self.hr_size])?;
        tape.concat(&[a, b])
    }
}

impl<T: Element> Parameters<T> for FeatureExtractor<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<T>)) {
        self.upsample.visit(&format!("{prefix}/upsample"), f);
        self.fc.visit(&format!("{prefix}/fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.upsample.visit_mut(&format!("{prefix}/upsample"), f);
        self.fc.visit_mut(&format!("{prefix}/fc"), f);
    }
}

/// Predicts TPS control-point shifts aligning a frame to the central frame.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpPredictor<T> {
    pub reference_stream: Vec<Conv2d<T>>,
    pub moving_stream: Vec<Conv2d<T>>,
    pub trunk: Vec<Conv2d<T>>,
    pub fc: Vec<Linear<T>>,
    /// Final layer emitting the 2C shift values.
    pub head: Linear<T>,
}

impl<T: Element> WarpPredictor<T> {
    /// The output head starts at zero, so an untrained predictor is the identity warp.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let s = arch.warp_stream_channels;
        let t = arch.warp_trunk_channels;
        let stream = |base: u64| -> Result<Vec<Conv2d<T>>> {
            Ok(vec![Conv2d::same(3, s, 3, base)?, Conv2d::same(s, s, 3, base + 1)?, Conv2d::same(s, s, 1, base + 2)?])
        };
        let mut trunk = Vec::with_capacity(arch.warp_trunk_layers);
        for i in 0..arch.warp_trunk_layers {
            let in_c = if i == 0 { 2 * s } else { t };
            trunk.push(Conv2d::same(in_c, t, 3, seed + 10 + i as u64)?);
        }
        let w = arch.warp_fc_width;
        let flat = t * arch.lr_size * arch.lr_size;
        let mut head = Linear::init(w, 2 * arch.control_points(), seed + 40)?;
        head.zero();
        Ok(Self {
            reference_stream: stream(seed)?,
            moving_stream: stream(seed + 5)?,
            trunk,
            fc: vec![Linear::init(flat, w, seed + 30)?, Linear::init(w, w, seed + 31)?, Linear::init(w, w, seed + 32)?],
            head,
        })
    }

    /// Shift vector of length 2C for aligning `moving` onto `reference`.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        reference: Var,
        moving: Var,
        how: Binding,
    ) -> Result<Var, TensorError> {
        if tape.shape(reference) != tape.shape(moving) {
            return Err(TensorError::ShapeMismatch {
                op: "predict_warp",
                lhs: tape.shape(reference).to_vec(),
                rhs: tape.shape(moving).to_vec(),
            });
        }
        let run = |tape: &mut Tape<'a, T>, layers: &'a [Conv2d<T>], mut x: Var| -> Result<Var, TensorError> {
            for l in layers {
                x = l.forward(tape, x, how)?;
                x = tape.relu(x)?;
            }
            Ok(x)
        };
        let r = run(tape, &self.reference_stream, reference)?;
        let m = run(tape, &self.moving_stream, moving)?;
        let joined = tape.concat(&[r, m])?;
        let trunk = run(tape, &self.trunk, joined)?;
        let n = tape.value(trunk).numel();
        let mut h = tape.reshape(trunk, &[n])?;
        for l in &self.fc {
            h = l.forward(tape, h, how)?;
            h = tape.relu(h)?;
        }
        self.head.forward(tape, h, how)
    }
}

impl<T: Element> Parameters<T> for WarpPredictor<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<T>)) {
        self.reference_stream.visit(&format!("{prefix}/reference"), f);
        self.moving_stream.visit(&format!("{prefix}/moving"), f);
        self.trunk.visit(&format!("{prefix}/trunk"), f);
        self.fc.visit(&format!("{prefix}/fc"), f);
        self.head.visit(&format!("{prefix}/head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.reference_stream.visit_mut(&format!("{prefix}/reference"), f);
        self.moving_stream.visit_mut(&format!("{prefix}/moving"), f);
        self.trunk.visit_mut(&format!("{prefix}/trunk"), f);
        self.fc.visit_mut(&format!("{prefix}/fc"), f);
        self.head.visit_mut(&format!("{prefix}/head"), f);
    }
}

/// Same-padded convolution stack, ReLU between layers, sigmoid at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstructor<T> {
    pub layers: Vec<Conv2d<T>>,
}

impl<T: Element> Reconstructor<T> {
    pub fn init(arch: &ArchConfig, in_channels: usize, seed: u64) -> Result<Self> {
        let mut in_c = in_channels;
        let mut layers = Vec::with_capacity(arch.recon_channels.len());
        for (i, (&out_c, &k)) in arch.recon_channels.iter().zip(&arch.recon_kernels).enumerate() {
            layers.push(Conv2d::same(in_c, out_c, k, seed + i as u64)?);
            in_c = out_c;
        }
        Ok(Self { layers })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, T>, stacked: Var, how: Binding) -> Result<Var, TensorError> {
        let c = tape.shape(stacked)[0];
        if c != self.in_channels() {
            return Err(TensorError::invalid(
                "reconstruct",
                format!("expected {} stacked channels, got {c}", self.in_channels()),
            ));
        }
        let mut x = stacked;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, x, how)?;
            x = if i < last { tape.relu(x)? } else { tape.sigmoid(x)? };
        }
        Ok(x)
    }
}

impl<T: Element> Parameters<T> for Reconstructor<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<T>)) {
        self.layers.visit(&format!("{prefix}/conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.layers.visit_mut(&format!("{prefix}/conv"), f);
    }
}

/// The four trainable parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub central: FeatureExtractor<T>,
    pub adjacent: FeatureExtractor<T>,
    pub warp: WarpPredictor<T>,
    pub recon: Reconstructor<T>,
}

pub const GROUP_CENTRAL: &str = "theta_F0";
pub const GROUP_ADJACENT: &str = "theta_Fadj";
pub const GROUP_WARP: &str = "theta_P";
pub const GROUP_RECON: &str = "theta_R";

impl<T: Element> ModelParams<T> {
    pub fn init(arch: &ArchConfig, variant: ModelVariant, seed: u64) -> Result<Self> {
        arch.validate()?;
        let base = seed.wrapping_mul(1_000_003);
        Ok(Self {
            central: FeatureExtractor::init(arch, base)?,
            adjacent: FeatureExtractor::init(arch, base + 100)?,
            warp: WarpPredictor::init(arch, base + 200)?,
            recon: Reconstructor::init(arch, variant.frames() * arch.feature_channels, base + 300)?,
        })
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            central: cast_extractor(&self.central),
            adjacent: cast_extractor(&self.adjacent),
            warp: WarpPredictor {
                reference_stream: self.warp.reference_stream.iter().map(cast_conv).collect(),
                moving_stream: self.warp.moving_stream.iter().map(cast_conv).collect(),
                trunk: self.warp.trunk.iter().map(cast_conv).collect(),
                fc: self.warp.fc.iter().map(cast_linear).collect(),
                head: cast_linear(&self.warp.head),
            },
            recon: Reconstructor {
                layers: self.recon.layers.iter().map(cast_conv).collect(),
            },
        }
    }
}

fn cast_conv<T: Element, U: Element>(c: &Conv2d<T>) -> Conv2d<U> {
    Conv2d {
        weight: c.weight.cast(),
        bias: c.bias.cast(),
        stride: c.stride,
        pad: c.pad,
    }
}

fn cast_linear<T: Element, U: Element>(l: &Linear<T>) -> Linear<U> {
    Linear {
        weight: l.weight.cast(),
        bias: l.bias.cast(),
    }
}

fn cast_extractor<T: Element, U: Element>(e: &FeatureExtractor<T>) -> FeatureExtractor<U> {
    FeatureExtractor {
        upsample: ConvTranspose2d {
            weight: e.upsample.weight.cast(),
            bias: e.upsample.bias.cast(),
            stride: e.upsample.stride,
            pad: e.upsample.pad,
        },
        fc: e.fc.iter().map(cast_linear).collect(),
        hr_size: e.hr_size,
    }
}

impl<T: Element> Parameters<T> for ModelParams<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<T>)) {
        self.central.visit(&format!("{prefix}{GROUP_CENTRAL}"), f);
        self.adjacent.visit(&format!("{prefix}{GROUP_ADJACENT}"), f);
        self.warp.visit(&format!("{prefix}{GROUP_WARP}"), f);
        self.recon.visit(&format!("{prefix}{GROUP_RECON}"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.central.visit_mut(&format!("{prefix}{GROUP_CENTRAL}"), f);
        self.adjacent.visit_mut(&format!("{prefix}{GROUP_ADJACENT}"), f);
        self.warp.visit_mut(&format!("{prefix}{GROUP_WARP}"), f);
        self.recon.visit_mut(&format!("{prefix}{GROUP_RECON}"), f);
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub output: Var,
    pub stacked: Var,
    /// Per-frame features before warping, in sequence order.
    pub features: Vec<Var>,
    /// Per-frame features as stacked (warped for adjacent frames of warp variants).
    pub aligned: Vec<Var>,
    /// Predicted shift vectors; `None` for the central frame and non-warp variants.
    pub shifts: Vec<Option<Var>>,
}

/// A model variant with its parameters and the precomputed warp basis.
#[derive(Clone, Debug)]
pub struct SrModel<T> {
    pub arch: ArchConfig,
    pub variant: ModelVariant,
    pub params: ModelParams<T>,
    /// Keeps the warp predictor out of gradient updates.
    pub freeze_warp: bool,
    feature_basis: Arc<WarpBasis<T>>,
}

impl<T: Element> SrModel<T> {
    pub fn new(arch: ArchConfig, variant: ModelVariant, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&arch, variant, seed)?;
        Self::with_params(arch, variant, params)
    }

    pub fn with_params(arch: ArchConfig, variant: ModelVariant, params: ModelParams<T>) -> Result<Self> {
        arch.validate()?;
        let expected = variant.frames() * arch.feature_channels;
        if params.recon.in_channels() != expected {
            return Err(Error::Config(format!(
                "reconstruction expects {} channels but {variant} stacks {expected}",
                params.recon.in_channels()
            )));
        }
        let system = TpsSystem::new(ControlGrid::regular(arch.control_side))?;
        let feature_basis = Arc::new(WarpBasis::for_grid(&system, arch.hr_size, arch.hr_size));
        Ok(Self {
            arch,
            variant,
            params,
            freeze_warp: false,
            feature_basis,
        })
    }

    pub fn feature_basis(&self) -> &WarpBasis<T> {
        &self.feature_basis
    }

    pub fn cast<U: Element>(&self) -> Result<SrModel<U>> {
        let mut m = SrModel::with_params(self.arch.clone(), self.variant, self.params.cast())?;
        m.freeze_warp = self.freeze_warp;
        Ok(m)
    }

    fn warp_binding(&self) -> Binding {
        if self.freeze_warp {
            Binding::Frozen
        } else {
            Binding::Trainable
        }
    }

    /// Full pass: per-frame features, optional alignment, stacking, reconstruction.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, T>, seq: &'a FrameSequence<T>) -> Result<ForwardTrace, TensorError> {
        self.forward_with(&self.params, tape, seq)
    }

    /// [`SrModel::forward`] with parameters other than the model's own,
    /// which must share its architecture.
    pub fn forward_with<'a>(
        &'a self,
        params: &'a ModelParams<T>,
        tape: &mut Tape<'a, T>,
        seq: &'a FrameSequence<T>,
    ) -> Result<ForwardTrace, TensorError> {
        if seq.len() != self.variant.frames() {
            return Err(TensorError::invalid(
                "forward",
                format!("{} expects {} frames, got {}", self.variant, self.variant.frames(), seq.len()),
            ));
        }
        let frames: Vec<Var> = seq.frames.iter().map(|f| tape.constant_ref(f)).collect();
        self.forward_vars(params, tape, &frames, None)
    }

    /// Forward pass for frames already on the tape. `oracle_shifts`, when
    /// given, replaces the predicted shift vector of each adjacent frame.
    pub fn forward_vars<'a>(
        &'a self,
        params: &'a ModelParams<T>,
        tape: &mut Tape<'a, T>,
        frames: &[Var],
        oracle_shifts: Option<&[Var]>,
    ) -> Result<ForwardTrace, TensorError> {
        let k = self.variant.center();
        if frames.len() != self.variant.frames() || oracle_shifts.is_some_and(|s| s.len() != frames.len()) {
            return Err(TensorError::invalid("forward", "frame count does not match the variant"));
        }
        let p = params;
        let mut features = Vec::with_capacity(frames.len());
        for (i, &f) in frames.iter().enumerate() {
            let extractor = if i == k { &p.central } else { &p.adjacent };
            features.push(extractor.forward(tape, f, Binding::Trainable)?);
        }
        let mut aligned = features.clone();
        let mut shifts = vec![None; frames.len()];
        if self.variant.uses_warp() {
            for i in (0..frames.len()).filter(|&i| i != k) {
                let s = match oracle_shifts {
                    Some(o) => o[i],
                    None => p.warp.forward(tape, frames[k], frames[i], self.warp_binding())?,
                };
                let field = tps::tps_grid(tape, s, &self.feature_basis)?;
                aligned[i] = tape.grid_sample(features[i], field)?;
                shifts[i] = Some(s);
            }
        }
        let stacked = tape.concat(&aligned)?;
        let output = p.recon.forward(tape, stacked, Binding::Trainable)?;
        Ok(ForwardTrace {
            output,
            stacked,
            features,
            aligned,
            shifts,
        })
    }

    /// Reconstruction of the central frame, outside any training step.
    pub fn infer(&self, seq: &FrameSequence<T>) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, seq)?;
        Ok(tape.value(trace.output).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(n: usize, size: usize, salt: usize) -> Vec<Tensor<f32>> {
        (0..n)
            .map(|f| Tensor::from_fn(&[3, size, size], |i| (((i + 7 * f + salt) * 2654435761usize) % 1000) as f32 / 1000.0))
            .collect()
    }

    #[test]
    fn variant_names_round_trip_and_validate() {
        for name in ["f1", "f5", "f25", "f5warp", "f25warp"] {
            let v: ModelVariant = name.parse().unwrap();
            assert_eq!(v.to_string(), name);
        }
        assert!("f4".parse::<ModelVariant>().is_err());
        assert!("f1warp".parse::<ModelVariant>().is_err());
        assert!("g5".parse::<ModelVariant>().is_err());
        assert_eq!("f25warp".parse::<ModelVariant>().unwrap().center(), 12);
    }

    #[test]
    fn sequences_must_be_odd_and_in_range() {
        assert!(FrameSequence::new(frames(2, 4, 0), None).is_err());
        let mut bad = frames(1, 4, 0);
        bad[0].data_mut()[0] = 1.5;
        assert!(FrameSequence::new(bad, None).is_err());
        assert_eq!(FrameSequence::new(frames(3, 4, 0), None).unwrap().center(), 1);
    }

    #[test]
    fn zero_frame_and_zero_biases_give_zero_features() {
        let arch = ArchConfig::tiny();
        let ext = FeatureExtractor::<f32>::init(&arch, 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 8, 8]));
        let f = ext.forward(&mut tape, x, Binding::Frozen).unwrap();
        assert_eq!(tape.shape(f), &[8, 32, 32]);
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruction_of_zero_input_with_zero_params_is_half_grey() {
        let arch = ArchConfig::tiny();
        let mut r = Reconstructor::<f32>::init(&arch, 8, 0).unwrap();
        for l in &mut r.layers {
            l.weight.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[8, 32, 32]));
        let y = r.forward(&mut tape, x, Binding::Frozen).unwrap();
        assert_eq!(tape.shape(y), &[3, 32, 32]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
        let bad = tape.constant(Tensor::zeros(&[7, 32, 32]));
        assert!(r.forward(&mut tape, bad, Binding::Frozen).is_err());
    }

    #[test]
    fn untrained_predictor_emits_zero_shifts() {
        let arch = ArchConfig::tiny();
        let p = WarpPredictor::<f32>::init(&arch, 1).unwrap();
        let fr = frames(2, 8, 1);
        let mut tape = Tape::new();
        let a = tape.constant(fr[0].clone());
        let b = tape.constant(fr[1].clone());
        let s = p.forward(&mut tape, a, b, Binding::Frozen).unwrap();
        assert_eq!(tape.shape(s), &[128]);
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_sequence_length() {
        let model = SrModel::<f32>::new(ArchConfig::tiny(), ModelVariant::stacked(5).unwrap(), 0).unwrap();
        let seq = FrameSequence::new(frames(3, 8, 0), None).unwrap();
        let mut tape = Tape::new();
        assert!(model.forward(&mut tape, &seq).is_err());
    }

    #[test]
    fn adjacent_frames_share_one_extractor() {
        let model = SrModel::<f32>::new(ArchConfig::tiny(), ModelVariant::stacked(5).unwrap(), 4).unwrap();
        let same = frames(1, 8, 9).pop().unwrap();
        let seq = FrameSequence::new(vec![same.clone(); 5], None).unwrap();
        let mut tape = Tape::new();
        let tr = model.forward(&mut tape, &seq).unwrap();
        let f = |i: usize| tape.value(tr.features[i]).clone();
        assert_eq!(f(0), f(1));
        assert_eq!(f(3), f(4));
        assert_ne!(f(2), f(1), "central extractor has its own parameters");
    }

    #[test]
    fn params_cast_preserves_layout() {
        let p = ModelParams::<f32>::init(&ArchConfig::micro(), ModelVariant::warped(3).unwrap(), 2).unwrap();
        let q: ModelParams<f64> = p.cast();
        let back: ModelParams<f32> = q.cast();
        assert_eq!(p, back);
    }
}
