//! Frozen feature network and the pixel + feature-space training objective.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::element::Element;
use crate::error::{Error, Result, TensorError};
use crate::layers::{Binding, Conv2d, Linear, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tap {
    Pool3,
    Pool4,
    Fc7,
}

impl Tap {
    pub const ALL: [Tap; 3] = [Tap::Pool3, Tap::Pool4, Tap::Fc7];

    pub fn name(self) -> &'static str {
        match self {
            Tap::Pool3 => "pool3",
            Tap::Pool4 => "pool4",
            Tap::Fc7 => "fc7",
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tap::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature tap {s:?} (pool3, pool4, fc7)")))
    }
}

/// VGG-shaped stand-in: four conv+ReLU+2×2-pool blocks, the last two of
/// which are the `pool3` and `pool4` taps, then global average pooling and
/// two fully connected layers ending at `fc7`. Input sides must be
/// divisible by 16.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNetwork<T> {
    pub blocks: Vec<Conv2d<T>>,
    pub fc6: Linear<T>,
    pub fc7: Linear<T>,
}

pub const FEATURE_WIDTHS: [usize; 4] = [8, 16, 24, 32];
pub const FC_WIDTH: usize = 64;

impl<T: Element> FeatureNetwork<T> {
    pub fn seeded(seed: u64) -> Result<Self> {
        let mut blocks = Vec::with_capacity(FEATURE_WIDTHS.len());
        let mut in_c = 3;
        for (i, &c) in FEATURE_WIDTHS.iter().enumerate() {
            blocks.push(Conv2d::same(in_c, c, 3, seed.wrapping_add(i as u64))?);
            in_c = c;
        }
        Ok(Self {
            blocks,
            fc6: Linear::init(in_c, FC_WIDTH, seed.wrapping_add(10))?,
            fc7: Linear::init(FC_WIDTH, FC_WIDTH, seed.wrapping_add(11))?,
        })
    }

    /// Replaces the seeded weights with the tensors of a checkpoint
    /// container whose section names follow [`Parameters::visit`] with an
    /// empty prefix.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let mut net = FeatureNetwork::<f32>::seeded(0)?;
        ckpt.restore_params("", &mut net)?;
        Ok(net.cast())
    }

    pub fn cast<U: Element>(&self) -> FeatureNetwork<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            stride: c.stride,
            pad: c.pad,
        };
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        FeatureNetwork {
            blocks: self.blocks.iter().map(conv).collect(),
            fc6: lin(&self.fc6),
            fc7: lin(&self.fc7),
        }
    }

    /// Runs the network only as deep as the deepest requested tap. Weights
    /// always enter the tape as constants.
    pub fn taps<'a>(&'a self, tape: &mut Tape<'a, T>, img: Var, wanted: &[Tap]) -> Result<TapValues, TensorError> {
        let s = tape.shape(img);
        if s.len() != 3 || s[0] != 3 || s[1] % 16 != 0 || s[2] % 16 != 0 || s[1] == 0 {
            return Err(TensorError::invalid(
                "feature_network",
                format!("needs 3×H×W with H, W multiples of 16; got {s:?}"),
            ));
        }
        let depth = wanted.iter().max().copied();
        let mut out = TapValues::default();
        let Some(depth) = depth else { return Ok(out) };
        let mut x = img;
        for (i, conv) in self.blocks.iter().enumerate() {
            x = conv.forward(tape, x, Binding::Frozen)?;
            x = tape.relu(x)?;
            x = tape.max_pool2(x)?;
            match i {
                2 => out.pool3 = Some(x),
                3 => out.pool4 = Some(x),
                _ => {}
            }
            if i == 2 && depth == Tap::Pool3 {
                return Ok(out);
            }
        }
        if depth == Tap::Fc7 {
            let g = tape.global_avg_pool(x)?;
            let h = self.fc6.forward(tape, g, Binding::Frozen)?;
            let h = tape.relu(h)?;
            out.fc7 = Some(self.fc7.forward(tape, h, Binding::Frozen)?);
        }
        Ok(out)
    }

    pub fn tap<'a>(&'a self, tape: &mut Tape<'a, T>, img: Var, tap: Tap) -> Result<Var, TensorError> {
        let v = self.taps(tape, img, &[tap])?;
        Ok(v.get(tap).expect("requested tap is computed"))
    }

    /// Tap features of an image outside any tape.
    pub fn features(&self, img: &Tensor<T>, tap: Tap) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let v = self.tap(&mut tape, x, tap)?;
        Ok(tape.value(v).clone())
    }
}

impl<T: Element> Parameters<T> for FeatureNetwork<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<T>)) {
        self.blocks.visit(&format!("{prefix}conv"), f);
        self.fc6.visit(&format!("{prefix}fc6"), f);
        self.fc7.visit(&format!("{prefix}fc7"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.blocks.visit_mut(&format!("{prefix}conv"), f);
        self.fc6.visit_mut(&format!("{prefix}fc6"), f);
        self.fc7.visit_mut(&format!("{prefix}fc7"), f);
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TapValues {
    pub pool3: Option<Var>,
    pub pool4: Option<Var>,
    pub fc7: Option<Var>,
}

impl TapValues {
    pub fn get(&self, tap: Tap) -> Option<Var> {
        match tap {
            Tap::Pool3 => self.pool3,
            Tap::Pool4 => self.pool4,
            Tap::Fc7 => self.fc7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Pixel,
    PixelPool3Pool4,
    PixelFc7,
}

impl LossMode {
    pub fn taps(self) -> &'static [Tap] {
        match self {
            LossMode::Pixel => &[],
            LossMode::PixelPool3Pool4 => &[Tap::Pool3, Tap::Pool4],
            LossMode::PixelFc7 => &[Tap::Fc7],
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Pixel => "pixel",
            LossMode::PixelPool3Pool4 => "pixel+pool3+pool4",
            LossMode::PixelFc7 => "pixel+fc7",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(LossMode::Pixel),
            "pixel+pool3+pool4" => Ok(LossMode::PixelPool3Pool4),
            "pixel+fc7" => Ok(LossMode::PixelFc7),
            _ => Err(Error::Config(format!(
                "unknown loss mode {s:?} (pixel, pixel+pool3+pool4, pixel+fc7)"
            ))),
        }
    }
}

/// Weight of each feature-space term; taps with weight zero are skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub pool3: f64,
    pub pool4: f64,
    pub fc7: f64,
}

/// Feature weight used for still-image training.
pub const LAMBDA_IMAGES: f64 = 1e3;
/// Feature weight used for video training.
pub const LAMBDA_VIDEO: f64 = 1e5;

impl LossWeights {
    pub fn pixel_only() -> Self {
        Self {
            pool3: 0.0,
            pool4: 0.0,
            fc7: 0.0,
        }
    }

    pub fn preset(mode: LossMode, lambda: f64) -> Self {
        let mut w = Self::pixel_only();
        for &t in mode.taps() {
            w.set(t, lambda);
        }
        w
    }

    pub fn get(&self, tap: Tap) -> f64 {
        match tap {
            Tap::Pool3 => self.pool3,
            Tap::Pool4 => self.pool4,
            Tap::Fc7 => self.fc7,
        }
    }

    pub fn set(&mut self, tap: Tap, value: f64) {
        match tap {
            Tap::Pool3 => self.pool3 = value,
            Tap::Pool4 => self.pool4 = value,
            Tap::Fc7 => self.fc7 = value,
        }
    }

    pub fn active(&self) -> Vec<Tap> {
        Tap::ALL.into_iter().filter(|&t| self.get(t) != 0.0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for t in Tap::ALL {
            let l = self.get(t);
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("weight for {t} must be finite and ≥ 0, got {l}")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::preset(LossMode::PixelPool3Pool4, LAMBDA_IMAGES)
    }
}

/// `‖target − pred‖² + Σ λ·‖tap(target) − tap(pred)‖²`, differentiable in
/// `pred` only; `target` must be a constant.
pub fn total_loss<'a, T: Element>(
    tape: &mut Tape<'a, T>,
    pred: Var,
    target: Var,
    net: &'a FeatureNetwork<T>,
    weights: &LossWeights,
) -> Result<Var, TensorError> {
    let mut loss = tape.sum_squared_error(pred, target)?;
    let active = weights.active();
    if active.is_empty() {
        return Ok(loss);
    }
    let p = net.taps(tape, pred, &active)?;
    let t = net.taps(tape, target, &active)?;
    for tap in active {
        let (a, b) = (p.get(tap).expect("active tap"), t.get(tap).expect("active tap"));
        let term = tape.sum_squared_error(a, b)?;
        let term = tape.scale(term, T::from_f64(weights.get(tap)))?;
        loss = tape.add(loss, term)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: usize, side: usize) -> Tensor<f64> {
        Tensor::from_fn(&[3, side, side], |i| (((i + seed) * 2654435761usize) % 997) as f64 / 997.0)
    }

    fn sse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    #[test]
    fn tap_shapes_follow_the_pooling() {
        let net = FeatureNetwork::<f64>::seeded(1).unwrap();
        let img = image(0, 32);
        assert_eq!(net.features(&img, Tap::Pool3).unwrap().shape(), &[24, 4, 4]);
        assert_eq!(net.features(&img, Tap::Pool4).unwrap().shape(), &[32, 2, 2]);
        assert_eq!(net.features(&img, Tap::Fc7).unwrap().shape(), &[FC_WIDTH]);
        assert!(net.features(&image(0, 24), Tap::Pool3).is_err());
    }

    #[test]
    fn features_are_deterministic() {
        let a = FeatureNetwork::<f64>::seeded(5).unwrap();
        let b = FeatureNetwork::<f64>::seeded(5).unwrap();
        let img = image(3, 32);
        assert_eq!(a.features(&img, Tap::Fc7).unwrap(), b.features(&img, Tap::Fc7).unwrap());
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let net = FeatureNetwork::<f64>::seeded(2).unwrap();
        let img = image(1, 32);
        let mut tape = Tape::new();
        let p = tape.constant(img.clone());
        let t = tape.constant(img);
        let w = LossWeights::preset(LossMode::PixelPool3Pool4, LAMBDA_VIDEO);
        let l = total_loss(&mut tape, p, t, &net, &w).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn loss_equals_term_by_term_recomputation() {
        let net = FeatureNetwork::<f64>::seeded(7).unwrap();
        let (a, b) = (image(1, 32), image(2, 32));
        let expected = sse(&a, &b)
            + 1e3 * sse(&net.features(&a, Tap::Pool3).unwrap(), &net.features(&b, Tap::Pool3).unwrap())
            + 1e3 * sse(&net.features(&a, Tap::Pool4).unwrap(), &net.features(&b, Tap::Pool4).unwrap());
        let mut tape = Tape::new();
        let p = tape.constant(a.clone());
        let t = tape.constant(b.clone());
        let l = total_loss(&mut tape, p, t, &net, &LossWeights::preset(LossMode::PixelPool3Pool4, 1e3)).unwrap();
        let got = tape.value(l).data()[0];
        assert!(((got - expected) / expected).abs() < 1e-6, "{got} vs {expected}");

        let mut tape = Tape::new();
        let p = tape.constant(a.clone());
        let t = tape.constant(b.clone());
        let l = total_loss(&mut tape, p, t, &net, &LossWeights::pixel_only()).unwrap();
        assert_eq!(tape.value(l).data()[0], sse(&a, &b));
    }

    #[test]
    fn frozen_weights_receive_no_gradient() {
        let net = FeatureNetwork::<f64>::seeded(4).unwrap();
        let target = image(5, 32);
        let mut tape = Tape::new();
        let p = tape.leaf(image(6, 32), true);
        let t = tape.constant_ref(&target);
        let l = total_loss(&mut tape, p, t, &net, &LossWeights::preset(LossMode::PixelFc7, 1e3)).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(p).unwrap().iter().any(|&v| v != 0.0));
        net.visit("", &mut |name, w| assert!(g.param(w).is_none(), "{name} got a gradient"));
    }

    #[test]
    fn names_parse() {
        for m in ["pixel", "pixel+pool3+pool4", "pixel+fc7"] {
            assert_eq!(m.parse::<LossMode>().unwrap().to_string(), m);
        }
        assert!("pool5".parse::<Tap>().is_err());
        let mut w = LossWeights::pixel_only();
        w.fc7 = -1.0;
        assert!(w.validate().is_err());
    }
}
