//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored; unknown or
//! repeated keys are errors. [`RunConfig::to_text`] writes every key in a
//! fixed order, so its hash identifies the configuration.

use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelVariant};
use crate::perceptual::{LossMode, LossWeights, Tap, LAMBDA_IMAGES};
use crate::training::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub variant: ModelVariant,
    /// Overrides the profile's feature-map count.
    pub features: Option<usize>,
    pub loss: LossMode,
    /// Weight of every feature term of `loss`, unless overridden per tap.
    pub lambda: f64,
    pub lambda_pool3: Option<f64>,
    pub lambda_pool4: Option<f64>,
    pub lambda_fc7: Option<f64>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_warp: bool,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub feature_seed: u64,
    pub feature_weights: Option<PathBuf>,
    pub pretrained_warp: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: "tiny".into(),
            variant: ModelVariant::f1(),
            features: None,
            loss: LossMode::PixelPool3Pool4,
            lambda: LAMBDA_IMAGES,
            lambda_pool3: None,
            lambda_pool4: None,
            lambda_fc7: None,
            lr: AdamConfig::default().lr,
            epochs: 50,
            batch_size: 10,
            seed: 0,
            freeze_warp: false,
            checkpoint_every: 0,
            feature_seed: 7,
            feature_weights: None,
            pretrained_warp: None,
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
}

fn opt_text<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen: Vec<String> = Vec::new();
        let mut frames = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(Error::Config(format!("key {k} given twice")));
            }
            seen.push(k.to_owned());
            let opt_f64 = |v: &str| -> Result<Option<f64>> {
                if v.is_empty() {
                    Ok(None)
                } else {
                    value(k, v).map(Some)
                }
            };
            let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
            match k {
                "profile" => c.profile = v.to_owned(),
                "variant" => c.variant = v.parse()?,
                "frames" => frames = Some(value::<usize>(k, v)?),
                "features" => c.features = if v.is_empty() { None } else { Some(value(k, v)?) },
                "loss" => c.loss = v.parse()?,
                "lambda" => c.lambda = value(k, v)?,
                "lambda_pool3" => c.lambda_pool3 = opt_f64(v)?,
                "lambda_pool4" => c.lambda_pool4 = opt_f64(v)?,
                "lambda_fc7" => c.lambda_fc7 = opt_f64(v)?,
                "lr" => c.lr = value(k, v)?,
                "epochs" => c.epochs = value(k, v)?,
                "batch" => c.batch_size = value(k, v)?,
                "seed" => c.seed = value(k, v)?,
                "freeze_warp" => c.freeze_warp = value(k, v)?,
                "checkpoint_every" => c.checkpoint_every = value(k, v)?,
                "feature_seed" => c.feature_seed = value(k, v)?,
                "feature_weights" => c.feature_weights = opt_path(v),
                "pretrained_warp" => c.pretrained_warp = opt_path(v),
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        if let Some(n) = frames {
            if n != c.variant.frames() {
                return Err(Error::Config(format!("frames = {n} contradicts variant {}", c.variant)));
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        [
            format!("profile = {}", self.profile),
            format!("variant = {}", self.variant),
            format!("frames = {}", self.variant.frames()),
            format!("features = {}", opt_text(&self.features)),
            format!("loss = {}", self.loss),
            format!("lambda = {}", self.lambda),
            format!("lambda_pool3 = {}", opt_text(&self.lambda_pool3)),
            format!("lambda_pool4 = {}", opt_text(&self.lambda_pool4)),
            format!("lambda_fc7 = {}", opt_text(&self.lambda_fc7)),
            format!("lr = {}", self.lr),
            format!("epochs = {}", self.epochs),
            format!("batch = {}", self.batch_size),
            format!("seed = {}", self.seed),
            format!("freeze_warp = {}", self.freeze_warp),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("feature_seed = {}", self.feature_seed),
            format!("feature_weights = {}", path(&self.feature_weights)),
            format!("pretrained_warp = {}", path(&self.pretrained_warp)),
        ]
        .join("\n")
            + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        self.arch()?;
        self.loss_weights_checked()?;
        Ok(())
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        let mut a = ArchConfig::by_name(&self.profile)?;
        if let Some(d) = self.features {
            a.feature_channels = d;
        }
        a.validate()?;
        Ok(a)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    fn loss_weights_checked(&self) -> Result<LossWeights> {
        let mut w = LossWeights::preset(self.loss, self.lambda);
        for (tap, o) in [
            (Tap::Pool3, self.lambda_pool3),
            (Tap::Pool4, self.lambda_pool4),
            (Tap::Fc7, self.lambda_fc7),
        ] {
            if let Some(l) = o {
                if !self.loss.taps().contains(&tap) {
                    return Err(Error::Config(format!("lambda_{tap} is set but loss {} does not use {tap}", self.loss)));
                }
                w.set(tap, l);
            }
        }
        w.validate()?;
        Ok(w)
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.loss_weights_checked().expect("validated at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let c = RunConfig {
            variant: "f5warp".parse().unwrap(),
            features: Some(6),
            lambda_pool4: Some(5.0),
            pretrained_warp: Some("w.ckpt".into()),
            ..RunConfig::default()
        };
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse(&text).unwrap().to_text(), text);
    }

    #[test]
    fn comments_blank_lines_and_defaults() {
        let c = RunConfig::parse("# run\n\nvariant = f5\n  epochs=3 \n").unwrap();
        assert_eq!(c.variant.frames(), 5);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.batch_size, 10);
        assert_eq!(c.loss_weights(), LossWeights::preset(LossMode::PixelPool3Pool4, 1e3));
    }

    #[test]
    fn bad_configs_are_rejected() {
        for bad in [
            "variant = f4",
            "epochs = -1",
            "colour = red",
            "seed = 1\nseed = 2",
            "variant = f5\nframes = 25",
            "batch = 0",
            "loss = pixel\nlambda_fc7 = 3",
            "lambda = -1",
            "profile = huge",
            "just words",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad:?} was accepted");
        }
    }
}
