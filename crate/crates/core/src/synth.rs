//! Procedural face-like images, synthetic frame sequences with known TPS
//! motion, and the on-disk dataset layout.
//!
//! Dataset directory: `manifest.tsv` with one line per sample (id, the n
//! low-resolution PNG paths, the high-resolution PNG path, the motion blob
//! path), `identities.tsv` (id, identity), and the referenced files. Paths
//! are relative to the directory. A motion blob is an `n × 2C` tensor of
//! the control-point shifts that generated each frame.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image_ops::{self, degrade, DegradationSpec, Image};
use crate::model::FrameSequence;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tps::{self, ControlGrid, TpsSystem, WarpBasis};

/// Largest total displacement (normalized units) a generated control point may have.
pub const MOTION_LIMIT: f64 = 0.3;

pub const MANIFEST: &str = "manifest.tsv";
pub const IDENTITIES: &str = "identities.tsv";

/// Generator for a deterministic stream, one per (seed, stream) pair.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-frame motion: a global translation plus independent jitter of
/// every control point, both uniform in ± their bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionSpec {
    pub max_translation: f64,
    pub max_jitter: f64,
}

impl MotionSpec {
    pub fn still() -> Self {
        Self {
            max_translation: 0.0,
            max_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.max_translation + self.max_jitter;
        if !(self.max_translation >= 0.0 && self.max_jitter >= 0.0) || !(total <= MOTION_LIMIT) {
            return Err(Error::Config(format!(
                "motion bounds {} + {} exceed the limit {MOTION_LIMIT}",
                self.max_translation, self.max_jitter
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng, control_points: usize) -> Vec<f32> {
        let t = |rng: &mut ChaCha8Rng, b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
        let (tx, ty) = (t(rng, self.max_translation), t(rng, self.max_translation));
        let mut out = Vec::with_capacity(2 * control_points);
        out.extend((0..control_points).map(|_| (tx + t(rng, self.max_jitter)) as f32));
        out.extend((0..control_points).map(|_| (ty + t(rng, self.max_jitter)) as f32));
        out
    }
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            max_translation: 0.2,
            max_jitter: 0.04,
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    /// Approximate signed distance, negative inside.
    fn distance(&self, x: f64, y: f64) -> f64 {
        let (u, v) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        ((u * u + v * v).sqrt() - 1.0) * self.rx.min(self.ry)
    }
}

#[derive(Clone, Copy)]
struct Rgb([f64; 3]);

impl Rgb {
    fn random(rng: &mut ChaCha8Rng, lo: [f64; 3], hi: [f64; 3]) -> Self {
        Rgb(std::array::from_fn(|c| rng.random_range(lo[c]..=hi[c])))
    }

    fn mix(self, other: Rgb, t: f64) -> Rgb {
        Rgb(std::array::from_fn(|c| self.0[c] + (other.0[c] - self.0[c]) * t))
    }
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

/// Geometry, colours and texture of one synthetic person.
struct Face {
    bg_a: Rgb,
    bg_b: Rgb,
    bg_dir: f64,
    head: Ellipse,
    skin: Rgb,
    hair: Ellipse,
    hair_color: Rgb,
    eyes: [Ellipse; 2],
    iris: f64,
    iris_color: Rgb,
    brow_lift: f64,
    nose: Ellipse,
    mouth: Ellipse,
    lip: Rgb,
    texture: Vec<Wave>,
    spots: Vec<(f64, f64, f64)>,
}

impl Face {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let cx = rng.random_range(-0.05..0.05);
        let cy = rng.random_range(0.0..0.1);
        let rx = rng.random_range(0.52..0.68);
        let ry = rng.random_range(0.68..0.85);
        let eye_y = cy - rng.random_range(0.15..0.28) * ry;
        let eye_dx = rng.random_range(0.3..0.42) * rx;
        let eye_r = rng.random_range(0.08..0.12);
        let eye = |sx: f64| Ellipse {
            cx: cx + sx * eye_dx,
            cy: eye_y,
            rx: eye_r * 1.4,
            ry: eye_r,
        };
        Face {
            bg_a: Rgb::random(rng, [0.0; 3], [1.0; 3]),
            bg_b: Rgb::random(rng, [0.0; 3], [1.0; 3]),
            bg_dir: rng.random_range(0.0..std::f64::consts::TAU),
            head: Ellipse { cx, cy, rx, ry },
            skin: Rgb([0.92, 0.76, 0.64]).mix(Rgb([0.36, 0.24, 0.16]), rng.random_range(0.0..1.0)),
            hair: Ellipse {
                cx,
                cy: cy - rng.random_range(0.7..0.85) * ry,
                rx: rx * rng.random_range(1.02..1.12),
                ry: ry * rng.random_range(0.35..0.5),
            },
            hair_color: Rgb::random(rng, [0.02, 0.02, 0.02], [0.6, 0.45, 0.3]),
            eyes: [eye(-1.0), eye(1.0)],
            iris: rng.random_range(0.45..0.7),
            iris_color: Rgb::random(rng, [0.05, 0.05, 0.05], [0.4, 0.5, 0.6]),
            brow_lift: rng.random_range(0.6..1.0),
            nose: Ellipse {
                cx,
                cy: cy + rng.random_range(0.05..0.15) * ry,
                rx: rng.random_range(0.05..0.09),
                ry: rng.random_range(0.12..0.2),
            },
            mouth: Ellipse {
                cx,
                cy: cy + rng.random_range(0.42..0.55) * ry,
                rx: rng.random_range(0.15..0.28) * rx,
                ry: rng.random_range(0.04..0.08),
            },
            lip: Rgb::random(rng, [0.5, 0.1, 0.1], [0.85, 0.4, 0.4]),
            texture: (0..4)
                .map(|_| Wave {
                    kx: rng.random_range(-25.0..25.0),
                    ky: rng.random_range(-25.0..25.0),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amp: rng.random_range(0.01..0.04),
                })
                .collect(),
            spots: (0..rng.random_range(3..9))
                .map(|_| {
                    (
                        cx + rng.random_range(-0.7..0.7) * rx,
                        cy + rng.random_range(-0.2..0.7) * ry,
                        rng.random_range(0.015..0.04),
                    )
                })
                .collect(),
        }
    }

    fn shade(&self, x: f64, y: f64, px: f64, light: f64, smile: f64) -> Rgb {
        let cover = |d: f64| (0.5 - d / px).clamp(0.0, 1.0);
        let g = 0.5 + 0.5 * (x * self.bg_dir.cos() + y * self.bg_dir.sin()) / std::f64::consts::SQRT_2;
        let mut c = self.bg_a.mix(self.bg_b, g);
        c = c.mix(self.hair_color, cover(self.hair.distance(x, y)));
        let detail: f64 = self
            .texture
            .iter()
            .map(|w| w.amp * (w.kx * x + w.ky * y + w.phase).sin())
            .sum();
        let mut skin = Rgb(self.skin.0.map(|v| v + detail));
        for &(sx, sy, r) in &self.spots {
            let d = ((x - sx).powi(2) + (y - sy).powi(2)).sqrt() - r;
            skin = skin.mix(Rgb(self.skin.0.map(|v| v * 0.7)), cover(d));
        }
        skin = skin.mix(Rgb(self.skin.0.map(|v| v * 0.75)), 0.6 * cover(self.nose.distance(x, y)));
        let mouth = Ellipse {
            ry: self.mouth.ry * smile,
            ..self.mouth
        };
        skin = skin.mix(self.lip, cover(mouth.distance(x, y)));
        for e in &self.eyes {
            skin = skin.mix(Rgb([0.95, 0.95, 0.92]), cover(e.distance(x, y)));
            let iris = Ellipse {
                rx: e.ry * self.iris,
                ry: e.ry * self.iris,
                ..*e
            };
            skin = skin.mix(self.iris_color, cover(iris.distance(x, y)));
            let brow = Ellipse {
                cy: e.cy - e.ry * (1.4 + self.brow_lift),
                ry: e.ry * 0.3,
                rx: e.rx * 1.1,
                ..*e
            };
            skin = skin.mix(self.hair_color, cover(brow.distance(x, y)));
        }
        skin = skin.mix(self.hair_color, cover(self.hair.distance(x, y)));
        c = c.mix(skin, cover(self.head.distance(x, y)));
        Rgb(c.0.map(|v| (v * light).clamp(0.0, 1.0)))
    }
}

/// Face-like image of `identity`; `variation` changes lighting and mouth
/// shape but not the person.
pub fn render_face(identity: u64, variation: u64, size: usize) -> Image {
    let face = Face::random(&mut rng_for(identity, 0));
    let mut vr = rng_for(identity, variation.wrapping_add(1));
    let light = vr.random_range(0.9..1.05);
    let smile = vr.random_range(0.7..1.4);
    let px = 2.0 / size as f64;
    let mut data = vec![0.0f32; 3 * size * size];
    for i in 0..size {
        for j in 0..size {
            let c = face.shade(tps::pixel_center(j, size), tps::pixel_center(i, size), px, light, smile);
            for (k, v) in c.0.into_iter().enumerate() {
                data[k * size * size + i * size + j] = v as f32;
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("image shape")
}

/// Warps high-resolution images with TPS motion and degrades them.
pub struct Synthesizer {
    pub degradation: DegradationSpec,
    pub motion: MotionSpec,
    pub frames: usize,
    basis: WarpBasis<f32>,
}

impl Synthesizer {
    pub fn new(degradation: DegradationSpec, motion: MotionSpec, frames: usize) -> Result<Self> {
        degradation.validate()?;
        motion.validate()?;
        if frames % 2 == 0 {
            return Err(Error::Config(format!("sequence length must be odd, got {frames}")));
        }
        let system = TpsSystem::new(ControlGrid::default())?;
        let n = degradation.hr_size;
        Ok(Self {
            degradation,
            motion,
            frames,
            basis: WarpBasis::for_grid(&system, n, n),
        })
    }

    pub fn control_points(&self) -> usize {
        self.basis.control_points()
    }

    /// `img` resampled at the TPS field of `shifts`, clamped to [0, 1].
    pub fn warp(&self, img: &Image, shifts: &[f32]) -> Result<Image> {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(&[shifts.len()], shifts.to_vec())?);
        let field = tps::tps_grid(&mut tape, s, &self.basis)?;
        let x = tape.constant_ref(img);
        let y = tps::grid_sample(&mut tape, x, field)?;
        let mut out = tape.value(y).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(out)
    }

    /// Frames of `base` under random motion (central frame unmoved), the
    /// central frame as ground truth, and the `n × 2C` generating shifts.
    pub fn sequence(&self, base: &Image, seed: u64) -> Result<(FrameSequence<f32>, Tensor<f32>)> {
        let n = self.degradation.hr_size;
        if base.shape() != [3, n, n] {
            return Err(Error::Data(format!("base image must be 3×{n}×{n}, got {:?}", base.shape())));
        }
        let c = self.control_points();
        let k = self.frames / 2;
        let mut rng = rng_for(seed, 1);
        let mut shifts = Vec::with_capacity(self.frames * 2 * c);
        let mut lr = Vec::with_capacity(self.frames);
        for i in 0..self.frames {
            let s = if i == k { vec![0.0; 2 * c] } else { self.motion.sample(&mut rng, c) };
            let hr = if i == k { base.clone() } else { self.warp(base, &s)? };
            lr.push(degrade(&hr, &self.degradation)?);
            shifts.extend(s);
        }
        let seq = FrameSequence::new(lr, Some(base.clone()))?;
        Ok((seq, Tensor::new(&[self.frames, 2 * c], shifts)?))
    }
}

/// One-shot form of [`Synthesizer::sequence`].
pub fn synth_sequence(
    base: &Image,
    motion: MotionSpec,
    frames: usize,
    spec: DegradationSpec,
    seed: u64,
) -> Result<(FrameSequence<f32>, Tensor<f32>)> {
    Synthesizer::new(spec, motion, frames)?.sequence(base, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub identity: u64,
    pub seq: FrameSequence<f32>,
    /// `n × 2C` generating shifts.
    pub motion: Tensor<f32>,
}

impl Sample {
    /// The `frames` frames centred on the central one, with their motion rows.
    pub fn window(&self, frames: usize) -> Result<Sample> {
        let n = self.seq.len();
        if frames % 2 == 0 || frames > n {
            return Err(Error::Data(format!("cannot take {frames} central frames of sample {} with {n}", self.id)));
        }
        let lo = (n - frames) / 2;
        let cols = self.motion.shape().get(1).copied().unwrap_or(0);
        let motion = Tensor::new(&[frames, cols], self.motion.data()[lo * cols..(lo + frames) * cols].to_vec())?;
        Ok(Sample {
            id: self.id.clone(),
            identity: self.identity,
            seq: FrameSequence::new(self.seq.frames[lo..lo + frames].to_vec(), self.seq.ground_truth.clone())?,
            motion,
        })
    }
}

/// Every sample narrowed to `frames` central frames.
pub fn central_windows(samples: &[Sample], frames: usize) -> Result<Vec<Sample>> {
    samples.iter().map(|s| s.window(frames)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub samples: usize,
    pub frames: usize,
    pub seed: u64,
    pub degradation: DegradationSpec,
    pub motion: MotionSpec,
    pub samples_per_identity: usize,
}

impl SynthConfig {
    pub fn tiny(samples: usize, frames: usize, seed: u64) -> Self {
        Self {
            samples,
            frames,
            seed,
            degradation: DegradationSpec::tiny(),
            motion: MotionSpec::default(),
            samples_per_identity: 2,
        }
    }
}

/// Independent per-sample streams, so the result does not depend on the
/// thread count.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    if cfg.samples_per_identity == 0 {
        return Err(Error::Config("samples_per_identity must be ≥ 1".into()));
    }
    let synth = Synthesizer::new(cfg.degradation, cfg.motion, cfg.frames)?;
    (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let identity = cfg.seed.wrapping_mul(1_000_003).wrapping_add((i / cfg.samples_per_identity) as u64);
            let base = render_face(identity, i as u64, cfg.degradation.hr_size);
            let (seq, motion) = synth.sequence(&base, cfg.seed ^ ((i as u64) << 20))?;
            Ok(Sample {
                id: format!("s{i:05}"),
                identity: (i / cfg.samples_per_identity) as u64,
                seq,
                motion,
            })
        })
        .collect()
}

pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut identities = String::new();
    for s in samples {
        let gt = s
            .seq
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample {} has no ground truth", s.id)))?;
        let mut cols = vec![s.id.clone()];
        for (j, f) in s.seq.frames.iter().enumerate() {
            let name = format!("{}_lr{j}.png", s.id);
            image_ops::save_image(f, &dir.join(&name))?;
            cols.push(name);
        }
        let hr = format!("{}_hr.png", s.id);
        image_ops::save_image(gt, &dir.join(&hr))?;
        let warp = format!("{}_motion.bin", s.id);
        fs::write(dir.join(&warp), s.motion.to_bytes()).map_err(|e| Error::io(dir.join(&warp), e))?;
        cols.extend([hr, warp]);
        manifest.push_str(&cols.join("\t"));
        manifest.push('\n');
        identities.push_str(&format!("{}\t{}\n", s.id, s.identity));
    }
    fs::write(dir.join(MANIFEST), manifest).map_err(|e| Error::io(dir.join(MANIFEST), e))?;
    fs::write(dir.join(IDENTITIES), identities).map_err(|e| Error::io(dir.join(IDENTITIES), e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads a dataset directory; identities default to one per sample when
/// the sidecar file is absent.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = read_text(&dir.join(MANIFEST))?;
    let id_path = dir.join(IDENTITIES);
    let identities: Vec<(String, u64)> = if id_path.exists() {
        read_text(&id_path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (id, n) = l
                    .split_once('\t')
                    .ok_or_else(|| Error::Data(format!("bad identities line {l:?}")))?;
                let n = n.trim().parse().map_err(|_| Error::Data(format!("bad identity in {l:?}")))?;
                Ok((id.to_owned(), n))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut samples = Vec::new();
    for (line_no, line) in manifest.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(Error::Data(format!("{MANIFEST} line {}: too few columns", line_no + 1)));
        }
        let path = |c: &str| -> PathBuf { dir.join(c) };
        let frames = cols[1..cols.len() - 2]
            .iter()
            .map(|c| image_ops::load_image(&path(c)))
            .collect::<Result<Vec<_>>>()?;
        let gt = image_ops::load_image(&path(cols[cols.len() - 2]))?;
        let warp_path = path(cols[cols.len() - 1]);
        let bytes = fs::read(&warp_path).map_err(|e| Error::io(&warp_path, e))?;
        let motion = Tensor::from_bytes(&bytes)?;
        let id = cols[0].to_owned();
        let identity = match identities.iter().find(|(i, _)| *i == id) {
            Some(&(_, n)) => n,
            None if identities.is_empty() => samples.len() as u64,
            None => return Err(Error::Data(format!("no identity listed for sample {id}"))),
        };
        if motion.shape().first() != Some(&frames.len()) {
            return Err(Error::Data(format!("motion blob of {id} does not match its frame count")));
        }
        samples.push(Sample {
            id,
            identity,
            seq: FrameSequence::new(frames, Some(gt))?,
            motion,
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", dir.join(MANIFEST).display())));
    }
    Ok(samples)
}
