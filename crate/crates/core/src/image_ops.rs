//! RGB images as `3×H×W` tensors in [0, 1]: blur, area downsampling,
//! the degradation protocol, and PNG I/O.

use std::path::Path;

use image::{ColorType, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Image = Tensor<f32>;

/// Output size, input size and blur of the training-input degradation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub hr_size: usize,
    pub lr_size: usize,
    pub blur_sigma: f64,
    pub apply_blur: bool,
}

impl DegradationSpec {
    /// 128 → 16 with σ = 2.4.
    pub fn full() -> Self {
        Self {
            hr_size: 128,
            lr_size: 16,
            blur_sigma: 2.4,
            apply_blur: true,
        }
    }

    /// 32 → 8, blur scaled with the magnification so it spans the same
    /// fraction of a low-resolution pixel.
    pub fn tiny() -> Self {
        Self {
            hr_size: 32,
            lr_size: 8,
            blur_sigma: 1.2,
            apply_blur: true,
        }
    }

    pub fn factor(&self) -> usize {
        self.hr_size / self.lr_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_size == 0 || self.hr_size % self.lr_size != 0 {
            return Err(Error::Config(format!(
                "output size {} is not a multiple of input size {}",
                self.hr_size, self.lr_size
            )));
        }
        if self.apply_blur && !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Config(format!("blur sigma must be positive, got {}", self.blur_sigma)));
        }
        Ok(())
    }
}

pub fn check_image(img: &Image) -> Result<(usize, usize)> {
    match *img.shape() {
        [3, h, w] if h > 0 && w > 0 => Ok((h, w)),
        ref s => Err(Error::Data(format!("expected a 3×H×W image, got shape {s:?}"))),
    }
}

/// Normalized samples of `exp(−d²/2σ²)` for `d ∈ [−r, r]`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / z).collect())
}

/// Mirror index without repeating the edge sample: −1 → 1, n → n−2.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    let (h, w) = check_image(img)?;
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as i64;
    let mut out = Vec::with_capacity(img.numel());
    let mut rows = vec![0.0f64; h * w];
    for plane in img.data().chunks_exact(h * w) {
        for y in 0..h {
            for x in 0..w {
                rows[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * f64::from(plane[y * w + reflect(x as i64 + j as i64 - r, w)]))
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * rows[reflect(y as i64 + j as i64 - r, h) * w + x])
                    .sum();
                out.push((v as f32).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Tensor::new(img.shape(), out)?)
}

/// Mean over non-overlapping `factor × factor` blocks.
pub fn area_downsample(img: &Image, factor: usize) -> Result<Image> {
    let (h, w) = check_image(img)?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Data(format!("{h}×{w} image is not divisible into {factor}×{factor} blocks")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Vec::with_capacity(3 * oh * ow);
    for plane in img.data().chunks_exact(h * w) {
        for by in 0..oh {
            for bx in 0..ow {
                let mut s = 0.0f64;
                for y in by * factor..(by + 1) * factor {
                    s += plane[y * w + bx * factor..y * w + (bx + 1) * factor]
                        .iter()
                        .map(|&v| f64::from(v))
                        .sum::<f64>();
                }
                out.push(((s * inv) as f32).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Tensor::new(&[3, oh, ow], out)?)
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        A * (((t - 5.0) * t + 8.0) * t - 4.0)
    } else {
        0.0
    }
}

/// Cubic-convolution (a = −0.5) upsampling by an integer factor with
/// replicated borders, used as the bicubic baseline.
pub fn bicubic_upsample(img: &Image, factor: usize) -> Result<Image> {
    let (h, w) = check_image(img)?;
    if factor == 0 {
        return Err(Error::Data("upsampling factor must be positive".into()));
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<[(usize, f64); 4]> {
        (0..n_out)
            .map(|o| {
                let u = (o as f64 + 0.5) / factor as f64 - 0.5;
                let base = u.floor();
                std::array::from_fn(|k| {
                    let i = base as i64 - 1 + k as i64;
                    (i.clamp(0, n_in as i64 - 1) as usize, cubic_weight(u - i as f64))
                })
            })
            .collect()
    };
    let (oh, ow) = (h * factor, w * factor);
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut out = Vec::with_capacity(3 * oh * ow);
    for plane in img.data().chunks_exact(h * w) {
        for row in &ty {
            for col in &tx {
                let v: f64 = row
                    .iter()
                    .map(|&(y, wy)| wy * col.iter().map(|&(x, wx)| wx * f64::from(plane[y * w + x])).sum::<f64>())
                    .sum();
                out.push((v as f32).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Tensor::new(&[3, oh, ow], out)?)
}

/// Optional blur, then area downsampling to the input resolution.
pub fn degrade(hr: &Image, spec: &DegradationSpec) -> Result<Image> {
    spec.validate()?;
    let (h, w) = check_image(hr)?;
    if h != spec.hr_size || w != spec.hr_size {
        return Err(Error::Data(format!(
            "expected a {0}×{0} image, got {h}×{w}",
            spec.hr_size
        )));
    }
    if spec.apply_blur {
        area_downsample(&gaussian_blur(hr, spec.blur_sigma)?, spec.factor())
    } else {
        area_downsample(hr, spec.factor())
    }
}

pub fn load_image(path: &Path) -> Result<Image> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let decoded = reader.with_guessed_format().map_err(|e| Error::io(path, e))?.decode().map_err(|e| {
        Error::Image {
            path: path.to_owned(),
            reason: e.to_string(),
        }
    })?;
    match decoded.color() {
        ColorType::Rgb8 | ColorType::Rgb16 => {}
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_owned(),
                reason: format!("{other:?} pixels; only RGB is supported"),
            })
        }
    }
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f32::from(px[c]) / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Writes an 8-bit RGB PNG, rounding to the nearest 1/255 step.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = check_image(img)?;
    let d = img.data();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    out.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_owned(),
            reason: other.to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(h: usize, w: usize, v: f32) -> Image {
        Tensor::full(&[3, h, w], v)
    }

    #[test]
    fn kernel_is_normalized_with_radius_three_sigma() {
        for sigma in [0.3, 1.0, 1.2, 2.4, 5.5] {
            let k = gaussian_kernel(sigma).unwrap();
            assert_eq!(k.len(), 2 * (3.0f64 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn reflection_mirrors_without_repeating_the_edge() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, [3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn blur_and_downsample_keep_constants() {
        for v in [0.0f32, 0.25, 0.7, 1.0, 0.123_456_7] {
            let img = constant(32, 24, v);
            assert_eq!(gaussian_blur(&img, 2.4).unwrap(), img);
            assert_eq!(area_downsample(&img, 8).unwrap(), constant(4, 3, v));
        }
    }

    #[test]
    fn bicubic_keeps_constants_and_interior_ramps() {
        let c = constant(4, 5, 0.375);
        assert_eq!(bicubic_upsample(&c, 4).unwrap(), constant(16, 20, 0.375));
        let ramp = Tensor::from_fn(&[3, 8, 8], |i| 0.1 * (i % 8) as f32 / 8.0 + 0.2);
        let up = bicubic_upsample(&ramp, 2).unwrap();
        for x in 4..12 {
            let expected = 0.2 + 0.1 * ((x as f64 + 0.5) / 2.0 - 0.5) / 8.0;
            assert!((f64::from(up.data()[5 * 16 + x]) - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn degrade_produces_the_low_resolution_shape() {
        let img = constant(128, 128, 0.5);
        let lr = degrade(&img, &DegradationSpec::full()).unwrap();
        assert_eq!(lr, constant(16, 16, 0.5));
        assert!(degrade(&constant(64, 64, 0.5), &DegradationSpec::full()).is_err());
    }

    proptest! {
        #[test]
        fn degrade_commutes_with_block_shifts(seed in 0u64..1000, bx in 0usize..3, by in 0usize..3) {
            let spec = DegradationSpec { hr_size: 32, lr_size: 8, blur_sigma: 1.0, apply_blur: false };
            let img = Tensor::from_fn(&[3, 32, 32], |i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 999.0);
            let (sx, sy) = (4 * bx, 4 * by);
            let shifted = Tensor::from_fn(&[3, 32, 32], |i| {
                let (c, y, x) = (i / 1024, (i / 32) % 32, i % 32);
                img.data()[c * 1024 + ((y + sy) % 32) * 32 + (x + sx) % 32]
            });
            let a = degrade(&img, &spec).unwrap();
            let b = degrade(&shifted, &spec).unwrap();
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        prop_assert_eq!(b.data()[c * 64 + y * 8 + x], a.data()[c * 64 + ((y + by) % 8) * 8 + (x + bx) % 8]);
                    }
                }
            }
            prop_assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn png_round_trip_within_half_a_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Tensor::from_fn(&[3, 16, 12], |i| ((i * 37) % 101) as f32 / 100.0);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), &[3, 16, 12]);
        assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-7);
    }

    #[test]
    fn grayscale_and_missing_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let gray = dir.path().join("g.png");
        image::GrayImage::new(4, 4).save(&gray).unwrap();
        assert!(matches!(load_image(&gray), Err(Error::UnsupportedImage { .. })));
        assert!(matches!(load_image(&dir.path().join("none.png")), Err(Error::Io { .. })));
    }
}
