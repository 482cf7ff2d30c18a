//! Image-quality and verification metrics, and the per-variant report.

use rayon::prelude::*;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::image_ops::{self, Image};
use crate::model::SrModel;
use crate::perceptual::{FeatureNetwork, Tap};
use crate::synth::Sample;
use crate::tensor::Tensor;

/// Returned by [`psnr_luma`] for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// PSNR of the luma channels of two `3×H×W` images in [0, 1], capped at
/// [`PSNR_CAP_DB`].
pub fn psnr_luma<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 3 || a.shape()[0] != 3 {
        return Err(Error::Data(format!(
            "PSNR needs two 3×H×W images of one shape, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.numel() / 3;
    if n == 0 {
        return Err(Error::Data("PSNR of an empty image".into()));
    }
    let (da, db) = (a.data(), b.data());
    let mut sse = 0.0;
    for i in 0..n {
        let d: f64 = (0..3).map(|c| LUMA[c] * (da[c * n + i].to_f64() - db[c * n + i].to_f64())).sum();
        sse += d * d;
    }
    let mse = sse / n as f64;
    if !mse.is_finite() {
        return Err(Error::Data("PSNR of non-finite images".into()));
    }
    Ok(if mse == 0.0 { PSNR_CAP_DB } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB) })
}

/// Error rate where false-positive and false-negative rates meet, for
/// `(similarity, same_identity)` pairs accepted when similarity ≥ threshold.
///
/// Thresholds run over the distinct scores and +∞. At an exact crossing
/// the lowest such error is returned; otherwise the rates are linearly
/// interpolated between the two thresholds that straddle it.
pub fn eer(pairs: &[(f64, bool)]) -> Result<f64> {
    if pairs.iter().any(|p| !p.0.is_finite()) {
        return Err(Error::Data("similarity scores must be finite".into()));
    }
    let positives = pairs.iter().filter(|p| p.1).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Data("EER needs both matching and non-matching pairs".into()));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Rates at threshold = sorted[i].0, sweeping upward; start accepts all.
    let (p, n) = (positives as f64, negatives as f64);
    let mut rejected_pos = 0usize;
    let mut rejected_neg = 0usize;
    let mut prev: Option<(f64, f64)> = None;
    let mut i = 0;
    loop {
        let fpr = (negatives - rejected_neg) as f64 / n;
        let fnr = rejected_pos as f64 / p;
        let d = fpr - fnr;
        if d == 0.0 {
            // FNR only grows and FPR only shrinks, so later exact crossings repeat this value.
            return Ok(fpr);
        }
        if d < 0.0 {
            let (pf, pn) = prev.expect("the first threshold accepts everything");
            let pd = pf - pn;
            let t = pd / (pd - d);
            return Ok(pf + t * (fpr - pf));
        }
        prev = Some((fpr, fnr));
        if i == sorted.len() {
            unreachable!("rates at +∞ are FPR 0, FNR 1");
        }
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                rejected_pos += 1;
            } else {
                rejected_neg += 1;
            }
            i += 1;
        }
    }
}

/// `100·(1 − EER)`, the reporting convention.
pub fn eer_score_pct(e: f64) -> f64 {
    100.0 * (1.0 - e)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-norm `fc7` descriptor of an image.
pub fn descriptor(net: &FeatureNetwork<f32>, img: &Image) -> Result<Vec<f64>> {
    let f = net.features(img, Tap::Fc7)?;
    let v: Vec<f64> = f.data().iter().map(|&x| f64::from(x)).collect();
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::Data("image has an all-zero descriptor".into()));
    }
    Ok(unit(&v))
}

/// Mean cosine similarity over all pairs of (unit) descriptors.
pub fn mean_pairwise_similarity(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("track similarity needs two non-empty tracks".into()));
    }
    let total: f64 = a.iter().map(|x| b.iter().map(|y| dot(x, y)).sum::<f64>()).sum();
    Ok(total / (a.len() * b.len()) as f64)
}

/// Mean descriptor similarity of two tracks, using at most `cap` leading
/// frames of each.
pub fn track_similarity(a: &[Image], b: &[Image], net: &FeatureNetwork<f32>, cap: usize) -> Result<f64> {
    let describe = |t: &[Image]| -> Result<Vec<Vec<f64>>> {
        t.par_iter().take(cap).map(|img| descriptor(net, img)).collect()
    };
    mean_pairwise_similarity(&describe(a)?, &describe(b)?)
}

/// Euclidean distance between the unit-normalized `tap` features of two
/// images; an all-zero feature vector stays at the origin.
pub fn feature_l2(a: &Image, b: &Image, net: &FeatureNetwork<f32>, tap: Tap) -> Result<f64> {
    let fa = net.features(a, tap)?;
    let fb = net.features(b, tap)?;
    Ok(unit_l2(fa.data(), fb.data()))
}

pub fn unit_l2(a: &[f32], b: &[f32]) -> f64 {
    let ua = unit(&a.iter().map(|&x| f64::from(x)).collect::<Vec<_>>());
    let ub = unit(&b.iter().map(|&x| f64::from(x)).collect::<Vec<_>>());
    ua.iter().zip(&ub).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean per-pixel squared error of the model's reconstructions.
pub fn mean_mse(model: &SrModel<f32>, samples: &[Sample]) -> Result<f64> {
    let per: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let gt = s
                .seq
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sample {} has no ground truth", s.id)))?;
            let out = model.infer(&s.seq)?;
            Ok(out.data().iter().zip(gt.data()).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>() / out.numel() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// One report line; `None` prints as `n/a`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub variant: String,
    pub eer_pct: Option<f64>,
    pub psnr_db: Option<f64>,
    pub l2_pool3: Option<f64>,
    pub l2_pool4: Option<f64>,
    pub l2_fc7: Option<f64>,
}

pub fn report_csv(rows: &[EvalRow]) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"));
    let mut out = String::from("variant,eer_pct,psnr_db,l2_pool3,l2_pool4,l2_fc7\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant,
            f(r.eer_pct),
            f(r.psnr_db),
            f(r.l2_pool3),
            f(r.l2_pool4),
            f(r.l2_fc7)
        ));
    }
    out
}

/// Verification pairs between every probe `i` and every gallery image
/// `j ≠ i`, labelled by identity.
pub fn verification_pairs(probes: &[Vec<f64>], gallery: &[Vec<f64>], identities: &[u64]) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for (i, p) in probes.iter().enumerate() {
        for (j, g) in gallery.iter().enumerate() {
            if i != j {
                out.push((dot(p, g), identities[i] == identities[j]));
            }
        }
    }
    out
}

fn gt_of(s: &Sample) -> Result<&Image> {
    s.seq
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::Data(format!("sample {} has no ground truth", s.id)))
}

fn eer_of(probes: &[Image], samples: &[Sample], net: &FeatureNetwork<f32>) -> Result<Option<f64>> {
    let ids: Vec<u64> = samples.iter().map(|s| s.identity).collect();
    let mut sorted = ids.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() == ids.len() || sorted.len() < 2 {
        return Ok(None);
    }
    let probe_d: Vec<Vec<f64>> = probes.par_iter().map(|p| descriptor(net, p)).collect::<Result<_>>()?;
    let gallery_d: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| descriptor(net, gt_of(s)?))
        .collect::<Result<_>>()?;
    Ok(Some(eer_score_pct(eer(&verification_pairs(&probe_d, &gallery_d, &ids))?)))
}

/// Full metric row for reconstructions `outputs` of `samples`. The EER
/// column is `n/a` when the samples do not contain repeated identities.
pub fn metrics_row(name: &str, outputs: &[Image], samples: &[Sample], net: &FeatureNetwork<f32>) -> Result<EvalRow> {
    if outputs.len() != samples.len() || samples.is_empty() {
        return Err(Error::Data(format!("{} outputs for {} samples", outputs.len(), samples.len())));
    }
    let n = samples.len() as f64;
    let mut psnr = 0.0;
    let mut l2 = [0.0; 3];
    for (o, s) in outputs.iter().zip(samples) {
        let gt = gt_of(s)?;
        psnr += psnr_luma(o, gt)?;
        for (acc, tap) in l2.iter_mut().zip(Tap::ALL) {
            *acc += feature_l2(o, gt, net, tap)?;
        }
    }
    Ok(EvalRow {
        variant: name.into(),
        eer_pct: eer_of(outputs, samples, net)?,
        psnr_db: Some(psnr / n),
        l2_pool3: Some(l2[0] / n),
        l2_pool4: Some(l2[1] / n),
        l2_fc7: Some(l2[2] / n),
    })
}

pub fn evaluate_model(model: &SrModel<f32>, samples: &[Sample], net: &FeatureNetwork<f32>) -> Result<EvalRow> {
    let outputs: Vec<Image> = samples
        .par_iter()
        .map(|s| model.infer(&s.seq).map_err(Error::from))
        .collect::<Result<_>>()?;
    metrics_row(&model.variant.to_string(), &outputs, samples, net)
}

/// Reference rows: ground truth as the probe (verification only; the other
/// columns are trivially perfect) and bicubic upsampling of the central
/// input frame (all columns).
pub fn baseline_rows(samples: &[Sample], net: &FeatureNetwork<f32>) -> Result<Vec<EvalRow>> {
    let gts: Vec<Image> = samples.iter().map(|s| gt_of(s).cloned()).collect::<Result<_>>()?;
    let bicubic: Vec<Image> = samples
        .iter()
        .map(|s| {
            let size = gt_of(s)?.shape()[1];
            let lr = s.seq.central();
            image_ops::bicubic_upsample(lr, size / lr.shape()[1])
        })
        .collect::<Result<_>>()?;
    let gt_row = EvalRow {
        variant: "gt".into(),
        eer_pct: eer_of(&gts, samples, net)?,
        psnr_db: None,
        l2_pool3: None,
        l2_pool4: None,
        l2_fc7: None,
    };
    Ok(vec![gt_row, metrics_row("bicubic", &bicubic, samples, net)?])
}
