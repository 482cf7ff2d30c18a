//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! before asserting, so `cargo test --test acceptance -- --nocapture`
//! doubles as a report.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use wsr_core::checkpoint::Checkpoint;
use wsr_core::evaluation::{eer, feature_l2, mean_mse, psnr_luma, LUMA};
use wsr_core::image_ops::{area_downsample, degrade, gaussian_blur, gaussian_kernel, DegradationSpec, Image};
use wsr_core::layers::Parameters;
use wsr_core::model::{ArchConfig, FrameSequence, ModelVariant, SrModel};
use wsr_core::perceptual::{FeatureNetwork, LossMode, Tap};
use wsr_core::run_config::RunConfig;
use wsr_core::synth::{central_windows, render_face, synth_dataset, MotionSpec, Sample, SynthConfig, Synthesizer};
use wsr_core::tps::{pixel_center, ControlGrid, TpsParams, TpsSystem, WarpBasis};
use wsr_core::training::{pretrain_new, pretrain_warp, pretraining_pairs, AdamConfig, ImagePair, PretrainConfig, Trainer, WarpAligner};
use wsr_core::{gradcheck, Tape, Tensor};

fn report(name: &str, ok: bool, detail: &str) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

#[test]
fn gradient_integrity() {
    let start = Instant::now();
    let results = gradcheck::run_suite(1, None, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    report(
        "gradient integrity",
        failed.is_empty() && secs < 120.0,
        &format!("{} ops, worst relative error {worst:.2e}, failed {failed:?}, {secs:.1}s", results.len()),
    );
}

#[test]
fn tps_correctness() {
    let system = TpsSystem::new(ControlGrid::default()).unwrap();
    let c = system.grid().len();
    let n = 32;
    let basis = WarpBasis::<f64>::for_grid(&system, n, n);
    let dev = |a: &Tensor<f64>, b: &Tensor<f64>| a.max_abs_diff(b);

    let identity = Tensor::from_fn(&[2, n, n], |i| {
        let (axis, p) = (i / (n * n), i % (n * n));
        pixel_center(if axis == 0 { p % n } else { p / n }, n)
    });
    let zero = dev(&basis.field(&TpsParams::zeros(c)).unwrap(), &identity);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let at_points = WarpBasis::<f64>::for_points(&system, system.grid().points());
    let mut interp: f64 = 0.0;
    for _ in 0..20 {
        let shifts: Vec<f64> = (0..2 * c).map(|_| rng.random_range(-0.2..=0.2)).collect();
        let field = at_points.field(&TpsParams::new(shifts.clone()).unwrap()).unwrap();
        for (j, p) in system.grid().points().iter().enumerate() {
            interp = interp.max((field.data()[j] - p[0] - shifts[j]).abs());
            interp = interp.max((field.data()[c + j] - p[1] - shifts[c + j]).abs());
        }
    }

    let mut translation: f64 = 0.0;
    for _ in 0..20 {
        let (dx, dy) = (rng.random_range(-0.2..=0.2), rng.random_range(-0.2..=0.2));
        let field = basis.field(&TpsParams::uniform(c, dx, dy)).unwrap();
        let moved = Tensor::from_fn(&[2, n, n], |i| identity.data()[i] + if i < n * n { dx } else { dy });
        translation = translation.max(dev(&field, &moved));
    }
    report(
        "TPS correctness",
        zero < 1e-6 && interp < 1e-6 && translation < 1e-6,
        &format!("identity {zero:.1e}, control-point interpolation {interp:.1e}, translation {translation:.1e}"),
    );
}

#[test]
fn architecture_fidelity() {
    let arch = ArchConfig::full();
    let model = SrModel::<f32>::new(arch.clone(), ModelVariant::warped(5).unwrap(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames: Vec<Tensor<f32>> = (0..5).map(|_| Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(0.0..1.0))).collect();
    let seq = FrameSequence::new(frames, None).unwrap();
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, &seq).unwrap();
    let d = arch.feature_channels;
    let mut problems = Vec::new();
    for &f in &trace.features {
        if tape.shape(f) != [d, 128, 128] {
            problems.push(format!("features {:?}", tape.shape(f)));
        }
    }
    if tape.shape(trace.stacked) != [5 * d, 128, 128] {
        problems.push(format!("stacked {:?}", tape.shape(trace.stacked)));
    }
    let out = tape.value(trace.output);
    if out.shape() != [3, 128, 128] || !out.data().iter().all(|&v| v > 0.0 && v < 1.0) {
        problems.push(format!("output {:?} outside (0, 1) or mis-shaped", out.shape()));
    }
    for s in trace.shifts.iter().flatten() {
        if tape.shape(*s) != [128] {
            problems.push(format!("shift vector {:?}", tape.shape(*s)));
        }
    }
    if trace.shifts.iter().flatten().count() != 4 {
        problems.push("one shift vector per adjacent frame".into());
    }
    let mut trace_channels = vec![5 * d];
    model.params.recon.visit("", &mut |name, t| {
        if name.ends_with("weight") {
            trace_channels.push(t.shape()[0]);
        }
    });
    if trace_channels != [80, 16, 32, 64, 64, 64, 32, 16, 3] {
        problems.push(format!("reconstruction channels {trace_channels:?}"));
    }
    report(
        "architecture fidelity",
        problems.is_empty(),
        &format!("D = {d}, reconstruction {trace_channels:?}, problems {problems:?}"),
    );
}

#[test]
fn zero_warp_head_matches_plain_stacking() {
    let mut mismatches = Vec::new();
    for (arch, frames) in [(ArchConfig::tiny(), 5), (ArchConfig::tiny(), 3), (ArchConfig::full(), 3)] {
        let warped = ModelVariant::warped(frames).unwrap();
        let mut params = SrModel::<f32>::new(arch.clone(), warped, 7).unwrap().params;
        // Give every other group non-default values first.
        let mut rng = ChaCha8Rng::seed_from_u64(frames as u64);
        params.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.01..0.01)));
        params.warp.head.zero();
        let with_warp = SrModel::with_params(arch.clone(), warped, params.clone()).unwrap();
        let plain = SrModel::with_params(arch.clone(), ModelVariant::stacked(frames).unwrap(), params).unwrap();
        let seq = FrameSequence::new(
            (0..frames)
                .map(|_| Tensor::from_fn(&[3, arch.lr_size, arch.lr_size], |_| rng.random_range(0.0..1.0)))
                .collect(),
            None,
        )
        .unwrap();
        if with_warp.infer(&seq).unwrap() != plain.infer(&seq).unwrap() {
            mismatches.push(format!("{}×{frames}", arch.lr_size));
        }
    }
    report(
        "identity-warp equivalence",
        mismatches.is_empty(),
        &format!("bit-identical outputs; mismatches {mismatches:?}"),
    );
}

const ORDERING_SEEDS: u64 = 5;
const ORDERING_TRAIN: usize = 256;
const ORDERING_HELD_OUT: usize = 64;
const ORDERING_EPOCHS: usize = 200;
const ORDERING_LR: f64 = 1e-3;
const ORDERING_PRETRAIN_EPOCHS: usize = 20;
const ORDERING_MARGIN: f64 = 0.05;

fn ordering_data(samples: usize, seed: u64) -> Vec<Sample> {
    // One sequence per identity: the training set should teach super-resolution, not faces.
    synth_dataset(&SynthConfig {
        samples_per_identity: 1,
        ..SynthConfig::tiny(samples, 5, seed)
    })
    .unwrap()
}

/// Held-out MSE after the standard recipe. Warp variants first pretrain
/// the predictor on the training pairs, then keep it fixed.
fn held_out_mse(variant: &str, seed: u64, train: &[Sample], test: &[Sample]) -> f64 {
    let variant: ModelVariant = variant.parse().unwrap();
    let config = RunConfig {
        variant,
        loss: LossMode::Pixel,
        lr: ORDERING_LR,
        epochs: ORDERING_EPOCHS,
        seed,
        freeze_warp: variant.uses_warp(),
        ..RunConfig::default()
    };
    let (train, test) = (central_windows(train, variant.frames()).unwrap(), central_windows(test, variant.frames()).unwrap());
    let mut trainer = Trainer::new(config).unwrap();
    if variant.uses_warp() {
        let cfg = PretrainConfig {
            epochs: ORDERING_PRETRAIN_EPOCHS,
            batch_size: 10,
            adam: AdamConfig { lr: 1e-3, ..Default::default() },
            seed,
        };
        pretrain_warp(&mut trainer.model.params.warp, &pretraining_pairs(&train), &cfg).unwrap();
    }
    trainer.train(&train, |_, _| Ok(())).unwrap();
    mean_mse(&trainer.model, &test).unwrap()
}

#[test]
fn multi_frame_alignment_beats_single_frame() {
    let start = Instant::now();
    let variants = ["f1", "f5", "f5warp"];
    let data: Vec<(Vec<Sample>, Vec<Sample>)> = (0..ORDERING_SEEDS)
        .map(|seed| {
            (
                ordering_data(ORDERING_TRAIN, seed),
                ordering_data(ORDERING_HELD_OUT, seed + 1000),
            )
        })
        .collect();
    let runs: Vec<(u64, &str)> = (0..ORDERING_SEEDS).flat_map(|s| variants.iter().map(move |&v| (s, v))).collect();
    let mse: Vec<f64> = runs
        .par_iter()
        .map(|&(seed, v)| held_out_mse(v, seed, &data[seed as usize].0, &data[seed as usize].1))
        .collect();
    let mut wins = 0;
    let mut lines = Vec::new();
    for (seed, m) in mse.chunks(3).enumerate() {
        let (f1, f5, warp) = (m[0], m[1], m[2]);
        let ok = warp <= (1.0 - ORDERING_MARGIN) * f1 && warp <= (1.0 - ORDERING_MARGIN) * f5;
        wins += usize::from(ok);
        lines.push(format!("seed {seed}: f1 {f1:.6} f5 {f5:.6} f5warp {warp:.6}{}", if ok { "" } else { " (miss)" }));
    }
    for l in &lines {
        println!("  {l}");
    }
    report(
        "multi-frame ordering",
        wins >= 4,
        &format!("{wins}/{ORDERING_SEEDS} seeds with f5warp at least 5% below f1 and f5, {:.0}s", start.elapsed().as_secs_f64()),
    );
}

/// Reference and a copy moved by `t`, both degraded; aligning the copy
/// needs shift `t`.
fn translated_pairs(count: usize, delta: f64, seed: u64) -> (Vec<ImagePair>, Vec<[f64; 2]>) {
    let spec = DegradationSpec::tiny();
    let synth = Synthesizer::new(spec, MotionSpec::still(), 3).unwrap();
    let c = synth.control_points();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    let mut truth = Vec::with_capacity(count);
    for i in 0..count {
        let base = render_face(seed.wrapping_mul(7919).wrapping_add(i as u64), 0, spec.hr_size);
        let t = [
            if rng.random_bool(0.5) { delta } else { -delta },
            if rng.random_bool(0.5) { delta } else { -delta },
        ];
        let back: Vec<f32> = (0..2 * c).map(|j| -(if j < c { t[0] } else { t[1] }) as f32).collect();
        let moved = synth.warp(&base, &back).unwrap();
        pairs.push((degrade(&base, &spec).unwrap(), degrade(&moved, &spec).unwrap()));
        truth.push(t);
    }
    (pairs, truth)
}

/// Field displacement averaged with the reference's squared luma gradient
/// as weight. Over flat regions any shift leaves the image unchanged, so
/// only textured pixels say anything about the recovered motion.
fn observable_mean_shift(basis: &WarpBasis<f64>, shifts: &[f64], reference: &Image) -> (f64, f64) {
    let (h, w) = (basis.height(), basis.width());
    let q = h * w;
    let field = basis.field(&TpsParams::new(shifts.to_vec()).unwrap()).unwrap();
    let identity = basis.identity_field();
    let luma = |y: usize, x: usize| (0..3).map(|c| LUMA[c] * f64::from(reference.data()[(c * h + y) * w + x])).sum::<f64>();
    let (mut sx, mut sy, mut total) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let gx = luma(y, (x + 1).min(w - 1)) - luma(y, x.saturating_sub(1));
            let gy = luma((y + 1).min(h - 1), x) - luma(y.saturating_sub(1), x);
            let weight = gx * gx + gy * gy;
            let i = y * w + x;
            sx += weight * (field.data()[i] - identity.data()[i]);
            sy += weight * (field.data()[q + i] - identity.data()[q + i]);
            total += weight;
        }
    }
    (sx / total, sy / total)
}

#[test]
fn warp_pretraining_recovers_translations() {
    let delta = 0.05;
    let (train, _) = translated_pairs(512, delta, 1);
    let (test, truth) = translated_pairs(128, delta, 2);
    let arch = ArchConfig::tiny();
    let cfg = PretrainConfig {
        epochs: 30,
        batch_size: 8,
        adam: AdamConfig { lr: 1e-3, ..Default::default() },
        seed: 4,
    };
    let (untrained, _) = pretrain_new(&arch, &train, &PretrainConfig { epochs: 0, ..cfg }).unwrap();
    let (predictor, _) = pretrain_new(&arch, &train, &cfg).unwrap();
    let aligner = WarpAligner::new(arch.lr_size).unwrap();
    let before = aligner.mean_loss(&untrained, &test).unwrap();
    let after = aligner.mean_loss(&predictor, &test).unwrap();
    let c = arch.control_points();
    let system = TpsSystem::new(ControlGrid::default()).unwrap();
    let basis = WarpBasis::<f64>::for_grid(&system, arch.lr_size, arch.lr_size);
    let (mut rel, mut plain_rel) = (0.0, 0.0);
    for (pair, t) in test.iter().zip(&truth) {
        let (_, _, s) = aligner.pair_loss(&predictor, pair, false).unwrap();
        let shifts: Vec<f64> = s.iter().map(|&v| f64::from(v)).collect();
        let (mx, my) = observable_mean_shift(&basis, &shifts, &pair.0);
        rel += (mx - t[0]).hypot(my - t[1]) / t[0].hypot(t[1]);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / c as f64;
        plain_rel += (mean(&shifts[..c]) - t[0]).hypot(mean(&shifts[c..]) - t[1]) / t[0].hypot(t[1]);
    }
    rel /= test.len() as f64;
    plain_rel /= test.len() as f64;
    report(
        "warp pretraining",
        rel < 0.3 && after < before,
        &format!(
            "held-out mean-shift relative error {rel:.3} (unweighted control-point mean {plain_rel:.3}), alignment loss {before:.4} -> {after:.4}"
        ),
    );
}

fn brute_force_eer(pairs: &[(f64, bool)]) -> f64 {
    let mut th: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    th.sort_by(f64::total_cmp);
    th.dedup();
    th.push(f64::INFINITY);
    let pos = pairs.iter().filter(|p| p.1).count() as f64;
    let neg = pairs.len() as f64 - pos;
    let rates = |t: f64| {
        (
            pairs.iter().filter(|p| !p.1 && p.0 >= t).count() as f64 / neg,
            pairs.iter().filter(|p| p.1 && p.0 < t).count() as f64 / pos,
        )
    };
    let exact: Vec<f64> = th.iter().map(|&t| rates(t)).filter(|r| r.0 == r.1).map(|r| r.0).collect();
    if let Some(m) = exact.into_iter().reduce(f64::min) {
        return m;
    }
    for w in th.windows(2) {
        let ((f0, n0), (f1, n1)) = (rates(w[0]), rates(w[1]));
        if f0 > n0 && f1 < n1 {
            let t = (f0 - n0) / ((f0 - n0) - (f1 - n1));
            return f0 + t * (f1 - f0);
        }
    }
    unreachable!()
}

#[test]
fn metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut eer_mismatches = 0;
    for case in 0..100 {
        let n = rng.random_range(2..=200);
        let levels = if case % 2 == 0 { 10 } else { 1 << 24 };
        let mut pairs: Vec<(f64, bool)> = (0..n).map(|_| (f64::from(rng.random_range(0..levels)), rng.random_bool(0.5))).collect();
        pairs[0].1 = true;
        pairs[1].1 = false;
        eer_mismatches += usize::from(eer(&pairs).unwrap() != brute_force_eer(&pairs));
    }
    let six = eer(&[(0.9, true), (0.8, true), (0.4, true), (0.7, false), (0.3, false), (0.2, false)]).unwrap();

    let flat = |v: f32| Tensor::<f32>::full(&[3, 8, 8], v);
    let p20 = psnr_luma(&flat(0.5), &flat(0.6)).unwrap();
    let mut red = flat(0.5);
    red.data_mut()[..64].iter_mut().for_each(|v| *v = 0.6);
    let red_diff = f64::from(0.6f32) - f64::from(0.5f32);
    let p_red = psnr_luma(&flat(0.5), &red).unwrap();
    let diff20 = f64::from(0.6f32) - f64::from(0.5f32);
    let psnr_err = (p20 + 20.0 * diff20.log10()).abs().max((p_red + 20.0 * (0.299 * red_diff).log10()).abs());

    let net = FeatureNetwork::seeded(5).unwrap();
    let img = |rng: &mut ChaCha8Rng| -> Image { Tensor::from_fn(&[3, 32, 32], |_| rng.random_range(0.0..1.0)) };
    let mut metric_violations = 0;
    for _ in 0..100 {
        let (a, b, c) = (img(&mut rng), img(&mut rng), img(&mut rng));
        let ab = feature_l2(&a, &b, &net, Tap::Fc7).unwrap();
        let bc = feature_l2(&b, &c, &net, Tap::Fc7).unwrap();
        let ac = feature_l2(&a, &c, &net, Tap::Fc7).unwrap();
        let bounded = [ab, bc, ac].iter().all(|v| (0.0..=2.0).contains(v));
        metric_violations += usize::from(!bounded || ac > ab + bc + 1e-12);
    }
    report(
        "metric oracles",
        eer_mismatches == 0 && six == 1.0 / 3.0 && psnr_err < 1e-6 && metric_violations == 0 && (p_red - 30.487).abs() < 1e-2,
        &format!(
            "EER mismatches {eer_mismatches}/100, six-pair EER {six}, PSNR {p20:.6}/{p_red:.6} dB (error {psnr_err:.1e}), feature-distance violations {metric_violations}/100"
        ),
    );
}

fn small_run(epochs: usize) -> RunConfig {
    RunConfig {
        variant: "f3warp".parse().unwrap(),
        epochs,
        batch_size: 3,
        lr: 1e-3,
        seed: 12,
        ..RunConfig::default()
    }
}

#[test]
fn determinism_and_persistence() {
    let data = synth_dataset(&SynthConfig::tiny(7, 3, 4)).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let history = |epochs| {
        pool.install(|| {
            let mut t = Trainer::new(small_run(epochs)).unwrap();
            let h: Vec<f64> = t.train(&data, |_, _| Ok(())).unwrap().iter().map(|r| r.mean_loss).collect();
            (t, h)
        })
    };
    let (full, h1) = history(4);
    let (_, h2) = history(4);
    let repeatable = h1.iter().map(|v| v.to_bits()).eq(h2.iter().map(|v| v.to_bits()));

    let (half, _) = history(2);
    let bytes = half.checkpoint().to_bytes();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    let round_trip = loaded.to_bytes() == bytes;
    let mut resumed = Trainer::new(small_run(4)).unwrap();
    resumed.restore(&loaded).unwrap();
    let restored_exact = resumed.model.params == half.model.params;
    let rest: Vec<f64> = pool.install(|| resumed.train(&data, |_, _| Ok(())).unwrap().iter().map(|r| r.mean_loss).collect());
    let resumes = rest == h1[2..] && resumed.model.params == full.model.params && resumed.checkpoint().to_bytes() == full.checkpoint().to_bytes();
    report(
        "determinism and persistence",
        repeatable && round_trip && restored_exact && resumes,
        &format!("repeatable {repeatable}, byte round trip {round_trip}, restore exact {restored_exact}, resume matches {resumes}"),
    );
}

#[test]
fn degradation_pipeline() {
    let sigma = 2.4;
    let k = gaussian_kernel(sigma).unwrap();
    let norm_err = (k.iter().sum::<f64>() - 1.0).abs();

    let constant = Tensor::<f32>::full(&[3, 40, 40], 0.37);
    let constant_exact = gaussian_blur(&constant, sigma).unwrap() == constant;

    // Impulse far from the borders against the normalized sampled Gaussian.
    let n = 41;
    let mid = n / 2;
    let mut impulse = Tensor::<f32>::zeros(&[3, n, n]);
    for c in 0..3 {
        impulse.data_mut()[(c * n + mid) * n + mid] = 1.0;
    }
    let blurred = gaussian_blur(&impulse, sigma).unwrap();
    let r = (3.0 * sigma).ceil() as i64;
    let g = |d: i64| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
    let z: f64 = (-r..=r).map(g).sum();
    let mut impulse_err: f64 = 0.0;
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as i64 - mid as i64, x as i64 - mid as i64);
            let expected = if dy.abs() <= r && dx.abs() <= r { g(dy) * g(dx) / (z * z) } else { 0.0 };
            impulse_err = impulse_err.max((f64::from(blurred.data()[y * n + x]) - expected).abs());
        }
    }

    let fine = Tensor::<f32>::from_fn(&[3, 128, 128], |i| ((i % 128 + i / 128) % 2) as f32);
    let coarse = Tensor::<f32>::from_fn(&[3, 128, 128], |i| ((i % 128 / 8 + i / 128 % 128 / 8) % 2) as f32);
    let fine_ok = area_downsample(&fine, 8).unwrap().data().iter().all(|&v| v == 0.5);
    let coarse_down = area_downsample(&coarse, 8).unwrap();
    let coarse_ok = coarse_down.data().iter().enumerate().all(|(i, &v)| v == ((i % 16 + i / 16 % 16) % 2) as f32);
    report(
        "degradation pipeline",
        norm_err < 1e-9 && constant_exact && impulse_err < 1e-6 && fine_ok && coarse_ok,
        &format!(
            "kernel sum error {norm_err:.1e}, constant exact {constant_exact}, impulse error {impulse_err:.1e}, checkerboards {fine_ok}/{coarse_ok}"
        ),
    );
}
