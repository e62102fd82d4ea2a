//! Fast invariant suite shipped with the binary: geometry and pairing
//! oracles, loss closed forms, mask statistics, schedules, the queue and
//! finite-difference gradient checks.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_mean_fill, channel_means, generate_mask, CropRecord};
use crate::config::{CrossEntropyOrder, PairMatching, QueueDenominator};
use crate::dataio::Image;
use crate::error::Result;
use crate::geometry::{feature_positions, match_pairs};
use crate::losses::{
    frequency_loss, frequency_weights, info_nce, local_loss, spatial_loss, MemoryQueue,
};
use crate::model::{ema_momentum, l2_normalize};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

pub fn random_crop(rng: &mut impl Rng, frame: f64) -> CropRecord {
    let width = rng.gen_range(1.0..frame);
    let height = rng.gen_range(1.0..frame);
    CropRecord {
        left: rng.gen_range(0.0..frame - width),
        top: rng.gen_range(0.0..frame - height),
        width,
        height,
        hflip: rng.gen_bool(0.5),
        out_size: 224,
    }
}

fn geometry_oracle(crops: usize) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..crops {
        let crop = random_crop(&mut rng, 512.0);
        let (rows, cols) = (rng.gen_range(1..=14), rng.gen_range(1..=14));
        let field = feature_positions(&crop, (rows, cols));
        for v in 0..rows {
            for u in 0..cols {
                // Normalized cell center, mirrored for flipped views, then
                // mapped through the crop's affine transform.
                let mut x = (u as f64 + 0.5) / cols as f64;
                if crop.hflip {
                    x = 1.0 - x;
                }
                let y = (v as f64 + 0.5) / rows as f64;
                let expect = (crop.left + crop.width * x, crop.top + crop.height * y);
                let got = field.positions[v * cols + u];
                worst = worst.max((got.0 - expect.0).abs()).max((got.1 - expect.1).abs());
            }
        }
    }
    (worst <= 1e-9, format!("max error {worst:.2e} over {crops} crops"))
}

fn pairing_oracle(cases: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 20;
    for _ in 0..cases {
        let a = feature_positions(&random_crop(&mut rng, 224.0), (7, 7));
        let b = feature_positions(&random_crop(&mut rng, 224.0), (7, 7));
        let got = match_pairs(&a, &b, n, PairMatching::GlobalTopN)?;
        let mut all = Vec::new();
        for (i, p) in a.positions.iter().enumerate() {
            for (j, q) in b.positions.iter().enumerate() {
                all.push(((p.0 - q.0).hypot(p.1 - q.1), i, j));
            }
        }
        all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        for (p, e) in got.pairs.iter().zip(&all[..n]) {
            if (p.student, p.teacher) != (e.1, e.2) || (p.distance - e.0).abs() > 1e-12 {
                return Ok((false, "pair list differs from exhaustive sort".into()));
            }
        }
    }
    let crop = random_crop(&mut rng, 224.0);
    let f = feature_positions(&crop, (7, 7));
    let same = match_pairs(&f, &f, n, PairMatching::GlobalTopN)?;
    let identity = same.pairs.iter().all(|p| p.distance == 0.0 && p.student == p.teacher);
    Ok((identity && same.len() == n, format!("{cases} crop pairs, identity case ok: {identity}")))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn closed_forms() -> Result<(bool, String)> {
    let dev = Device::Cpu;
    let mut e = vec![0.0f64; 5];
    e[0] = 1.0;
    let q = Tensor::from_vec(e, (1, 5), &dev)?;
    let mut rows = vec![0.0f64; 20];
    for i in 0..4 {
        rows[i * 5 + i + 1] = 1.0;
    }
    let queue = Tensor::from_vec(rows, (4, 5), &dev)?;
    let nce = scalar(&info_nce(&q, &q, Some(&queue), 0.2, QueueDenominator::WithPositive)?)?;
    let nce_expect = (1.0 + 4.0 * (-5.0f64).exp()).ln();
    let u = Tensor::full(0.25f64, (1, 4), &dev)?;
    let local = scalar(&local_loss(&u, &u, CrossEntropyOrder::TeacherTarget)?)?;
    let x = Tensor::rand(0f64, 1f64, (1, 3, 8, 8), &dev)?;
    let mask = Tensor::ones((1, 1, 8, 8), DType::F64, &dev)?;
    let spat = scalar(&spatial_loss(&x, &x, &mask)?)?;
    let freq = scalar(&frequency_loss(&x, &x)?)?;
    let ok = (nce - nce_expect).abs() <= 1e-6
        && (local - 4f64.ln()).abs() <= 1e-6
        && spat == 0.0
        && freq == 0.0;
    Ok((
        ok,
        format!("info_nce {nce:.6}, local {local:.6}, spatial {spat}, frequency {freq}"),
    ))
}

fn mask_statistics(masks: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut counts_ok = true;
    for _ in 0..masks {
        counts_ok &= generate_mask(7, 7, 0.6, 32, &mut rng).masked_count() == 29;
    }
    let view = Image::new(3, 224, 224, (0..3 * 224 * 224).map(|_| rng.gen::<f32>()).collect());
    let mask = generate_mask(7, 7, 0.6, 32, &mut rng);
    let means = channel_means(&view);
    let filled = apply_mean_fill(&view, &mask)?;
    let mut worst: f32 = 0.0;
    for c in 0..3 {
        for y in 0..224 {
            for x in 0..224 {
                if mask.is_masked(y / 32, x / 32) {
                    worst = worst.max((filled.get(c, y, x) - means[c]).abs());
                }
            }
        }
    }
    Ok((
        counts_ok && worst <= 1e-6,
        format!("{masks} masks of 29 cells: {counts_ok}; mean-fill error {worst:.1e}"),
    ))
}

fn ema_schedule(samples: u64) -> (bool, String) {
    let total = samples;
    let mut last = 0.0;
    let mut monotone = true;
    for s in 0..=total {
        let m = ema_momentum(s, total, 0.996);
        monotone &= m >= last;
        last = m;
    }
    let (start, end) = (ema_momentum(0, total, 0.996), ema_momentum(total, total, 0.996));
    (
        monotone && start == 0.996 && (end - 1.0).abs() <= 1e-9,
        format!("m(0) {start}, m(T) {end}, monotone {monotone}"),
    )
}

fn queue_replay(sequences: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..sequences {
        let (cap, dim) = (rng.gen_range(1..16), rng.gen_range(1..6));
        let mut queue = MemoryQueue::new(cap, dim);
        let mut replay: Vec<Vec<f32>> = Vec::new();
        for _ in 0..rng.gen_range(1..12) {
            let batch: Vec<Vec<f32>> = (0..rng.gen_range(1..6))
                .map(|_| {
                    let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
                    v.iter().map(|x| x / n).collect()
                })
                .collect();
            queue.enqueue(&batch)?;
            replay.extend(batch);
        }
        let expect = &replay[replay.len().saturating_sub(cap)..];
        if queue.ordered() != expect {
            return Ok((false, "queue differs from replay".into()));
        }
    }
    Ok((true, format!("{sequences} sequences")))
}

/// Relative error `|a - n| / max(|a|, |n|)` of analytic gradient `a` against
/// central differences `n` of `f` at `x`.
pub fn gradient_error(x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>, eps: f64) -> Result<f64> {
    let var = Var::from_tensor(x)?;
    let loss = f(var.as_tensor())?;
    let grads = loss.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; x.elem_count()],
    };
    let base = x.flatten_all()?.to_vec1::<f64>()?;
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = scalar(&f(&Tensor::from_vec(plus, x.dims(), x.device())?)?)?;
        let fm = scalar(&f(&Tensor::from_vec(minus, x.dims(), x.device())?)?)?;
        numeric.push((fp - fm) / (2.0 * eps));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(diff / na.max(nn).max(1e-12))
}

/// Focal-weighted spectrum objective with the weights held fixed, evaluated
/// by a direct double sum DFT.
pub fn frozen_frequency_objective(x: &[f64], pred: &[f64], weights: &[f64], h: usize, w: usize) -> f64 {
    let n = (h * w) as f64;
    let mut total = 0.0;
    for ky in 0..h {
        for kx in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let d = pred[y * w + xx] - x[y * w + xx];
                    let theta = -2.0 * std::f64::consts::PI
                        * ((ky * y) as f64 / h as f64 + (kx * xx) as f64 / w as f64);
                    re += d * theta.cos();
                    im += d * theta.sin();
                }
            }
            total += weights[ky * w + kx] * (re * re + im * im) / n;
        }
    }
    total / n
}

fn gradient_checks() -> Result<(bool, String)> {
    let dev = Device::Cpu;
    let eps = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut rand = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };

    // Spatial: 1 x 2 x 2 x 2 prediction, half the pixels masked.
    let target = Tensor::from_vec(rand(8), (1, 2, 2, 2), &dev)?;
    let mask = Tensor::from_vec(vec![1.0f64, 0.0, 1.0, 1.0], (1, 1, 2, 2), &dev)?;
    let pred = Tensor::from_vec(rand(8), (1, 2, 2, 2), &dev)?;
    let spat = gradient_error(&pred, |p| spatial_loss(&target, p, &mask), eps)?;

    // Frequency: single-channel 2 x 4 image; weights frozen at the base point.
    let fx: Vec<f64> = rand(8);
    let fp: Vec<f64> = rand(8);
    let xt = Tensor::from_vec(fx.clone(), (1, 1, 2, 4), &dev)?;
    let pt = Tensor::from_vec(fp.clone(), (1, 1, 2, 4), &dev)?;
    let weights = frequency_weights(&xt, &pt)?.flatten_all()?.to_vec1::<f64>()?;
    let var = Var::from_tensor(&pt)?;
    let analytic = frequency_loss(&xt, var.as_tensor())?
        .backward()?
        .get(var.as_tensor())
        .map(|g| g.flatten_all().and_then(|g| g.to_vec1::<f64>()))
        .transpose()?
        .unwrap_or_default();
    let mut numeric = Vec::new();
    for i in 0..8 {
        let mut plus = fp.clone();
        plus[i] += eps;
        let mut minus = fp.clone();
        minus[i] -= eps;
        numeric.push(
            (frozen_frequency_objective(&fx, &plus, &weights, 2, 4)
                - frozen_frequency_objective(&fx, &minus, &weights, 2, 4))
                / (2.0 * eps),
        );
    }
    let num = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let den = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-12);
    let freq = num / den;

    // Contrastive: raw 2 x 4 queries through L2 normalization.
    let k = l2_normalize(&Tensor::from_vec(rand(8), (2, 4), &dev)?)?;
    let queue = l2_normalize(&Tensor::from_vec(rand(12), (3, 4), &dev)?)?;
    let z = Tensor::from_vec(rand(8), (2, 4), &dev)?;
    let nce = gradient_error(
        &z,
        |z| info_nce(&l2_normalize(z)?, &k, Some(&queue), 0.2, QueueDenominator::WithPositive),
        eps,
    )?;

    // Local: 2 x 4 student logits through softmax against fixed targets.
    let q = candle_nn::ops::softmax(&Tensor::from_vec(rand(8), (2, 4), &dev)?, 1)?;
    let logits = Tensor::from_vec(rand(8), (2, 4), &dev)?;
    let local = gradient_error(
        &logits,
        |l| local_loss(&candle_nn::ops::softmax(l, 1)?, &q, CrossEntropyOrder::TeacherTarget),
        eps,
    )?;

    let worst = spat.max(freq).max(nce).max(local);
    Ok((
        worst <= 1e-3,
        format!("relative errors: spatial {spat:.1e}, frequency {freq:.1e}, info_nce {nce:.1e}, local {local:.1e}"),
    ))
}

/// Runs every check; each entry names the check and carries a short detail.
pub fn run_selftest() -> Vec<Check> {
    let start = Instant::now();
    let mut checks = vec![
        {
            let (ok, d) = geometry_oracle(1000);
            Check::new("geometry oracle", ok, d)
        },
        Check::from_result("pair matching oracle", pairing_oracle(100)),
        Check::from_result("loss closed forms", closed_forms()),
        Check::from_result("mask statistics", mask_statistics(1000)),
        {
            let (ok, d) = ema_schedule(10_000);
            Check::new("momentum schedule", ok, d)
        },
        Check::from_result("queue replay", queue_replay(50)),
        Check::from_result("gradient checks", gradient_checks()),
    ];
    let elapsed = start.elapsed().as_secs_f64();
    checks.push(Check::new("runtime", elapsed < 60.0, format!("{elapsed:.2}s")));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for c in run_selftest() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn frozen_objective_agrees_with_loss_value() {
        let dev = Device::Cpu;
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let p: Vec<f64> = (0..12).map(|i| (i as f64 * 0.11).cos()).collect();
        let xt = Tensor::from_vec(x.clone(), (1, 1, 3, 4), &dev).unwrap();
        let pt = Tensor::from_vec(p.clone(), (1, 1, 3, 4), &dev).unwrap();
        let w = frequency_weights(&xt, &pt).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let direct = frozen_frequency_objective(&x, &p, &w, 3, 4);
        let loss = scalar(&frequency_loss(&xt, &pt).unwrap()).unwrap();
        assert!((direct - loss).abs() < 1e-12, "{direct} vs {loss}");
    }
}
