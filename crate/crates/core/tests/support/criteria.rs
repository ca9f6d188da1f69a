//! Oracle checks shared by the core integration tests and the acceptance
//! harness. Each returns a short summary of what was measured, or the
//! first violation found.

#![allow(dead_code)]

use std::time::Instant;

use homad::backbone::Backbone;
use homad::eval::{auroc, pixel_auroc};
use homad::geometry::{
    apply_homography, compose, displacement_to_homography, dlt_solve, homography_to_displacement, invert,
    rotation_to_displacement, CornerDisplacement, HomographyMatrix, ImageFrame,
};
use homad::model::ExecProfile;
use homad::nn::{HeadKind, RegressionHead};
use homad::scorers::{kcenter_greedy, mahalanobis, CovFactor, NormalModel, ScoreMap, ScorerConfig, ScorerKind};
use homad::shl::{grad_check_head, shl_loss};
use homad::synthesis::{render_toy_sample, sample_inward_perturbation, ToyDatasetSpec};
use homad::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

pub fn geometry_oracle() -> Check {
    const TOL: f64 = 1e-9;
    let t = Instant::now();
    let frame = ImageFrame::new(128, 128).map_err(e)?;
    let src = frame.corners();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e0);
    let id = HomographyMatrix::identity();
    let (mut w_apply, mut w_disp, mut w_inv) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let d = sample_inward_perturbation(&mut rng, 32.0, &frame).map_err(e)?;
        let dst: [[f64; 2]; 4] = std::array::from_fn(|k| [src[k][0] + d.0[k][0], src[k][1] + d.0[k][1]]);
        let h = dlt_solve(&src, &dst).map_err(e)?;
        for (p, q) in apply_homography(&h, &src).map_err(e)?.iter().zip(&dst) {
            w_apply = w_apply.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs());
        }
        let back = homography_to_displacement(&displacement_to_homography(&d, &frame).map_err(e)?, &frame).map_err(e)?;
        w_disp = w_disp.max(back.max_abs_diff(&d));
        let inv = invert(&h).map_err(e)?;
        let a = compose(&h, &inv).map_err(e)?.max_abs_diff(&id);
        let b = compose(&inv, &h).map_err(e)?.max_abs_diff(&id);
        w_inv = w_inv.max(a).max(b);
    }
    let secs = t.elapsed().as_secs_f64();
    let summary = format!(
        "max errors: apply {w_apply:.1e}, displacement {w_disp:.1e}, inverse {w_inv:.1e}; {secs:.2}s"
    );
    ensure(w_apply < TOL && w_disp < TOL && w_inv < TOL && secs < 10.0, || summary.clone())?;
    Ok(summary)
}

pub fn rotation_oracle() -> Check {
    let frame = ImageFrame::new(128, 96).map_err(e)?;
    let [cx, cy] = frame.center();
    let mut worst = 0.0f64;
    for angle in [-90.0f64, -45.0, 0.0, 30.0, 90.0, 180.0] {
        let (s, c) = angle.to_radians().sin_cos();
        // T(c) * R * T(-c), multiplied out by hand.
        let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| -> [[f64; 3]; 3] {
            std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
        };
        let m = mul(
            mul([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]], [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]),
            [[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]],
        );
        let want: [[f64; 2]; 4] = std::array::from_fn(|k| {
            let [x, y] = frame.corners()[k];
            let (px, py) = (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2]);
            [px - x, py - y]
        });
        let got = rotation_to_displacement(angle, &frame);
        worst = worst.max(got.max_abs_diff(&CornerDisplacement(want)));
    }
    let summary = format!("max deviation {worst:.1e} over 6 angles");
    ensure(worst < 1e-9, || summary.clone())?;
    Ok(summary)
}

pub fn loss_and_gradient() -> Check {
    let z = CornerDisplacement::zeros();
    let ones = CornerDisplacement::from_flat([1.0; 8]).map_err(e)?;
    let seq = CornerDisplacement::from_flat(std::array::from_fn(|k| k as f64 + 1.0)).map_err(e)?;
    let cases = [shl_loss(&z, &z), shl_loss(&ones, &z), shl_loss(&z, &seq)];
    ensure(cases == [0.0, 8.0, 204.0], || format!("hand cases gave {cases:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut head = RegressionHead::new(HeadKind::Flatten, 6, 2, 4.0);
    head.init(&mut rng);
    for w in &mut head.weight {
        *w *= 10.0;
    }
    let probes: Vec<_> = (0..6)
        .map(|_| {
            let f: Vec<f32> = (0..head.in_features).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t: [f64; 8] = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
            (f, CornerDisplacement::from_flat(t).unwrap())
        })
        .collect();
    let err = grad_check_head(&head, &probes);
    let summary = format!("hand cases {cases:?}; gradient max relative error {err:.1e}");
    ensure(err < 1e-3, || summary.clone())?;
    Ok(summary)
}

/// Fraction of (positive, negative) pairs ranked correctly, ties half.
fn pair_count(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 2;
                num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    num as f64 / den as f64
}

/// Scores drawn from few levels half the time so ties are common.
fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let levels = if rng.gen_bool(0.5) { Some(rng.gen_range(2..6)) } else { None };
    (0..n)
        .map(|_| match levels {
            Some(l) => rng.gen_range(0..l) as f64 * 0.25,
            None => rng.gen_range(-5.0..5.0),
        })
        .collect()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut l: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    l[0] = true;
    l[n - 1] = false;
    l
}

pub fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa0c);
    for inst in 0..100 {
        let n = rng.gen_range(2..=200);
        let scores = random_scores(&mut rng, n);
        let labels = random_labels(&mut rng, n);
        let got = auroc(&scores, &labels).map_err(e)?;
        let want = pair_count(&scores, &labels);
        ensure(got == want, || format!("auroc instance {inst}: {got} vs oracle {want}"))?;

        let k = rng.gen_range(1..=3);
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        let (mut flat_s, mut flat_l) = (Vec::new(), Vec::new());
        for _ in 0..k {
            let s = random_scores(&mut rng, 64);
            let l = random_labels(&mut rng, 64);
            let mask = Image::from_vec(8, 8, 1, l.iter().map(|&b| if b { 255.0 } else { 0.0 }).collect())
                .map_err(e)?;
            flat_s.extend_from_slice(&s);
            flat_l.extend_from_slice(&l);
            maps.push(ScoreMap { width: 8, height: 8, data: s });
            masks.push(mask);
        }
        let got = pixel_auroc(&maps.iter().collect::<Vec<_>>(), &masks.iter().collect::<Vec<_>>()).map_err(e)?;
        let want = pair_count(&flat_s, &flat_l);
        ensure(got == want, || format!("pixel_auroc instance {inst}: {got} vs oracle {want}"))?;
    }

    let f = CovFactor::from_covariance(&[2.0, 0.0, 0.0, 0.5], 2).map_err(e)?;
    let d = mahalanobis(&[1.0, 1.0], &[0.0, 0.0], &f).map_err(e)?;
    let d0 = mahalanobis(&[0.3, -2.0], &[0.3, -2.0], &f).map_err(e)?;
    let id = CovFactor::from_covariance(&[1.0, 0.0, 0.0, 1.0], 2).map_err(e)?;
    let d_eu = mahalanobis(&[3.0, 4.0], &[0.0, 0.0], &id).map_err(e)?;
    ensure(
        (d - 2.5f64.sqrt()).abs() < 1e-8 && d0.abs() < 1e-8 && (d_eu - 5.0).abs() < 1e-8,
        || format!("mahalanobis hand cases gave {d}, {d0}, {d_eu}"),
    )?;

    for inst in 0..20 {
        let dim = rng.gen_range(1..6);
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..dim).map(|_| rng.gen_range(-10.0f32..10.0) as f64).collect())
            .collect();
        let flat: Vec<f32> = pts.iter().flatten().map(|&v| v as f32).collect();
        let count = rng.gen_range(1..=50);
        let start = rng.gen_range(0..50);
        let got = kcenter_greedy(&flat, dim, count, start);
        let want = brute_greedy(&pts, count, start);
        ensure(got == want, || format!("kcenter instance {inst}: {got:?} vs {want:?}"))?;
    }
    Ok("auroc/pixel_auroc exact on 100 instances; mahalanobis hand cases; kcenter on 20 x 50 points".into())
}

/// Textbook greedy: recompute every min distance from scratch each round.
fn brute_greedy(pts: &[Vec<f64>], count: usize, start: usize) -> Vec<usize> {
    let d = |a: &[f64], b: &[f64]| -> f32 {
        a.iter().zip(b).map(|(x, y)| ((x - y) as f32).powi(2)).sum()
    };
    let mut sel = vec![start];
    while sel.len() < count.min(pts.len()) {
        let mut best = None;
        for i in 0..pts.len() {
            if sel.contains(&i) {
                continue;
            }
            let m = sel.iter().map(|&s| d(&pts[i], &pts[s])).fold(f32::INFINITY, f32::min);
            if best.map_or(true, |(_, bm)| m > bm) {
                best = Some((i, m));
            }
        }
        sel.push(best.unwrap().0);
    }
    sel
}

fn toy_images(n: usize, seed: u64) -> Vec<Image> {
    let spec = ToyDatasetSpec::default().classes.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| render_toy_sample(&spec, 64, None, &mut rng).0).collect()
}

pub fn scorer_degeneracy() -> Check {
    const TOL: f64 = 1e-8;
    let bb = Backbone::compact(3, 1);
    let cfg = ScorerConfig {
        padim_channels: 20,
        ..ScorerConfig::default()
    };
    let serial = ExecProfile::Serial;
    let img = toy_images(1, 0).remove(0);
    let same = vec![img.clone(); 4];
    let varied = toy_images(4, 1);
    let mut out = Vec::new();

    let padim = NormalModel::fit(ScorerKind::Padim, &bb, &same, &cfg, serial).map_err(e)?;
    let r = padim.score(&bb, &img).map_err(e)?;
    let map_max = r.score_map.as_ref().map_or(f64::INFINITY, |m| m.max());
    out.push(("padim", r.image_score.max(map_max)));

    let pc_cfg = ScorerConfig { coreset_ratio: 1.0, ..cfg.clone() };
    let pc = NormalModel::fit(ScorerKind::Patchcore, &bb, &varied, &pc_cfg, serial).map_err(e)?;
    out.push(("patchcore", pc.score(&bb, &varied[0]).map_err(e)?.image_score));

    let sp_cfg = ScorerConfig { spade_k: 1, ..cfg.clone() };
    let sp = NormalModel::fit(ScorerKind::Spade, &bb, &varied, &sp_cfg, serial).map_err(e)?;
    out.push(("spade", sp.score(&bb, &varied[2]).map_err(e)?.image_score));

    let mh = NormalModel::fit(ScorerKind::Mahad, &bb, &same, &cfg, serial).map_err(e)?;
    out.push(("mahad", mh.score(&bb, &img).map_err(e)?.image_score));

    let summary = out.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(out.iter().all(|(_, v)| v.abs() <= TOL), || summary.clone())?;
    Ok(summary)
}
