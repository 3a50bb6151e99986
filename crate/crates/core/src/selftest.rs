//! Built-in consistency suites run by `detrk selftest`.
//!
//! Each suite checks a kernel against a brute-force re-computation, an algebraic
//! identity or finite differences. Sizes are kept small so the whole run takes seconds.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{map_range, Detection, GroundTruth};
use crate::hff::{hff_fuse, sc_down, PyramidLevels, ScDownParams};
use crate::matching::{
    denoise_perturb, fit_box, focal_loss, giou_grad, giou_loss, hungarian_match, l1_box_loss, l1_grad, set_loss,
    BoundingBox, DnNoise, L1Reduction, LabeledBox, LossWeights, Prediction, Target,
};
use crate::msda::{
    deform_attn_head, map_reference, ms_deform_attn, ms_deform_attn_grad, sampling_offsets_and_weights, MsdaParams,
    ReferencePoint,
};
use crate::msfca::{dct_basis, freq_compress, inverse_dct};
use crate::pipeline::{gen_synthetic_scene, run_model, PipelineConfig, SceneSpec, ToyParams};
use crate::posenc::{positional_encoding, PosEncConfig};
use crate::tensor::{bilinear_sample, bilinear_sample_grad, finite_diff_grad, relative_error, Point2D, Tensor};

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: crate::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

type Suite = (&'static str, fn() -> Outcome);

const SUITES: &[Suite] = &[
    ("hungarian", hungarian),
    ("dct", dct),
    ("msda", msda),
    ("gradients", gradients),
    ("loss-values", loss_values),
    ("box-fit", box_fit),
    ("evaluation", evaluation),
    ("hff", hff),
    ("posenc", posenc),
    ("denoise", denoise),
    ("pipeline", pipeline),
];

pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|(n, _)| *n).collect()
}

pub fn run_suites() -> Vec<SuiteReport> {
    SUITES
        .iter()
        .map(|&(name, f)| {
            let t = Instant::now();
            let r = f();
            let seconds = t.elapsed().as_secs_f64();
            let (passed, detail) = match r {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            SuiteReport {
                name,
                passed,
                detail,
                seconds,
            }
        })
        .collect()
}

/// Minimum over all injective maps from the smaller side into the larger.
fn brute_force_assignment(c: &Tensor) -> f64 {
    let (m, n) = (c.shape()[0], c.shape()[1]);
    type Entry<'a> = Box<dyn Fn(usize, usize) -> f64 + 'a>;
    let (rows, cols, at): (usize, usize, Entry) = if m <= n {
        (m, n, Box::new(|i, j| c.at2(i, j)))
    } else {
        (n, m, Box::new(|i, j| c.at2(j, i)))
    };
    fn go(i: usize, rows: usize, used: &mut Vec<bool>, at: &dyn Fn(usize, usize) -> f64) -> f64 {
        if i == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(at(i, j) + go(i + 1, rows, used, at));
                used[j] = false;
            }
        }
        best
    }
    go(0, rows, &mut vec![false; cols], &*at)
}

fn hungarian() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..300 {
        let (m, n) = (rng.random_range(1..=6), rng.random_range(1..=6));
        // Integer costs keep every partial sum exact.
        let c = Tensor::from_fn(&[m, n], |_| rng.random_range(-20..=20) as f64);
        let r = lib(hungarian_match(&c))?;
        let best = brute_force_assignment(&c);
        ensure(r.total_cost == best, || {
            format!("trial {trial}: {} vs brute force {best}", r.total_cost)
        })?;
        ensure(r.pairs.len() == m.min(n), || {
            format!("trial {trial}: {} pairs", r.pairs.len())
        })?;
    }
    Ok("300 matrices match brute force".into())
}

fn dct() -> Outcome {
    let (h, w) = (6, 7);
    let bases: Vec<_> = (0..h)
        .flat_map(|u| (0..w).map(move |v| (u, v)))
        .map(|(u, v)| dct_basis(h, w, u, v))
        .collect::<crate::Result<_>>()
        .map_err(|e| e.to_string())?;
    for (i, a) in bases.iter().enumerate() {
        for (j, b) in bases.iter().enumerate() {
            let d = lib(a.values.dot(&b.values))?;
            let want = if i == j { a.norm_sq() } else { 0.0 };
            ensure((d - want).abs() < 1e-12, || {
                format!("basis {i}·{j} = {d}, expected {want}")
            })?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let x = Tensor::random_uniform(&[3, h, w], -1.0, 1.0, &mut rng);
    let dc = lib(freq_compress(&x, 0, 0))?;
    for c in 0..3 {
        let s: f64 = x.channel(c).iter().sum();
        ensure((dc.data()[c] - s).abs() < 1e-12, || {
            format!("(0,0) compression of channel {c}")
        })?;
    }
    let plane = Tensor::new(vec![1, h, w], x.channel(0).to_vec()).map_err(|e| e.to_string())?;
    let coeffs: Vec<f64> = (0..h * w)
        .map(|k| freq_compress(&plane, k / w, k % w).map(|t| t.data()[0]))
        .collect::<crate::Result<_>>()
        .map_err(|e| e.to_string())?;
    let back = lib(inverse_dct(&coeffs, h, w))?;
    let err = back
        .data()
        .iter()
        .zip(x.channel(0))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(err < 1e-9, || format!("inverse reconstruction error {err}"))?;
    let energy: f64 = x.channel(0).iter().map(|v| v * v).sum();
    let spectral: f64 = coeffs.iter().zip(&bases).map(|(c, b)| c * c / b.norm_sq()).sum();
    ensure((energy - spectral).abs() < 1e-9, || {
        format!("energy {energy} vs {spectral}")
    })?;
    Ok(format!(
        "{} bases orthogonal, reconstruction error {err:.1e}",
        bases.len()
    ))
}

/// Direct transcription of the aggregation formula with its own bilinear sampler.
fn naive_msda(z: &Tensor, r: ReferencePoint, maps: &[Tensor], p: &MsdaParams) -> Vec<f64> {
    let d = p.d_model;
    let hd = p.head_dim();
    let mut out = vec![0.0; d];
    for h in 0..p.heads {
        let mut logits = vec![];
        for l in 0..p.levels {
            for k in 0..p.points {
                let row = p.index(h, l, k);
                logits.push(
                    p.attn_bias.data()[row] + (0..d).map(|c| p.attn_weight.at2(row, c) * z.data()[c]).sum::<f64>(),
                );
            }
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let mut gathered = vec![0.0; d];
        for (l, map) in maps.iter().enumerate() {
            let (hh, ww) = (map.shape()[1], map.shape()[2]);
            for k in 0..p.points {
                let i = p.index(h, l, k);
                let off = |axis: usize| {
                    let row = 2 * i + axis;
                    p.offset_bias.data()[row] + (0..d).map(|c| p.offset_weight.at2(row, c) * z.data()[c]).sum::<f64>()
                };
                let x = r.x() * ww as f64 - 0.5 + off(0);
                let y = r.y() * hh as f64 - 0.5 + off(1);
                let (x0, y0) = (x.floor(), y.floor());
                for (dy, wy) in [(0.0, 1.0 - (y - y0)), (1.0, y - y0)] {
                    for (dx, wx) in [(0.0, 1.0 - (x - x0)), (1.0, x - x0)] {
                        let (xi, yi) = (x0 + dx, y0 + dy);
                        if xi < 0.0 || yi < 0.0 || xi >= ww as f64 || yi >= hh as f64 {
                            continue;
                        }
                        for (c, g) in gathered.iter_mut().enumerate() {
                            *g += e[l * p.points + k] / s * wx * wy * map.at3(c, yi as usize, xi as usize);
                        }
                    }
                }
            }
        }
        let v: Vec<f64> = (0..hd)
            .map(|j| (0..d).map(|c| p.value_proj[h].at2(j, c) * gathered[c]).sum())
            .collect();
        for (o, out_c) in out.iter_mut().enumerate() {
            *out_c += (0..hd).map(|j| p.output_proj[h].at2(o, j) * v[j]).sum::<f64>();
        }
    }
    out
}

fn random_pyramid(rng: &mut ChaCha8Rng, d: usize, shapes: &[(usize, usize)]) -> PyramidLevels {
    PyramidLevels::new(
        shapes
            .iter()
            .map(|&(h, w)| Tensor::random_uniform(&[d, h, w], -1.0, 1.0, rng))
            .collect(),
    )
    .expect("rank-3 levels")
}

fn msda() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let d = 8;
    // Single level versus the one-level head.
    let p1 = lib(MsdaParams::random(2, 1, 3, d, 0.5, 2.0, &mut rng))?;
    let pyr1 = random_pyramid(&mut rng, d, &[(5, 6)]);
    let z = Tensor::random_uniform(&[d], -1.0, 1.0, &mut rng);
    let r = ReferencePoint::new(0.3, 0.7);
    let a = lib(ms_deform_attn(&z, r, &pyr1, &p1))?;
    let b = lib(deform_attn_head(&z, map_reference(r, 5, 6), &pyr1.levels[0], &p1))?;
    ensure(a == b, || "single-level case differs from the head".into())?;

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p = lib(MsdaParams::random(2, 3, 2, d, 0.5, 3.0, &mut rng))?;
        let pyr = random_pyramid(&mut rng, d, &[(7, 6), (4, 3), (2, 2)]);
        let z = Tensor::random_uniform(&[d], -1.0, 1.0, &mut rng);
        let r = ReferencePoint::new(rng.random(), rng.random());
        let s = lib(sampling_offsets_and_weights(&z, &p))?;
        for head in s.weights.chunks(p.levels * p.points) {
            let sum: f64 = head.iter().sum();
            ensure((sum - 1.0).abs() < 1e-12, || format!("head weights sum to {sum}"))?;
        }
        let fast = lib(ms_deform_attn(&z, r, &pyr, &p))?;
        let slow = naive_msda(&z, r, &pyr.levels, &p);
        worst = fast
            .data()
            .iter()
            .zip(&slow)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    ensure(worst < 1e-10, || format!("naive loop disagreement {worst}"))?;

    // Constant field: every in-bounds sample returns the constant.
    let mut p = lib(MsdaParams::random(2, 2, 2, d, 0.5, 0.4, &mut rng))?.with_identity_projections();
    p.offset_weight = Tensor::zeros(p.offset_weight.shape());
    let values: Vec<f64> = (0..d).map(|c| c as f64 - 2.5).collect();
    let pyr = PyramidLevels::new(vec![
        Tensor::from_fn(&[d, 6, 6], |i| values[i / 36]),
        Tensor::from_fn(&[d, 3, 3], |i| values[i / 9]),
    ])
    .map_err(|e| e.to_string())?;
    let out = lib(ms_deform_attn(&z, ReferencePoint::new(0.5, 0.5), &pyr, &p))?;
    let err = out
        .data()
        .iter()
        .zip(&values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(err < 1e-10, || format!("constant field error {err}"))?;
    Ok(format!("naive agreement {worst:.1e}, constant field {err:.1e}"))
}

fn near_integer(v: f64, margin: f64) -> bool {
    (v - v.round()).abs() < margin
}

fn gradients() -> Outcome {
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut compare = |a: &[f64], b: &[f64], what: &str| -> std::result::Result<(), String> {
        for (x, y) in a.iter().zip(b) {
            let e = relative_error(*x, *y, FLOOR);
            worst = worst.max(e);
            ensure(e < TOL, || format!("{what}: analytic {x} vs numeric {y}"))?;
        }
        checked += 1;
        Ok(())
    };

    // Bilinear sampling.
    let map = Tensor::random_uniform(&[2, 5, 6], -1.0, 1.0, &mut rng);
    for _ in 0..20 {
        let p = Point2D::new(rng.random_range(-0.9..5.9), rng.random_range(-0.9..4.9));
        if near_integer(p.x, 1e-3) || near_integer(p.y, 1e-3) {
            continue;
        }
        let up = Tensor::random_uniform(&[2], -1.0, 1.0, &mut rng);
        let g = lib(bilinear_sample_grad(&map, p, &up))?;
        let f = |t: &Tensor| {
            bilinear_sample(&map, Point2D::new(t.data()[0], t.data()[1]))
                .unwrap()
                .dot(&up)
                .unwrap()
        };
        let fd = lib(finite_diff_grad(f, &Tensor::vector(vec![p.x, p.y]), EPS))?;
        compare(&[g.point.x, g.point.y], fd.data(), "bilinear point")?;
        let fm = |t: &Tensor| bilinear_sample(t, p).unwrap().dot(&up).unwrap();
        let fdm = lib(finite_diff_grad(fm, &map, EPS))?;
        compare(g.map.data(), fdm.data(), "bilinear map")?;
    }

    // Box losses, away from the kinks of |·| and min/max.
    for _ in 0..40 {
        let mut draw = || {
            BoundingBox::new(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.05..0.5),
                rng.random_range(0.05..0.5),
            )
        };
        let (a, t) = (lib(draw())?, lib(draw())?);
        let (ca, ct) = (a.corners(), t.corners());
        let gaps = [
            a.cx() - t.cx(),
            a.cy() - t.cy(),
            a.w() - t.w(),
            a.h() - t.h(),
            ca.x1 - ct.x1,
            ca.y1 - ct.y1,
            ca.x2 - ct.x2,
            ca.y2 - ct.y2,
            ca.x1 - ct.x2,
            ca.x2 - ct.x1,
            ca.y1 - ct.y2,
            ca.y2 - ct.y1,
        ];
        if gaps.iter().any(|g| g.abs() < 1e-3) {
            continue;
        }
        let boxed = |x: &Tensor| BoundingBox::new(x.data()[0], x.data()[1], x.data()[2], x.data()[3]).unwrap();
        let x = Tensor::vector(a.to_array().to_vec());
        let fd = lib(finite_diff_grad(|x| giou_loss(&boxed(x), &t), &x, EPS))?;
        compare(&giou_grad(&a, &t), fd.data(), "giou")?;
        let fd = lib(finite_diff_grad(|x| l1_box_loss(&boxed(x), &t), &x, EPS))?;
        compare(&l1_grad(&a, &t, L1Reduction::Mean), fd.data(), "l1")?;
    }
    for _ in 0..20 {
        let p: f64 = rng.random_range(0.05..0.95);
        let w = LossWeights::default();
        for target in [Target::Foreground, Target::Background] {
            let fd = lib(finite_diff_grad(
                |x| focal_loss(x.data()[0], target, w.gamma),
                &Tensor::vector(vec![p]),
                EPS,
            ))?;
            let analytic = match target {
                Target::Foreground => {
                    let b = BoundingBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
                    crate::matching::loss_gradients(&Prediction { bbox: b, prob: p }, &b, &w).prob / w.focal
                }
                Target::Background => crate::matching::background_focal_grad(p, &w) / w.focal,
            };
            compare(&[analytic], fd.data(), "focal")?;
        }
    }

    // Deformable attention, every parameter block.
    let d = 4;
    let mut done = 0;
    while done < 3 {
        let p = lib(MsdaParams::random(2, 2, 2, d, 0.5, 1.5, &mut rng))?;
        let pyr = random_pyramid(&mut rng, d, &[(4, 5), (2, 3)]);
        let z = Tensor::random_uniform(&[d], -1.0, 1.0, &mut rng);
        let r = ReferencePoint::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
        let s = lib(sampling_offsets_and_weights(&z, &p))?;
        let anchors = [map_reference(r, 4, 5), map_reference(r, 2, 3)];
        let near_kink = (0..p.sample_count()).any(|i| {
            let l = (i / p.points) % p.levels;
            let loc = Point2D::new(anchors[l].x + s.offsets[i].x, anchors[l].y + s.offsets[i].y);
            near_integer(loc.x, 1e-3) || near_integer(loc.y, 1e-3)
        });
        if near_kink {
            continue;
        }
        let up = Tensor::random_uniform(&[d], -1.0, 1.0, &mut rng);
        let g = lib(ms_deform_attn_grad(&z, r, &pyr, &p, &up))?;
        let eval =
            |z: &Tensor, pyr: &PyramidLevels, p: &MsdaParams| ms_deform_attn(z, r, pyr, p).unwrap().dot(&up).unwrap();

        let fd = lib(finite_diff_grad(|x| eval(x, &pyr, &p), &z, EPS))?;
        compare(g.query.data(), fd.data(), "msda query")?;
        for l in 0..2 {
            let fd = lib(finite_diff_grad(
                |x| {
                    let mut q = pyr.clone();
                    q.levels[l] = x.clone();
                    eval(&z, &q, &p)
                },
                &pyr.levels[l],
                EPS,
            ))?;
            compare(g.pyramid[l].data(), fd.data(), "msda pyramid")?;
        }
        type Slot = fn(&mut MsdaParams) -> &mut Tensor;
        let blocks: [(&str, Slot, &Tensor); 4] = [
            ("offset_weight", |p| &mut p.offset_weight, &g.offset_weight),
            ("offset_bias", |p| &mut p.offset_bias, &g.offset_bias),
            ("attn_weight", |p| &mut p.attn_weight, &g.attn_weight),
            ("attn_bias", |p| &mut p.attn_bias, &g.attn_bias),
        ];
        for (name, slot, analytic) in blocks {
            let mut base = p.clone();
            let x0 = slot(&mut base).clone();
            let fd = lib(finite_diff_grad(
                |x| {
                    let mut q = p.clone();
                    *slot(&mut q) = x.clone();
                    eval(&z, &pyr, &q)
                },
                &x0,
                EPS,
            ))?;
            compare(analytic.data(), fd.data(), name)?;
        }
        for h in 0..2 {
            let fd = lib(finite_diff_grad(
                |x| {
                    let mut q = p.clone();
                    q.value_proj[h] = x.clone();
                    eval(&z, &pyr, &q)
                },
                &p.value_proj[h],
                EPS,
            ))?;
            compare(g.value_proj[h].data(), fd.data(), "value_proj")?;
            let fd = lib(finite_diff_grad(
                |x| {
                    let mut q = p.clone();
                    q.output_proj[h] = x.clone();
                    eval(&z, &pyr, &q)
                },
                &p.output_proj[h],
                EPS,
            ))?;
            compare(g.output_proj[h].data(), fd.data(), "output_proj")?;
        }
        done += 1;
    }
    Ok(format!("{checked} gradient blocks, worst relative error {worst:.1e}"))
}

fn loss_values() -> Outcome {
    let b = |cx, cy, w, h| BoundingBox::new(cx, cy, w, h).map_err(|e| e.to_string());
    let cases = [
        (
            "giou partial overlap",
            giou_loss(&b(0.5, 0.5, 0.4, 0.4)?, &b(0.6, 0.6, 0.4, 0.4)?),
            1.0 - 9.0 / 23.0 + 0.02 / 0.25,
        ),
        (
            "focal foreground 0.5",
            focal_loss(0.5, Target::Foreground, 2.0),
            0.25 * std::f64::consts::LN_2,
        ),
        (
            "focal background 0.9",
            focal_loss(0.9, Target::Background, 2.0),
            0.81 * 10f64.ln(),
        ),
    ];
    for (name, got, want) in cases {
        ensure((got - want).abs() < 1e-9, || format!("{name}: {got} vs {want}"))?;
    }
    let g = b(0.5, 0.5, 0.2, 0.2)?;
    let preds = vec![Prediction::new(g, 0.5).map_err(|e| e.to_string())?; 2];
    let r = lib(set_loss(&preds, &[g], &LossWeights::default()))?;
    // Matched: 2·focal(0.5); unmatched background: 2·focal(0.5).
    let want = 4.0 * 0.25 * std::f64::consts::LN_2;
    ensure((r.loss - want).abs() < 1e-9, || {
        format!("set loss {} vs {want}", r.loss)
    })?;
    Ok("closed-form values reproduced".into())
}

fn box_fit() -> Outcome {
    let w = LossWeights::default();
    let mut worst = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut draw = || {
            BoundingBox::new(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.05..0.5),
                rng.random_range(0.05..0.5),
            )
        };
        let (target, start) = (lib(draw())?, lib(draw())?);
        let fit = fit_box(start, &target, &w, 1e-2, 1e-3, 5000);
        ensure(fit.converged, || {
            format!("seed {seed}: L1 {} after {} steps", fit.l1, fit.steps)
        })?;
        worst = worst.max(fit.steps);
    }
    Ok(format!("20/20 converged, at most {worst} steps"))
}

fn evaluation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut gts = vec![];
    for img in 0..4 {
        for _ in 0..3 {
            gts.push(GroundTruth {
                image_id: format!("i{img}"),
                bbox: lib(BoundingBox::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    0.2,
                    0.2,
                ))?,
                class_id: rng.random_range(0..2),
                pixel_area: rng.random_range(100.0..6000.0),
            });
        }
    }
    let perfect: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            image_id: g.image_id.clone(),
            bbox: g.bbox,
            score: 0.9,
            class_id: g.class_id,
        })
        .collect();
    let r = lib(map_range(&perfect, &gts))?;
    for (name, v) in r.metrics() {
        ensure(v.is_none_or(|v| v == 1.0), || {
            format!("perfect detector {name} = {v:?}")
        })?;
    }
    for trial in 0..50 {
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| -> std::result::Result<Detection, String> {
                let jitter = |v: f64, rng: &mut ChaCha8Rng| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
                Ok(Detection {
                    image_id: g.image_id.clone(),
                    bbox: lib(BoundingBox::new(
                        jitter(g.bbox.cx(), &mut rng),
                        jitter(g.bbox.cy(), &mut rng),
                        g.bbox.w() * rng.random_range(0.7..1.3),
                        g.bbox.h() * rng.random_range(0.7..1.3),
                    ))?,
                    score: rng.random(),
                    class_id: g.class_id,
                })
            })
            .collect::<std::result::Result<_, _>>()?;
        let mut prev = f64::INFINITY;
        for t in crate::eval::iou_thresholds() {
            let aps = crate::eval::per_class_ap_at(&dets, &gts, t);
            let m: f64 = aps.values().flatten().sum::<f64>() / aps.len() as f64;
            ensure(m <= prev + 1e-12, || format!("trial {trial}: AP rises at IoU {t}"))?;
            prev = m;
        }
    }
    Ok("perfect detector scores 1.0; AP monotone in IoU threshold".into())
}

fn naive_sc_down(x: &Tensor, p: &ScDownParams) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = p.out_channels();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    Tensor::from_fn(&[co, oh, ow], |i| {
        let (o, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let mut acc = 0.0;
        for ky in 0..3 {
            for kx in 0..3 {
                let (iy, ix) = ((2 * y + ky) as isize - 1, (2 * xx + kx) as isize - 1);
                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                    continue;
                }
                let mixed: f64 = (0..c)
                    .map(|ci| p.pointwise.at2(o, ci) * x.at3(ci, iy as usize, ix as usize))
                    .sum();
                acc += p.depthwise.at3(o, ky, kx) * mixed;
            }
        }
        acc
    })
}

fn hff() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let shapes = [(9, 8), (5, 4), (3, 2), (2, 1)];
    let p = random_pyramid(&mut rng, 3, &shapes);
    let down: Vec<ScDownParams> = (0..3)
        .map(|_| {
            ScDownParams::new(
                Tensor::random_uniform(&[3, 3], -1.0, 1.0, &mut rng),
                Tensor::random_uniform(&[3, 3, 3], -1.0, 1.0, &mut rng),
            )
        })
        .collect::<crate::Result<_>>()
        .map_err(|e| e.to_string())?;
    let f = lib(hff_fuse(&p, &down))?;
    ensure(f.levels[0] == p.levels[0], || "F1 differs from P1".into())?;
    for i in 1..4 {
        let want = p.levels[i]
            .add(&naive_sc_down(&f.levels[i - 1], &down[i - 1]))
            .map_err(|e| e.to_string())?;
        let err = want.max_abs_diff(&f.levels[i]);
        ensure(err < 1e-10, || {
            format!("level {i} differs from naive convolution by {err}")
        })?;
    }
    let zero = lib(hff_fuse(&p, &vec![ScDownParams::zeros(3, 3); 3]))?;
    ensure(zero == p, || "zero SCDown changed the pyramid".into())?;
    for n in [1, 2, 7, 8, 15, 16] {
        let out = lib(sc_down(&Tensor::zeros(&[1, n, n + 1]), &ScDownParams::zeros(1, 1)))?;
        ensure(out.shape()[1..] == [n.div_ceil(2), (n + 1).div_ceil(2)], || {
            format!("extent {n}")
        })?;
    }
    Ok("fusion matches naive convolution".into())
}

fn posenc() -> Outcome {
    let cfg = PosEncConfig::default();
    let pe = lib(positional_encoding(0.0, &cfg))?;
    for (j, v) in pe.data().iter().enumerate() {
        ensure(*v == if j % 2 == 0 { 0.0 } else { 1.0 }, || {
            format!("pos 0 slot {j} = {v}")
        })?;
    }
    let v = lib(positional_encoding(1.0, &cfg))?.data()[0];
    ensure((v - 0.05f64.sin()).abs() < 1e-12, || format!("slot 0 at pos 1 = {v}"))?;
    for pos in [0.1, 0.5, 1.0] {
        let mut prev = f64::INFINITY;
        for t in [1.0, 10.0, 20.0, 30.0] {
            let c = lib(PosEncConfig::new(64, t))?;
            let v = lib(positional_encoding(pos, &c))?.data()[0].abs();
            ensure(v < prev, || format!("pos {pos}: |PE| does not shrink at T = {t}"))?;
            prev = v;
        }
    }
    Ok("origin pattern, first slot and temperature ordering".into())
}

fn denoise() -> Outcome {
    let gts: Vec<LabeledBox> = (0..10)
        .map(|i| LabeledBox {
            bbox: BoundingBox::new(0.1 + 0.08 * i as f64, 0.5, 0.1, 0.2).unwrap(),
            class_id: i % 2,
        })
        .collect();
    let none = DnNoise {
        box_noise_scale: 0.0,
        label_flip_prob: 0.0,
    };
    let out = lib(denoise_perturb(&gts, &none, 2, &mut ChaCha8Rng::seed_from_u64(1)))?;
    ensure(
        out.iter()
            .zip(&gts)
            .all(|(o, g)| o.bbox == g.bbox && o.class_id == g.class_id),
        || "zero noise changed a box".into(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut flips = 0;
    for _ in 0..1000 {
        flips += lib(denoise_perturb(&gts, &DnNoise::default(), 2, &mut rng))?
            .iter()
            .filter(|q| q.flipped)
            .count();
    }
    let rate = flips as f64 / 10_000.0;
    ensure((rate - 0.2).abs() <= 0.02, || format!("flip rate {rate}"))?;
    let a = lib(denoise_perturb(
        &gts,
        &DnNoise::default(),
        2,
        &mut ChaCha8Rng::seed_from_u64(9),
    ))?;
    let b = lib(denoise_perturb(
        &gts,
        &DnNoise::default(),
        2,
        &mut ChaCha8Rng::seed_from_u64(9),
    ))?;
    ensure(a == b, || "same seed, different perturbation".into())?;
    Ok(format!("flip rate {rate:.4}"))
}

fn pipeline() -> Outcome {
    let cfg = PipelineConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        num_queries: 8,
        ..PipelineConfig::default()
    };
    let params = lib(ToyParams::new(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)))?;
    let scene = lib(gen_synthetic_scene(
        "s",
        &SceneSpec::default(),
        &mut ChaCha8Rng::seed_from_u64(108),
    ))?;
    let a = lib(run_model(&scene.image, &cfg, &params))?;
    let b = lib(run_model(&scene.image, &cfg, &params))?;
    ensure(a == b, || "forward pass is not deterministic".into())?;
    let tokens: usize = a.spatial_shapes.iter().map(|(h, w)| h * w).sum();
    ensure(a.token_count == tokens && a.boxes.len() == 8, || {
        "shape contract violated".into()
    })?;
    Ok(format!("{tokens} tokens, {} queries", a.boxes.len()))
}
