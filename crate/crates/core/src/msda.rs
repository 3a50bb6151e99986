//! Multi-scale deformable attention.
//!
//! For a query feature `z` and a normalized reference point, each head `h` predicts
//! `L·K` pixel offsets and `L·K` softmax-normalized weights from `z`, bilinearly samples
//! every pyramid level at the shifted reference locations, and aggregates:
//!
//! ```text
//! out = Σ_h W_out[h] · W_val[h] · Σ_{l,k} A[h,l,k] · x_l(φ_l(p̂) + Δp[h,l,k])
//! ```
//!
//! Offsets are in pixels of the level they are applied to. φ_l is pixel-center aligned.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hff::PyramidLevels;
use crate::tensor::{self, matvec_t, outer_acc, sample_accumulate, sample_backward, Point2D, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MsdaParams {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub d_model: usize,
    /// Per head, `head_dim×d_model`.
    pub value_proj: Vec<Tensor>,
    /// Per head, `d_model×head_dim`.
    pub output_proj: Vec<Tensor>,
    /// `(H·L·K·2)×d_model`; row `2·((h·L + l)·K + k) + {0: x, 1: y}`.
    pub offset_weight: Tensor,
    pub offset_bias: Tensor,
    /// `(H·L·K)×d_model`; row `(h·L + l)·K + k`.
    pub attn_weight: Tensor,
    pub attn_bias: Tensor,
}

impl MsdaParams {
    /// All-zero parameters. Fails unless `heads` divides `d_model`.
    pub fn zeros(heads: usize, levels: usize, points: usize, d_model: usize) -> Result<Self> {
        if heads == 0 || levels == 0 || points == 0 || d_model == 0 {
            return Err(Error::invalid("MSDA sizes must be positive"));
        }
        if !d_model.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "{heads} heads do not divide d_model = {d_model}"
            )));
        }
        let hd = d_model / heads;
        let n = heads * levels * points;
        Ok(Self {
            heads,
            levels,
            points,
            d_model,
            value_proj: vec![Tensor::zeros(&[hd, d_model]); heads],
            output_proj: vec![Tensor::zeros(&[d_model, hd]); heads],
            offset_weight: Tensor::zeros(&[2 * n, d_model]),
            offset_bias: Tensor::zeros(&[2 * n]),
            attn_weight: Tensor::zeros(&[n, d_model]),
            attn_bias: Tensor::zeros(&[n]),
        })
    }

    /// Uniform random parameters in `[-scale, scale]` (offset bias in `[-offset_scale, offset_scale]`).
    pub fn random<R: Rng + ?Sized>(
        heads: usize,
        levels: usize,
        points: usize,
        d_model: usize,
        scale: f64,
        offset_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(heads, levels, points, d_model)?;
        let mut fill = |t: &mut Tensor, s: f64| {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-s..=s));
        };
        for t in p.value_proj.iter_mut().chain(p.output_proj.iter_mut()) {
            fill(t, scale);
        }
        fill(&mut p.offset_weight, scale);
        fill(&mut p.offset_bias, offset_scale);
        fill(&mut p.attn_weight, scale);
        fill(&mut p.attn_bias, scale);
        Ok(p)
    }

    /// Value projections select each head's channel slice and output projections put it
    /// back, so that `Σ_h W_out[h]·W_val[h]` is the identity.
    pub fn with_identity_projections(mut self) -> Self {
        let hd = self.head_dim();
        for h in 0..self.heads {
            let d = self.d_model;
            self.value_proj[h] = Tensor::from_fn(&[hd, d], |i| if i % d == h * hd + i / d { 1.0 } else { 0.0 });
            self.output_proj[h] = Tensor::from_fn(&[d, hd], |i| if i / hd == h * hd + i % hd { 1.0 } else { 0.0 });
        }
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// `H·L·K`
    pub fn sample_count(&self) -> usize {
        self.heads * self.levels * self.points
    }

    pub fn index(&self, h: usize, l: usize, k: usize) -> usize {
        (h * self.levels + l) * self.points + k
    }

    pub fn validate(&self) -> Result<()> {
        let (d, hd, n) = (self.d_model, self.head_dim(), self.sample_count());
        let bad = |what: &str, t: &Tensor, want: &[usize]| -> Result<()> {
            if t.shape() != want {
                return Err(Error::dim(
                    "MsdaParams",
                    format!("{what} {want:?}"),
                    format!("{:?}", t.shape()),
                ));
            }
            Ok(())
        };
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::invalid("heads must divide d_model"));
        }
        if self.value_proj.len() != self.heads || self.output_proj.len() != self.heads {
            return Err(Error::dim("MsdaParams", self.heads, self.value_proj.len()));
        }
        for (v, o) in self.value_proj.iter().zip(&self.output_proj) {
            bad("value_proj", v, &[hd, d])?;
            bad("output_proj", o, &[d, hd])?;
        }
        bad("offset_weight", &self.offset_weight, &[2 * n, d])?;
        bad("offset_bias", &self.offset_bias, &[2 * n])?;
        bad("attn_weight", &self.attn_weight, &[n, d])?;
        bad("attn_bias", &self.attn_bias, &[n])?;
        Ok(())
    }
}

/// A normalized anchor in `[0, 1]²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferencePoint {
    x: f64,
    y: f64,
}

impl ReferencePoint {
    /// Clamps both coordinates into `[0, 1]`. NaN maps to 0.
    pub fn new(x: f64, y: f64) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        Self { x: c(x), y: c(y) }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }
}

/// φ_l: `x = x̂·W − 0.5`, `y = ŷ·H − 0.5`.
pub fn map_reference(p: ReferencePoint, height: usize, width: usize) -> Point2D {
    Point2D::new(p.x * width as f64 - 0.5, p.y * height as f64 - 0.5)
}

/// Per-sample offsets and attention weights for one query, indexed by [`MsdaParams::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sampling {
    pub offsets: Vec<Point2D>,
    pub weights: Vec<f64>,
}

pub fn sampling_offsets_and_weights(z: &Tensor, params: &MsdaParams) -> Result<Sampling> {
    if z.len() != params.d_model {
        return Err(Error::dim("sampling_offsets_and_weights", params.d_model, z.len()));
    }
    let raw = tensor::linear(z, &params.offset_weight, &params.offset_bias)?;
    let offsets = raw.data().chunks_exact(2).map(|c| Point2D::new(c[0], c[1])).collect();
    let logits = tensor::linear(z, &params.attn_weight, &params.attn_bias)?;
    let per_head = params.levels * params.points;
    let weights = logits
        .data()
        .chunks_exact(per_head)
        .flat_map(tensor::softmax_slice)
        .collect();
    Ok(Sampling { offsets, weights })
}

fn check_levels(maps: &[&Tensor], params: &MsdaParams) -> Result<Vec<(usize, usize, usize)>> {
    if maps.len() != params.levels {
        return Err(Error::dim(
            "ms_deform_attn",
            format!("{} levels", params.levels),
            maps.len(),
        ));
    }
    maps.iter()
        .map(|m| {
            let dims = m.dims3()?;
            if dims.0 != params.d_model {
                return Err(Error::dim(
                    "ms_deform_attn",
                    format!("{} channels", params.d_model),
                    dims.0,
                ));
            }
            Ok(dims)
        })
        .collect()
}

/// Shared kernel: `bases[l]` is the pixel-space anchor on level `l`.
fn attend(z: &Tensor, bases: &[Point2D], maps: &[&Tensor], params: &MsdaParams) -> Result<Tensor> {
    let dims = check_levels(maps, params)?;
    let sampling = sampling_offsets_and_weights(z, params)?;
    let d = params.d_model;
    let mut out = vec![0.0; d];
    let mut gathered = vec![0.0; d];
    let mut projected = vec![0.0; params.head_dim()];
    for h in 0..params.heads {
        gathered.fill(0.0);
        for (l, (map, &dim)) in maps.iter().zip(&dims).enumerate() {
            for k in 0..params.points {
                let i = params.index(h, l, k);
                let off = sampling.offsets[i];
                let loc = Point2D::new(bases[l].x + off.x, bases[l].y + off.y);
                sample_accumulate(map.data(), dim, loc, sampling.weights[i], &mut gathered);
            }
        }
        for (j, pv) in projected.iter_mut().enumerate() {
            *pv = tensor::dot(params.value_proj[h].row(j), &gathered);
        }
        let wo = &params.output_proj[h];
        for (j, o) in out.iter_mut().enumerate() {
            *o += tensor::dot(wo.row(j), &projected);
        }
    }
    Ok(Tensor::vector(out))
}

/// Single-level deformable attention around a pixel-space point `p_q` on map `x`.
/// `params.levels` must be 1.
pub fn deform_attn_head(z: &Tensor, p_q: Point2D, x: &Tensor, params: &MsdaParams) -> Result<Tensor> {
    if params.levels != 1 {
        return Err(Error::invalid(format!(
            "single-level attention needs levels = 1, got {}",
            params.levels
        )));
    }
    attend(z, &[p_q], &[x], params)
}

pub fn ms_deform_attn(
    z: &Tensor,
    reference: ReferencePoint,
    pyramid: &PyramidLevels,
    params: &MsdaParams,
) -> Result<Tensor> {
    let maps: Vec<&Tensor> = pyramid.levels.iter().collect();
    let bases = level_anchors(reference, pyramid);
    attend(z, &bases, &maps, params)
}

fn level_anchors(reference: ReferencePoint, pyramid: &PyramidLevels) -> Vec<Point2D> {
    pyramid
        .spatial_shapes()
        .into_iter()
        .map(|(h, w)| map_reference(reference, h, w))
        .collect()
}

/// Gradients of `⟨upstream, ms_deform_attn(...)⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct MsdaGrad {
    pub query: Tensor,
    pub pyramid: Vec<Tensor>,
    pub value_proj: Vec<Tensor>,
    pub output_proj: Vec<Tensor>,
    pub offset_weight: Tensor,
    pub offset_bias: Tensor,
    pub attn_weight: Tensor,
    pub attn_bias: Tensor,
}

pub fn ms_deform_attn_grad(
    z: &Tensor,
    reference: ReferencePoint,
    pyramid: &PyramidLevels,
    params: &MsdaParams,
    upstream: &Tensor,
) -> Result<MsdaGrad> {
    let maps: Vec<&Tensor> = pyramid.levels.iter().collect();
    let dims = check_levels(&maps, params)?;
    let (d, hd, n) = (params.d_model, params.head_dim(), params.sample_count());
    if upstream.len() != d {
        return Err(Error::dim("ms_deform_attn_grad", d, upstream.len()));
    }
    let bases = level_anchors(reference, pyramid);
    let sampling = sampling_offsets_and_weights(z, params)?;
    let level_of = |i: usize| (i / params.points) % params.levels;
    let loc = |i: usize| {
        let b = bases[level_of(i)];
        let o = sampling.offsets[i];
        Point2D::new(b.x + o.x, b.y + o.y)
    };

    // Forward, keeping every sample.
    let mut samples = vec![0.0; n * d];
    for i in 0..n {
        let l = level_of(i);
        sample_accumulate(maps[l].data(), dims[l], loc(i), 1.0, &mut samples[i * d..(i + 1) * d]);
    }

    let g = upstream.data();
    let mut grad_pyr: Vec<Tensor> = maps.iter().map(|m| Tensor::zeros(m.shape())).collect();
    let mut grad_val = vec![Tensor::zeros(&[hd, d]); params.heads];
    let mut grad_out = vec![Tensor::zeros(&[d, hd]); params.heads];
    let mut grad_logits = vec![0.0; n];
    let mut grad_offsets = vec![0.0; 2 * n];
    let per_head = params.levels * params.points;

    for h in 0..params.heads {
        let head = h * per_head..(h + 1) * per_head;
        let mut gathered = vec![0.0; d];
        for i in head.clone() {
            let a = sampling.weights[i];
            for (s, x) in gathered.iter_mut().zip(&samples[i * d..(i + 1) * d]) {
                *s += a * x;
            }
        }
        let projected: Vec<f64> = (0..hd)
            .map(|j| tensor::dot(params.value_proj[h].row(j), &gathered))
            .collect();

        let mut g_proj = vec![0.0; hd];
        matvec_t(&params.output_proj[h], g, &mut g_proj);
        outer_acc(grad_out[h].data_mut(), g, &projected);
        let mut g_gathered = vec![0.0; d];
        matvec_t(&params.value_proj[h], &g_proj, &mut g_gathered);
        outer_acc(grad_val[h].data_mut(), &g_proj, &gathered);

        let mut g_weights = vec![0.0; per_head];
        let mut scaled = vec![0.0; d];
        for (j, i) in head.clone().enumerate() {
            g_weights[j] = tensor::dot(&g_gathered, &samples[i * d..(i + 1) * d]);
            let a = sampling.weights[i];
            for (s, gg) in scaled.iter_mut().zip(&g_gathered) {
                *s = a * gg;
            }
            let l = level_of(i);
            let dp = sample_backward(maps[l].data(), dims[l], loc(i), &scaled, Some(grad_pyr[l].data_mut()));
            grad_offsets[2 * i] = dp.x;
            grad_offsets[2 * i + 1] = dp.y;
        }
        // Softmax backward within the head.
        let w = &sampling.weights[head.clone()];
        let mean: f64 = w.iter().zip(&g_weights).map(|(a, gw)| a * gw).sum();
        for (j, i) in head.enumerate() {
            grad_logits[i] = w[j] * (g_weights[j] - mean);
        }
    }

    let mut offset_weight = Tensor::zeros(&[2 * n, d]);
    outer_acc(offset_weight.data_mut(), &grad_offsets, z.data());
    let mut attn_weight = Tensor::zeros(&[n, d]);
    outer_acc(attn_weight.data_mut(), &grad_logits, z.data());
    let mut query = vec![0.0; d];
    matvec_t(&params.offset_weight, &grad_offsets, &mut query);
    matvec_t(&params.attn_weight, &grad_logits, &mut query);

    Ok(MsdaGrad {
        query: Tensor::vector(query),
        pyramid: grad_pyr,
        value_proj: grad_val,
        output_proj: grad_out,
        offset_weight,
        offset_bias: Tensor::vector(grad_offsets),
        attn_weight,
        attn_bias: Tensor::vector(grad_logits),
    })
}
