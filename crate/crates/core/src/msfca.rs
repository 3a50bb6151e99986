//! Multi-spectral frequency channel attention.
//!
//! Channels are split into `n` consecutive groups; each group is compressed to one
//! scalar per channel by projecting onto a single 2D DCT basis image. The concatenated
//! `C`-vector goes through a square fc layer and a sigmoid, and the result rescales
//! the input channels.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{linear, sigmoid, Tensor};

/// One unnormalized type-II 2D DCT basis image,
/// `B[h, w] = cos(π·u·(h+½)/H) · cos(π·v·(w+½)/W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DctBasis {
    pub u: usize,
    pub v: usize,
    pub values: Tensor,
}

impl DctBasis {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Squared norm `Σ B²`: `H·W` scaled by ½ for each nonzero frequency index.
    pub fn norm_sq(&self) -> f64 {
        basis_norm_sq(self.height(), self.width(), self.u, self.v)
    }
}

pub fn basis_norm_sq(h: usize, w: usize, u: usize, v: usize) -> f64 {
    let fu = if u == 0 { 1.0 } else { 0.5 };
    let fv = if v == 0 { 1.0 } else { 0.5 };
    h as f64 * fu * w as f64 * fv
}

fn check_freq(h: usize, w: usize, u: usize, v: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("empty DCT grid {h}×{w}")));
    }
    if u >= h || v >= w {
        return Err(Error::invalid(format!(
            "frequency ({u}, {v}) out of range for a {h}×{w} grid"
        )));
    }
    Ok(())
}

fn cos_table(n: usize, k: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (PI * k as f64 * (i as f64 + 0.5) / n as f64).cos())
        .collect()
}

pub fn dct_basis(h: usize, w: usize, u: usize, v: usize) -> Result<DctBasis> {
    check_freq(h, w, u, v)?;
    let cu = cos_table(h, u);
    let cv = cos_table(w, v);
    let values = Tensor::from_fn(&[h, w], |i| cu[i / w] * cv[i % w]);
    Ok(DctBasis { u, v, values })
}

/// `Freq[c] = Σ_{h,w} part[c,h,w] · B^{u,v}[h,w]` for a `C₀×H×W` part.
pub fn freq_compress(part: &Tensor, u: usize, v: usize) -> Result<Tensor> {
    let (c, h, w) = part.dims3()?;
    let basis = dct_basis(h, w, u, v)?;
    let out = (0..c)
        .map(|ch| crate::tensor::dot(part.channel(ch), basis.values.data()))
        .collect();
    Ok(Tensor::vector(out))
}

/// Per-group frequency pairs. Group `i` covers channels `[i·C/n, (i+1)·C/n)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyAssignment {
    pub pairs: Vec<(usize, usize)>,
}

impl FrequencyAssignment {
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("frequency assignment needs at least one group"));
        }
        Ok(Self { pairs })
    }

    /// The first `n` frequencies of the low-frequency zigzag walk
    /// (0,0), (0,1), (1,0), (1,1), (0,2), (2,0), (1,2), (2,1), (2,2), (0,3), …
    /// i.e. by ascending `max(u, v)`, then ascending `min(u, v)`, then `(min, max)` before `(max, min)`.
    pub fn zigzag(n: usize) -> Self {
        let mut pairs = Vec::with_capacity(n);
        let mut ring = 0;
        'outer: loop {
            for lo in 0..=ring {
                let cands = if lo == ring {
                    vec![(ring, ring)]
                } else {
                    vec![(lo, ring), (ring, lo)]
                };
                for p in cands {
                    if pairs.len() == n {
                        break 'outer;
                    }
                    pairs.push(p);
                }
            }
            ring += 1;
        }
        Self { pairs }
    }

    /// Default group count for `c` channels: 16 when `c ≥ 16` and divisible, else `c`.
    pub fn default_groups(c: usize) -> usize {
        if c >= 16 && c.is_multiple_of(16) {
            16
        } else {
            c
        }
    }

    pub fn groups(&self) -> usize {
        self.pairs.len()
    }

    /// Copy with every index clamped into an `h×w` grid. Groups keep their positions,
    /// so on grids with fewer than `groups()` cells some groups share a frequency.
    pub fn clamped_to(&self, h: usize, w: usize) -> Self {
        let (hm, wm) = (h.saturating_sub(1), w.saturating_sub(1));
        Self {
            pairs: self.pairs.iter().map(|&(u, v)| (u.min(hm), v.min(wm))).collect(),
        }
    }

    /// Checks divisibility and index ranges for a `C×H×W` input.
    pub fn validate(&self, c: usize, h: usize, w: usize) -> Result<()> {
        let n = self.groups();
        if n == 0 || !c.is_multiple_of(n) {
            return Err(Error::invalid(format!(
                "{n} frequency groups do not divide {c} channels"
            )));
        }
        for &(u, v) in &self.pairs {
            check_freq(h, w, u, v)?;
        }
        Ok(())
    }
}

/// Splits `x` into the assignment's groups, compresses each with its own frequency and
/// concatenates in group order.
pub fn multi_spectral_compress(x: &Tensor, assignment: &FrequencyAssignment) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    assignment.validate(c, h, w)?;
    let group = c / assignment.groups();
    let hw = h * w;
    let mut out = Vec::with_capacity(c);
    for (g, &(u, v)) in assignment.pairs.iter().enumerate() {
        let basis = dct_basis(h, w, u, v)?;
        for ch in g * group..(g + 1) * group {
            out.push(crate::tensor::dot(
                &x.data()[ch * hw..(ch + 1) * hw],
                basis.values.data(),
            ));
        }
    }
    Ok(Tensor::vector(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsfcaParams {
    pub assignment: FrequencyAssignment,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

impl MsfcaParams {
    pub fn new(assignment: FrequencyAssignment, fc_weight: Tensor, fc_bias: Tensor) -> Result<Self> {
        let (r, c) = fc_weight.dims2()?;
        if r != c || fc_bias.len() != r {
            return Err(Error::dim(
                "MsfcaParams",
                format!("{r}×{r} weight and bias of length {r}"),
                format!("{r}×{c} weight, bias of length {}", fc_bias.len()),
            ));
        }
        Ok(Self {
            assignment,
            fc_weight,
            fc_bias,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc_bias.len()
    }
}

/// Channel attention weights `sigmoid(fc(compress(x)))`, each strictly inside (0, 1)
/// for moderate logits.
pub fn msfca_attention(x: &Tensor, params: &MsfcaParams) -> Result<Tensor> {
    let (c, _, _) = x.dims3()?;
    if c != params.channels() {
        return Err(Error::dim("apply_msfca", params.channels(), c));
    }
    let freq = multi_spectral_compress(x, &params.assignment)?;
    Ok(sigmoid(&linear(&freq, &params.fc_weight, &params.fc_bias)?))
}

pub fn apply_msfca(x: &Tensor, params: &MsfcaParams) -> Result<Tensor> {
    let att = msfca_attention(x, params)?;
    let (_, h, w) = x.dims3()?;
    let hw = h * w;
    let mut out = x.clone();
    for (ch, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
        let a = att.data()[ch];
        chunk.iter_mut().for_each(|v| *v *= a);
    }
    Ok(out)
}

/// Inverse of the full set of `H·W` compressions of a single-channel `H×W` grid.
///
/// `coeffs[u·W + v]` must be the compression with `(u, v)`; each is divided by the
/// basis' squared norm and the bases are summed back up.
pub fn inverse_dct(coeffs: &[f64], h: usize, w: usize) -> Result<Tensor> {
    if coeffs.len() != h * w {
        return Err(Error::dim("inverse_dct", h * w, coeffs.len()));
    }
    let mut out = Tensor::zeros(&[h, w]);
    for u in 0..h {
        for v in 0..w {
            let b = dct_basis(h, w, u, v)?;
            let k = coeffs[u * w + v] / b.norm_sq();
            for (o, bv) in out.data_mut().iter_mut().zip(b.values.data()) {
                *o += k * bv;
            }
        }
    }
    Ok(out)
}
