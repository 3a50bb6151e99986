//! Hierarchical feature fusion over a four-level pyramid.
//!
//! `F₁ = P₁` and `Fᵢ = Pᵢ + SCDown(Fᵢ₋₁)`, where SCDown is a 1×1 pointwise channel mix
//! followed by a 3×3 depthwise convolution with stride 2 and zero padding 1.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCDOWN_KERNEL: usize = 3;
pub const SCDOWN_STRIDE: usize = 2;
pub const SCDOWN_PADDING: usize = 1;
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ScDownParams {
    /// `Cout×Cin`
    pub pointwise: Tensor,
    /// `Cout×3×3`, one kernel per output channel.
    pub depthwise: Tensor,
    pub pointwise_bias: Option<Tensor>,
    pub depthwise_bias: Option<Tensor>,
}

impl ScDownParams {
    pub fn new(pointwise: Tensor, depthwise: Tensor) -> Result<Self> {
        let (cout, _) = pointwise.dims2()?;
        let (dc, kh, kw) = depthwise.dims3()?;
        if dc != cout || kh != SCDOWN_KERNEL || kw != SCDOWN_KERNEL {
            return Err(Error::dim(
                "ScDownParams",
                format!("depthwise {cout}×3×3"),
                format!("{dc}×{kh}×{kw}"),
            ));
        }
        Ok(Self {
            pointwise,
            depthwise,
            pointwise_bias: None,
            depthwise_bias: None,
        })
    }

    pub fn with_bias(mut self, pointwise_bias: Tensor, depthwise_bias: Tensor) -> Result<Self> {
        let cout = self.out_channels();
        if pointwise_bias.len() != cout || depthwise_bias.len() != cout {
            return Err(Error::dim("ScDownParams::with_bias", cout, pointwise_bias.len()));
        }
        self.pointwise_bias = Some(pointwise_bias);
        self.depthwise_bias = Some(depthwise_bias);
        Ok(self)
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self::new(Tensor::zeros(&[cout, cin]), Tensor::zeros(&[cout, 3, 3])).expect("consistent shapes")
    }

    pub fn in_channels(&self) -> usize {
        self.pointwise.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.pointwise.shape()[0]
    }
}

pub fn downsampled_extent(n: usize) -> usize {
    n.div_ceil(2)
}

/// 1×1 convolution: `out[o] = Σ_c W[o,c]·x[c] (+ b[o])`.
pub fn pointwise_conv(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (cout, cin) = weight.dims2()?;
    if cin != c {
        return Err(Error::dim("pointwise_conv", format!("{cin} input channels"), c));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[cout, h, w]);
    let od = out.data_mut();
    for o in 0..cout {
        let dst = &mut od[o * hw..(o + 1) * hw];
        if let Some(b) = bias {
            dst.fill(b.data()[o]);
        }
        for (ci, &wv) in weight.row(o).iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            for (d, s) in dst.iter_mut().zip(x.channel(ci)) {
                *d += wv * s;
            }
        }
    }
    Ok(out)
}

/// Depthwise 3×3 convolution with the given stride and zero padding 1.
fn depthwise_conv(x: &Tensor, kernels: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (kc, _, _) = kernels.dims3()?;
    if kc != c {
        return Err(Error::dim("depthwise_conv", c, kc));
    }
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let b = bias.map_or(0.0, |b| b.data()[ch]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ky in 0..SCDOWN_KERNEL {
                    let iy = (oy * stride + ky) as isize - SCDOWN_PADDING as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..SCDOWN_KERNEL {
                        let ix = (ox * stride + kx) as isize - SCDOWN_PADDING as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += kernels.at3(ch, ky, kx) * x.at3(ch, iy as usize, ix as usize);
                    }
                }
                out.set3(ch, oy, ox, acc);
            }
        }
    }
    Ok(out)
}

/// Spatial-channel decoupled downsampling: pointwise mix, then stride-2 depthwise.
/// Output is `Cout×⌈H/2⌉×⌈W/2⌉`.
pub fn sc_down(f: &Tensor, params: &ScDownParams) -> Result<Tensor> {
    let mixed = pointwise_conv(f, &params.pointwise, params.pointwise_bias.as_ref())?;
    depthwise_conv(&mixed, &params.depthwise, params.depthwise_bias.as_ref(), SCDOWN_STRIDE)
}

/// Dense 3×3 convolution with zero padding 1. `weight` is `D×C×3×3`; the output is
/// `D×⌈H/stride⌉×⌈W/stride⌉`.
pub fn conv3x3(x: &Tensor, weight: &Tensor, stride: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (d, wc, kh, kw) = match weight.shape()[..] {
        [d, wc, kh, kw] => (d, wc, kh, kw),
        _ => return Err(Error::dim("conv3x3", "rank-4 weight", format!("{:?}", weight.shape()))),
    };
    if wc != c || kh != 3 || kw != 3 {
        return Err(Error::dim(
            "conv3x3",
            format!("{d}×{c}×3×3"),
            format!("{d}×{wc}×{kh}×{kw}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv3x3 stride must be positive"));
    }
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = Tensor::zeros(&[d, oh, ow]);
    let wd = weight.data();
    let od = out.data_mut();
    for o in 0..d {
        for ci in 0..c {
            let k = &wd[(o * c + ci) * 9..(o * c + ci + 1) * 9];
            let src = x.channel(ci);
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        let iy = (y * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (xx * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += k[ky * 3 + kx] * src[iy as usize * w + ix as usize];
                        }
                    }
                    od[(o * oh + y) * ow + xx] += acc;
                }
            }
        }
    }
    Ok(out)
}

/// Group normalization with unit scale and zero shift.
pub fn group_norm(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(format!("{groups} groups do not divide {c} channels")));
    }
    let span = (c / groups) * h * w;
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(span) {
        let n = chunk.len() as f64;
        let mean = chunk.iter().sum::<f64>() / n;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    Ok(out)
}

/// Largest divisor of `channels` not exceeding `preferred`.
pub fn clip_groups(preferred: usize, channels: usize) -> usize {
    (1..=preferred.min(channels).max(1))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Projection weight for [`project_level`].
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    /// `D×C` 1×1 projection.
    Pointwise(Tensor),
    /// `D×C×3×3` stride-2 convolution, used to add a level below the coarsest stage.
    Conv3x3(Tensor),
}

/// Channel projection followed by group normalization.
pub fn project_level(s: &Tensor, proj: &Projection, groups: usize) -> Result<Tensor> {
    let projected = match proj {
        Projection::Pointwise(w) => pointwise_conv(s, w, None)?,
        Projection::Conv3x3(w) => conv3x3(s, w, 2)?,
    };
    group_norm(&projected, groups)
}

/// Ordered pyramid levels, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevels {
    pub levels: Vec<Tensor>,
}

impl PyramidLevels {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        for (i, l) in levels.iter().enumerate() {
            l.dims3().map_err(|_| Error::ShapeChain {
                level: i,
                reason: format!("expected C×H×W, got {:?}", l.shape()),
            })?;
        }
        Ok(Self { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// `(H, W)` per level.
    pub fn spatial_shapes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.shape()[1], l.shape()[2])).collect()
    }

    /// `Σ H·W` over levels.
    pub fn token_count(&self) -> usize {
        self.spatial_shapes().iter().map(|(h, w)| h * w).sum()
    }
}

/// Down-top fusion. `down[i]` maps level `i` onto level `i + 1`.
pub fn hff_fuse(p: &PyramidLevels, down: &[ScDownParams]) -> Result<PyramidLevels> {
    if p.len() < 2 {
        return Err(Error::ShapeChain {
            level: p.len(),
            reason: "fusion needs at least two levels".into(),
        });
    }
    if down.len() != p.len() - 1 {
        return Err(Error::ShapeChain {
            level: down.len().min(p.len() - 1),
            reason: format!(
                "{} levels need {} SCDown blocks, got {}",
                p.len(),
                p.len() - 1,
                down.len()
            ),
        });
    }
    let mut fused = Vec::with_capacity(p.len());
    fused.push(p.levels[0].clone());
    for i in 1..p.len() {
        let (pc, ph, pw) = p.levels[i].dims3()?;
        let (fc, fh, fw) = fused[i - 1].dims3()?;
        let params = &down[i - 1];
        if params.in_channels() != fc || params.out_channels() != pc {
            return Err(Error::ShapeChain {
                level: i,
                reason: format!(
                    "SCDown maps {}→{} channels, pyramid needs {fc}→{pc}",
                    params.in_channels(),
                    params.out_channels()
                ),
            });
        }
        if downsampled_extent(fh) != ph || downsampled_extent(fw) != pw {
            return Err(Error::ShapeChain {
                level: i,
                reason: format!("{fh}×{fw} does not halve to {ph}×{pw}"),
            });
        }
        let d = sc_down(&fused[i - 1], params)?;
        fused.push(p.levels[i].add(&d)?);
    }
    Ok(PyramidLevels { levels: fused })
}
