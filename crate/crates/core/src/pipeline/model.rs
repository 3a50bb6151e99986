//! Toy forward pass: stub backbone, channel attention, fusion, deformable encoder and
//! decoder, prediction heads. Weights are random but fixed by the seed.

use rand::Rng;

use super::config::{PipelineConfig, NUM_CLASSES};
use super::scene::SyntheticScene;
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::hff::{self, clip_groups, hff_fuse, project_level, Projection, PyramidLevels, ScDownParams};
use crate::matching::{BoundingBox, MIN_EXTENT};
use crate::msda::{ms_deform_attn, MsdaParams, ReferencePoint};
use crate::msfca::{apply_msfca, MsfcaParams};
use crate::posenc::encode_2d_grid;
use crate::tensor::{self, sigmoid_scalar, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const PROJECTION_GROUPS: usize = 32;
/// Initial sampling offsets are drawn from `±OFFSET_RANGE` pixels.
const OFFSET_RANGE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
struct Ffn {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Ffn {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = tensor::linear(x, &self.w1, &self.b1)?.map(|v| v.max(0.0));
        tensor::linear(&hidden, &self.w2, &self.b2)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct AttentionLayer {
    attn: MsdaParams,
    ffn: Ffn,
}

/// All weights of the toy model.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyParams {
    backbone: Vec<Tensor>,
    msfca: Vec<MsfcaParams>,
    projections: Vec<Projection>,
    down: Vec<ScDownParams>,
    encoder: Vec<AttentionLayer>,
    decoder: Vec<AttentionLayer>,
    query_content: Tensor,
    query_pos: Tensor,
    ref_weight: Tensor,
    ref_bias: Tensor,
    box_weight: Tensor,
    box_bias: Tensor,
    class_weight: Tensor,
    class_bias: Tensor,
}

/// Uniform in `±sqrt(3/fan_in)`, i.e. variance `1/fan_in`.
fn init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let s = (3.0 / fan_in as f64).sqrt();
    Tensor::random_uniform(shape, -s, s, rng)
}

impl ToyParams {
    /// Draws every weight from `rng`. The config is validated first.
    pub fn new<R: Rng + ?Sized>(cfg: &PipelineConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let ch = cfg.backbone_channels;
        let assignment = cfg.msfca.assignment()?;

        let mut backbone = Vec::with_capacity(4);
        let mut msfca = Vec::with_capacity(4);
        let mut cin = 1;
        for &c in &ch {
            backbone.push(init(&[c, cin, 3, 3], cin * 9, rng));
            msfca.push(MsfcaParams::new(
                assignment.clone(),
                init(&[c, c], c, rng),
                Tensor::zeros(&[c]),
            )?);
            cin = c;
        }
        let projections = vec![
            Projection::Pointwise(init(&[d, ch[1]], ch[1], rng)),
            Projection::Pointwise(init(&[d, ch[2]], ch[2], rng)),
            Projection::Pointwise(init(&[d, ch[3]], ch[3], rng)),
            Projection::Conv3x3(init(&[d, ch[3], 3, 3], ch[3] * 9, rng)),
        ];
        let down = (0..3)
            .map(|_| ScDownParams::new(init(&[d, d], d, rng), init(&[d, 3, 3], 9, rng)))
            .collect::<Result<Vec<_>>>()?;

        let layer = |rng: &mut R| -> Result<AttentionLayer> {
            let scale = (3.0 / d as f64).sqrt();
            let m = cfg.msda;
            let attn = MsdaParams::random(m.heads, m.levels, m.points, d, scale, OFFSET_RANGE, rng)?;
            let ffn = Ffn {
                w1: init(&[2 * d, d], d, rng),
                b1: Tensor::zeros(&[2 * d]),
                w2: init(&[d, 2 * d], 2 * d, rng),
                b2: Tensor::zeros(&[d]),
            };
            Ok(AttentionLayer { attn, ffn })
        };
        let encoder = (0..cfg.encoder_layers)
            .map(|_| layer(rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.decoder_layers)
            .map(|_| layer(rng))
            .collect::<Result<Vec<_>>>()?;

        let q = cfg.num_queries;
        Ok(Self {
            backbone,
            msfca,
            projections,
            down,
            encoder,
            decoder,
            query_content: Tensor::random_uniform(&[q, d], -1.0, 1.0, rng),
            query_pos: Tensor::random_uniform(&[q, d], -1.0, 1.0, rng),
            ref_weight: init(&[2, d], d, rng),
            ref_bias: Tensor::zeros(&[2]),
            box_weight: init(&[4, d], d, rng),
            box_bias: Tensor::vector(vec![0.0, 0.0, -1.5, -1.5]),
            class_weight: init(&[NUM_CLASSES, d], d, rng),
            class_bias: Tensor::zeros(&[NUM_CLASSES]),
        })
    }

    pub fn encoder_layers(&self) -> usize {
        self.encoder.len()
    }

    pub fn decoder_layers(&self) -> usize {
        self.decoder.len()
    }

    pub fn num_queries(&self) -> usize {
        self.query_content.shape()[0]
    }

    fn d_model(&self) -> usize {
        self.query_content.shape()[1]
    }
}

/// Raw per-query predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// Tokens entering the encoder, `Σ H_l·W_l` over the fused pyramid.
    pub token_count: usize,
    pub spatial_shapes: Vec<(usize, usize)>,
    pub boxes: Vec<BoundingBox>,
    pub class_probs: Vec<[f64; NUM_CLASSES]>,
}

fn layer_norm(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

/// Attention sub-block followed by the feed-forward sub-block, each residual and normalized.
fn refine(x: &[f64], attended: &Tensor, ffn: &Ffn) -> Result<Vec<f64>> {
    let mut t: Vec<f64> = x.iter().zip(attended.data()).map(|(a, b)| a + b).collect();
    layer_norm(&mut t);
    let f = ffn.forward(&Tensor::vector(t.clone()))?;
    t.iter_mut().zip(f.data()).for_each(|(a, b)| *a += b);
    layer_norm(&mut t);
    Ok(t)
}

fn backbone_pyramid(image: &Tensor, cfg: &PipelineConfig, params: &ToyParams) -> Result<PyramidLevels> {
    let d = params.d_model();
    let mut stages = Vec::with_capacity(4);
    let mut x = image.clone();
    for (w, att) in params.backbone.iter().zip(&params.msfca) {
        let y = hff::conv3x3(&x, w, 2)?.map(|v| v.max(0.0));
        let (_, h, w) = y.dims3()?;
        x = if att.assignment.validate(att.channels(), h, w).is_ok() {
            apply_msfca(&y, att)?
        } else {
            // Coarse stages of small images cannot host every configured frequency.
            let fitted = MsfcaParams {
                assignment: att.assignment.clamped_to(h, w),
                ..att.clone()
            };
            apply_msfca(&y, &fitted)?
        };
        stages.push(x.clone());
    }
    let groups = clip_groups(PROJECTION_GROUPS, d);
    let sources = [&stages[1], &stages[2], &stages[3], &stages[3]];
    let levels = sources
        .iter()
        .zip(&params.projections)
        .map(|(s, p)| project_level(s, p, groups))
        .collect::<Result<Vec<_>>>()?;
    debug_assert_eq!(levels.len(), cfg.msda.levels);
    hff_fuse(&PyramidLevels::new(levels)?, &params.down)
}

fn column(t: &Tensor, y: usize, x: usize) -> Vec<f64> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..c).map(|ch| t.data()[(ch * h + y) * w + x]).collect()
}

/// Runs the model on a `1×H×W` image.
pub fn run_model(image: &Tensor, cfg: &PipelineConfig, params: &ToyParams) -> Result<ModelOutput> {
    let (c, _, _) = image.dims3()?;
    if c != 1 {
        return Err(Error::dim("run_model", "a single-channel image", c));
    }
    if params.d_model() != cfg.d_model || params.num_queries() != cfg.num_queries {
        return Err(Error::invalid("parameters were built for a different configuration"));
    }
    let mut memory = backbone_pyramid(image, cfg, params)?;
    let shapes = memory.spatial_shapes();
    let pe = cfg.posenc_config();
    let pos = shapes
        .iter()
        .map(|&(h, w)| encode_2d_grid(h, w, &pe))
        .collect::<Result<Vec<_>>>()?;

    for layer in &params.encoder {
        let mut next = Vec::with_capacity(memory.len());
        for (l, &(h, w)) in shapes.iter().enumerate() {
            let mut out = Tensor::zeros(&[cfg.d_model, h, w]);
            for y in 0..h {
                for x in 0..w {
                    let content = column(&memory.levels[l], y, x);
                    let query: Vec<f64> = content.iter().zip(column(&pos[l], y, x)).map(|(a, b)| a + b).collect();
                    let reference = ReferencePoint::new((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                    let a = ms_deform_attn(&Tensor::vector(query), reference, &memory, &layer.attn)?;
                    for (ch, v) in refine(&content, &a, &layer.ffn)?.into_iter().enumerate() {
                        out.set3(ch, y, x, v);
                    }
                }
            }
            next.push(out);
        }
        memory = PyramidLevels::new(next)?;
    }

    let mut boxes = Vec::with_capacity(cfg.num_queries);
    let mut class_probs = Vec::with_capacity(cfg.num_queries);
    for q in 0..cfg.num_queries {
        let qpos = params.query_pos.row(q);
        let r = tensor::linear(&Tensor::vector(qpos.to_vec()), &params.ref_weight, &params.ref_bias)?;
        let (rx, ry) = (sigmoid_scalar(r.data()[0]), sigmoid_scalar(r.data()[1]));
        let reference = ReferencePoint::new(rx, ry);
        let mut content = params.query_content.row(q).to_vec();
        for layer in &params.decoder {
            let query: Vec<f64> = content.iter().zip(qpos).map(|(a, b)| a + b).collect();
            let a = ms_deform_attn(&Tensor::vector(query), reference, &memory, &layer.attn)?;
            content = refine(&content, &a, &layer.ffn)?;
        }
        let z = Tensor::vector(content);
        let b = tensor::linear(&z, &params.box_weight, &params.box_bias)?;
        let b = b.data();
        let logit = |p: f64| {
            let p = p.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        };
        boxes.push(BoundingBox::new(
            sigmoid_scalar(b[0] + logit(rx)),
            sigmoid_scalar(b[1] + logit(ry)),
            sigmoid_scalar(b[2]).max(MIN_EXTENT),
            sigmoid_scalar(b[3]).max(MIN_EXTENT),
        )?);
        let cls = tensor::linear(&z, &params.class_weight, &params.class_bias)?;
        class_probs.push(std::array::from_fn(|k| sigmoid_scalar(cls.data()[k])));
    }
    Ok(ModelOutput {
        token_count: shapes.iter().map(|(h, w)| h * w).sum(),
        spatial_shapes: shapes,
        boxes,
        class_probs,
    })
}

/// One detection per query whose best class probability is at least `cfg.score_floor`,
/// in query order.
pub fn toy_forward(scene: &SyntheticScene, cfg: &PipelineConfig, params: &ToyParams) -> Result<Vec<Detection>> {
    let out = run_model(&scene.image, cfg, params)?;
    Ok(out
        .boxes
        .into_iter()
        .zip(out.class_probs)
        .filter_map(|(bbox, probs)| {
            let (class_id, score) =
                probs.iter().copied().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (k, p)| if p > best.1 { (k, p) } else { best },
                );
            (score >= cfg.score_floor).then(|| Detection {
                image_id: scene.image_id.clone(),
                bbox,
                score,
                class_id,
            })
        })
        .collect())
}
