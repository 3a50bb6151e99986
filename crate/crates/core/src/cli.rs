//! The `detrk` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{map_range, Detection, GroundTruth};
use crate::matching::{set_loss, LossWeights, Prediction};
use crate::pipeline::io::{read_config, read_detections, read_ground_truth, read_scenes, write_json, SceneRecord};
use crate::pipeline::{gen_synthetic_scene, toy_forward, PipelineConfig, SceneSpec, ToyParams};
use crate::selftest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

pub const SEED_ENV: &str = "DETRK_SEED";
pub const SCENES_FILE: &str = "scenes.json";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.json";

#[derive(Debug, Parser)]
#[command(
    name = "detrk",
    version,
    about = "Detection-transformer kernels, toy pipeline and COCO-style evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic scenes and their ground truth into a directory.
    GenSynthetic {
        #[arg(long)]
        count: usize,
        /// Output directory; receives scenes.json and groundtruth.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Square image extent in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Nodules per scene; drawn from 1..=3 when omitted.
        #[arg(long)]
        nodules: Option<usize>,
    },
    /// Run the toy model over a scenes file.
    Forward {
        /// Pipeline config JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score detections against ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
        /// Also write the metric JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-image Hungarian set loss and assignment.
    Loss {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
        /// Config supplying the loss weights.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time each kernel on fixed sizes.
    Bench {
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Run every built-in consistency suite.
    Selftest,
}

/// Parses `args` (including the program name) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenSynthetic {
            count,
            out,
            seed,
            size,
            nodules,
        } => resolve_seed(seed, 0).and_then(|s| gen_synthetic(count, &out, s, size, nodules)),
        Command::Forward {
            config,
            scenes,
            out,
            seed,
        } => forward(config.as_deref(), &scenes, &out, seed),
        Command::Eval {
            detections,
            groundtruth,
            out,
        } => eval(&detections, &groundtruth, out.as_deref()),
        Command::Loss {
            detections,
            groundtruth,
            config,
        } => loss(&detections, &groundtruth, config.as_deref()),
        Command::Bench { reps } => bench(reps.max(1)),
        Command::Selftest => return run_selftest(),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

/// Flag first, then the environment, then `fallback`.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(fallback),
    }
}

fn gen_synthetic(count: usize, out: &Path, seed: u64, size: usize, nodules: Option<usize>) -> Result<()> {
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(count);
    let mut gts = Vec::new();
    for i in 0..count {
        let n = nodules.unwrap_or_else(|| rng.random_range(1..=3));
        let spec = SceneSpec {
            height: size,
            width: size,
            nodules: n,
        };
        let scene = gen_synthetic_scene(&format!("scene-{i:04}"), &spec, &mut rng)?;
        records.push(SceneRecord::from(&scene));
        gts.extend(scene.gts);
    }
    write_json(&out.join(SCENES_FILE), &records)?;
    write_json(&out.join(GROUND_TRUTH_FILE), &gts)?;
    println!("wrote {count} scenes with {} nodules to {}", gts.len(), out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => read_config(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn forward(config: Option<&Path>, scenes: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    let params = ToyParams::new(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut dets = Vec::new();
    for record in read_scenes(scenes)? {
        dets.extend(toy_forward(&record.into_scene()?, &cfg, &params)?);
    }
    write_json(out, &dets)?;
    println!("wrote {} detections to {}", dets.len(), out.display());
    Ok(())
}

fn eval(detections: &Path, groundtruth: &Path, out: Option<&Path>) -> Result<()> {
    let dets = read_detections(detections)?;
    let gts = read_ground_truth(groundtruth)?;
    let report = map_range(&dets, &gts)?;
    println!("{report}");
    let json = serde_json::to_string(&report).expect("metric report serializes");
    println!("{json}");
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn loss(detections: &Path, groundtruth: &Path, config: Option<&Path>) -> Result<()> {
    let weights: LossWeights = load_config(config)?.loss_weights;
    let dets = read_detections(detections)?;
    let gts = read_ground_truth(groundtruth)?;
    let mut images: BTreeMap<&str, (Vec<&Detection>, Vec<&GroundTruth>)> = BTreeMap::new();
    for d in &dets {
        images.entry(&d.image_id).or_default().0.push(d);
    }
    for g in &gts {
        images.entry(&g.image_id).or_default().1.push(g);
    }
    let mut total = 0.0;
    for (id, (ds, gs)) in &images {
        let preds = ds
            .iter()
            .map(|d| Prediction::new(d.bbox, d.score))
            .collect::<Result<Vec<_>>>()?;
        let boxes: Vec<_> = gs.iter().map(|g| g.bbox).collect();
        let r = set_loss(&preds, &boxes, &weights)?;
        total += r.loss;
        let pairs: Vec<String> = r.assignment.pairs.iter().map(|(p, g)| format!("{p}->{g}")).collect();
        println!("{id}\tloss {:.6}\tmatched [{}]", r.loss, pairs.join(", "));
    }
    if !images.is_empty() {
        println!(
            "mean\tloss {:.6}\tover {} images",
            total / images.len() as f64,
            images.len()
        );
    }
    Ok(())
}

fn bench(reps: usize) -> Result<()> {
    use crate::hff::{hff_fuse, PyramidLevels, ScDownParams};
    use crate::matching::hungarian_match;
    use crate::msda::{ms_deform_attn, MsdaParams, ReferencePoint};
    use crate::msfca::{apply_msfca, FrequencyAssignment, MsfcaParams};
    use crate::posenc::{encode_2d_grid, PosEncConfig};
    use crate::tensor::Tensor;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let time = |name: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        f()?;
        let t = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        let per = t.elapsed().as_secs_f64() / reps as f64;
        println!("{name:<32}{:>12.3} ms", per * 1e3);
        Ok(())
    };

    let x = Tensor::random_uniform(&[64, 32, 32], -1.0, 1.0, &mut rng);
    let att = MsfcaParams::new(
        FrequencyAssignment::zigzag(16),
        Tensor::random_uniform(&[64, 64], -0.1, 0.1, &mut rng),
        Tensor::zeros(&[64]),
    )?;
    time("msfca 64x32x32", &mut || apply_msfca(&x, &att).map(drop))?;

    let shapes = [(32, 32), (16, 16), (8, 8), (4, 4)];
    let pyr = PyramidLevels::new(
        shapes
            .iter()
            .map(|&(h, w)| Tensor::random_uniform(&[64, h, w], -1.0, 1.0, &mut rng))
            .collect(),
    )?;
    let down: Vec<ScDownParams> = (0..3)
        .map(|_| {
            ScDownParams::new(
                Tensor::random_uniform(&[64, 64], -0.1, 0.1, &mut rng),
                Tensor::random_uniform(&[64, 3, 3], -0.3, 0.3, &mut rng),
            )
        })
        .collect::<Result<_>>()?;
    time("hff_fuse 4 levels, 64 ch", &mut || hff_fuse(&pyr, &down).map(drop))?;

    let p = MsdaParams::random(8, 4, 4, 64, 0.1, 2.0, &mut rng)?;
    let queries: Vec<Tensor> = (0..100)
        .map(|_| Tensor::random_uniform(&[64], -1.0, 1.0, &mut rng))
        .collect();
    time("ms_deform_attn x100 queries", &mut || {
        for (i, z) in queries.iter().enumerate() {
            let r = ReferencePoint::new((i % 10) as f64 / 10.0 + 0.05, (i / 10) as f64 / 10.0 + 0.05);
            ms_deform_attn(z, r, &pyr, &p)?;
        }
        Ok(())
    })?;

    let cost = Tensor::random_uniform(&[100, 20], 0.0, 10.0, &mut rng);
    time("hungarian 100x20", &mut || hungarian_match(&cost).map(drop))?;

    let pe = PosEncConfig::default();
    time("encode_2d_grid 32x32", &mut || encode_2d_grid(32, 32, &pe).map(drop))?;

    let cfg = PipelineConfig::default();
    let params = ToyParams::new(&cfg, &mut rng)?;
    let scene = gen_synthetic_scene("bench", &SceneSpec::default(), &mut rng)?;
    time("toy_forward 64x64, 6+6 layers", &mut || {
        toy_forward(&scene, &cfg, &params).map(drop)
    })?;
    Ok(())
}

fn run_selftest() -> i32 {
    let reports = selftest::run_suites();
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!("{:<12} {status:<5} {:>7.3}s  {}", r.name, r.seconds, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("{} suites, {failed} failed", reports.len());
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_SELFTEST
    }
}
