//! C ABI over `detrk`.
//!
//! Every fallible function returns a [`DetrkStatus`]. On failure a message is stored per
//! thread and can be copied out with [`detrk_last_error_message`]. Handles are opaque and
//! must be released with their `_free` function; passing NULL to a `_free` is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use detrk::eval::{map_range, Detection, GroundTruth};
use detrk::matching::{focal_loss, giou_loss, hungarian_match, iou, BoundingBox, Target};
use detrk::pipeline::{toy_forward, PipelineConfig, SyntheticScene, ToyParams};
use detrk::posenc::{positional_encoding, PosEncConfig};
use detrk::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetrkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Malformed input data, such as unparsable configuration JSON.
    Data = 3,
    /// An output buffer is too small; the required size is reported where possible.
    BufferTooSmall = 4,
    /// A Rust panic was caught at the boundary. Indicates a bug.
    Panic = 5,
}

/// Normalized center-size box.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetrkBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Evaluation summary. Metrics that are undefined (no ground truth in range) are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetrkMetrics {
    pub map_50_95: f64,
    pub map_50: f64,
    pub map_75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetrkDetection {
    pub bbox: DetrkBox,
    pub score: f64,
    pub class_id: u32,
}

/// Accumulates detections and ground truth, then scores them.
pub struct DetrkEvaluator {
    dets: Vec<Detection>,
    gts: Vec<GroundTruth>,
}

/// Configured toy detector with its seeded parameters.
pub struct DetrkPipeline {
    cfg: PipelineConfig,
    params: ToyParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(DetrkStatus, String);

impl Failure {
    fn null(name: &str) -> Self {
        Failure(DetrkStatus::NullPointer, format!("`{name}` is NULL"))
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Failure(DetrkStatus::InvalidArgument, msg.into())
    }
}

impl From<detrk::Error> for Failure {
    fn from(e: detrk::Error) -> Self {
        let status = if e.is_data_error() {
            DetrkStatus::Data
        } else {
            DetrkStatus::InvalidArgument
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, translating errors and panics into a status and the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DetrkStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DetrkStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {msg}"));
            DetrkStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Failure::null(name));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| Failure::null(name))
}

unsafe fn handle<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    out_ref(ptr, name)
}

unsafe fn c_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::null(name));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure::invalid(format!("`{name}` is not valid UTF-8")))
}

fn to_box(b: DetrkBox) -> Result<BoundingBox, Failure> {
    Ok(BoundingBox::new(b.cx, b.cy, b.w, b.h)?)
}

fn from_box(b: &BoundingBox) -> DetrkBox {
    let [cx, cy, w, h] = b.to_array();
    DetrkBox { cx, cy, w, h }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn detrk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Size in bytes, including the terminating NUL, of this thread's last error message;
/// 0 if the last call succeeded.
#[no_mangle]
pub extern "C" fn detrk_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes_with_nul().len()))
}

/// Copies this thread's last error message into `buf` as a NUL-terminated string.
///
/// Writes an empty string when there is no error. Returns `BUFFER_TOO_SMALL` without
/// writing if `len` is less than [`detrk_last_error_length`]. Does not clear the error.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn detrk_last_error_message(buf: *mut c_char, len: usize) -> DetrkStatus {
    if buf.is_null() {
        return DetrkStatus::NullPointer;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&b"\0"[..], |c| c.as_bytes_with_nul());
        if len < bytes.len() {
            return DetrkStatus::BufferTooSmall;
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
        DetrkStatus::Ok
    })
}

/// Minimum-cost one-to-one assignment on a row-major `rows×cols` cost matrix.
///
/// `row_ind` and `col_ind` receive `min(rows, cols)` pairs sorted by row; `capacity` is
/// their length. `*n_pairs` is set even when `capacity` is too small.
///
/// # Safety
/// `cost` must point to `rows*cols` doubles and the index buffers to `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn detrk_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    row_ind: *mut usize,
    col_ind: *mut usize,
    capacity: usize,
    n_pairs: *mut usize,
    total_cost: *mut f64,
) -> DetrkStatus {
    guard(|| {
        let n_out = out_ref(n_pairs, "n_pairs")?;
        let total = out_ref(total_cost, "total_cost")?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure::invalid("matrix size overflows"))?;
        let data = input(cost, len, "cost")?;
        let result = hungarian_match(&Tensor::new(vec![rows, cols], data.to_vec())?)?;
        *n_out = result.pairs.len();
        if capacity < result.pairs.len() {
            return Err(Failure(
                DetrkStatus::BufferTooSmall,
                format!("index buffers hold {capacity} entries, {} needed", result.pairs.len()),
            ));
        }
        let r = output(row_ind, result.pairs.len(), "row_ind")?;
        let c = output(col_ind, result.pairs.len(), "col_ind")?;
        for (k, &(i, j)) in result.pairs.iter().enumerate() {
            r[k] = i;
            c[k] = j;
        }
        *total = result.total_cost;
        Ok(())
    })
}

/// Intersection over union of two boxes.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn detrk_iou(a: DetrkBox, b: DetrkBox, out: *mut f64) -> DetrkStatus {
    guard(|| {
        *out_ref(out, "out")? = iou(&to_box(a)?, &to_box(b)?);
        Ok(())
    })
}

/// Generalized-IoU loss, in `[0, 2)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn detrk_giou_loss(a: DetrkBox, b: DetrkBox, out: *mut f64) -> DetrkStatus {
    guard(|| {
        *out_ref(out, "out")? = giou_loss(&to_box(a)?, &to_box(b)?);
        Ok(())
    })
}

/// Focal loss of foreground probability `p` against a foreground (`true`) or background label.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn detrk_focal_loss(p: f64, foreground: bool, gamma: f64, out: *mut f64) -> DetrkStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Failure::invalid(format!("probability {p} outside [0, 1]")));
        }
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Failure::invalid(format!(
                "gamma {gamma} must be finite and nonnegative"
            )));
        }
        let target = if foreground {
            Target::Foreground
        } else {
            Target::Background
        };
        *out = focal_loss(p, target, gamma);
        Ok(())
    })
}

/// Sinusoidal encoding of a scalar position into `d_model` values (interleaved sin, cos).
///
/// # Safety
/// `out` must point to `out_len` doubles; `out_len` must equal `d_model`.
#[no_mangle]
pub unsafe extern "C" fn detrk_positional_encoding(
    pos: f64,
    d_model: usize,
    temperature: f64,
    out: *mut f64,
    out_len: usize,
) -> DetrkStatus {
    guard(|| {
        if out_len != d_model {
            return Err(Failure::invalid(format!(
                "output length {out_len} differs from d_model {d_model}"
            )));
        }
        let e = positional_encoding(pos, &PosEncConfig::new(d_model, temperature)?)?;
        output(out, out_len, "out")?.copy_from_slice(e.data());
        Ok(())
    })
}

/// Creates an empty evaluator.
///
/// # Safety
/// `out` must be a valid pointer; it receives the handle.
#[no_mangle]
pub unsafe extern "C" fn detrk_evaluator_new(out: *mut *mut DetrkEvaluator) -> DetrkStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = Box::into_raw(Box::new(DetrkEvaluator {
            dets: Vec::new(),
            gts: Vec::new(),
        }));
        Ok(())
    })
}

/// # Safety
/// `ev` must come from [`detrk_evaluator_new`]; `image_id` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn detrk_evaluator_add_detection(
    ev: *mut DetrkEvaluator,
    image_id: *const c_char,
    bbox: DetrkBox,
    score: f64,
    class_id: u32,
) -> DetrkStatus {
    guard(|| {
        let ev = handle(ev, "ev")?;
        let d = Detection {
            image_id: c_str(image_id, "image_id")?.to_owned(),
            bbox: to_box(bbox)?,
            score,
            class_id: class_id as usize,
        };
        d.validate()?;
        ev.dets.push(d);
        Ok(())
    })
}

/// `pixel_area` is the object's area in pixels, used for the size buckets.
///
/// # Safety
/// `ev` must come from [`detrk_evaluator_new`]; `image_id` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn detrk_evaluator_add_ground_truth(
    ev: *mut DetrkEvaluator,
    image_id: *const c_char,
    bbox: DetrkBox,
    class_id: u32,
    pixel_area: f64,
) -> DetrkStatus {
    guard(|| {
        let ev = handle(ev, "ev")?;
        let g = GroundTruth {
            image_id: c_str(image_id, "image_id")?.to_owned(),
            bbox: to_box(bbox)?,
            class_id: class_id as usize,
            pixel_area,
        };
        g.validate()?;
        ev.gts.push(g);
        Ok(())
    })
}

/// Scores everything added so far. The evaluator can keep accumulating afterwards.
///
/// # Safety
/// `ev` must come from [`detrk_evaluator_new`]; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn detrk_evaluator_report(ev: *mut DetrkEvaluator, out: *mut DetrkMetrics) -> DetrkStatus {
    guard(|| {
        let ev = handle(ev, "ev")?;
        let out = out_ref(out, "out")?;
        let r = map_range(&ev.dets, &ev.gts)?;
        let v = |m: Option<f64>| m.unwrap_or(f64::NAN);
        *out = DetrkMetrics {
            map_50_95: v(r.map_50_95),
            map_50: v(r.map_50),
            map_75: v(r.map_75),
            ap_small: v(r.ap_small),
            ap_medium: v(r.ap_medium),
            ap_large: v(r.ap_large),
        };
        Ok(())
    })
}

/// # Safety
/// `ev` must be NULL or come from [`detrk_evaluator_new`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn detrk_evaluator_free(ev: *mut DetrkEvaluator) {
    if !ev.is_null() {
        drop(Box::from_raw(ev));
    }
}

/// Builds a pipeline from configuration JSON, or the defaults when `config_json` is NULL.
/// Parameters are drawn from the configuration's seed.
///
/// # Safety
/// `config_json` must be NULL or NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn detrk_pipeline_new(config_json: *const c_char, out: *mut *mut DetrkPipeline) -> DetrkStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let cfg: PipelineConfig = if config_json.is_null() {
            PipelineConfig::default()
        } else {
            serde_json::from_str(c_str(config_json, "config_json")?)
                .map_err(|e| Failure(DetrkStatus::Data, format!("configuration: {e}")))?
        };
        cfg.validate()?;
        let params = ToyParams::new(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        *out = Box::into_raw(Box::new(DetrkPipeline { cfg, params }));
        Ok(())
    })
}

/// Upper bound on the detections one forward pass can return.
///
/// # Safety
/// `p` must be NULL or come from [`detrk_pipeline_new`]. Returns 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn detrk_pipeline_max_detections(p: *const DetrkPipeline) -> usize {
    p.as_ref().map_or(0, |p| p.params.num_queries())
}

/// Runs the detector on a row-major grayscale image.
///
/// `*n_out` is set to the number of detections even when `capacity` is too small.
///
/// # Safety
/// `p` must come from [`detrk_pipeline_new`]; `pixels` must point to `height*width`
/// doubles and `out` to `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn detrk_pipeline_forward(
    p: *mut DetrkPipeline,
    pixels: *const f64,
    height: usize,
    width: usize,
    out: *mut DetrkDetection,
    capacity: usize,
    n_out: *mut usize,
) -> DetrkStatus {
    guard(|| {
        let p = handle(p, "p")?;
        let n_out = out_ref(n_out, "n_out")?;
        let len = height
            .checked_mul(width)
            .ok_or_else(|| Failure::invalid("image size overflows"))?;
        let image = Tensor::new(vec![1, height, width], input(pixels, len, "pixels")?.to_vec())?;
        let scene = SyntheticScene {
            image_id: String::new(),
            image,
            gts: Vec::new(),
        };
        let dets = toy_forward(&scene, &p.cfg, &p.params)?;
        *n_out = dets.len();
        if capacity < dets.len() {
            return Err(Failure(
                DetrkStatus::BufferTooSmall,
                format!("output holds {capacity} detections, {} produced", dets.len()),
            ));
        }
        for (slot, d) in output(out, dets.len(), "out")?.iter_mut().zip(&dets) {
            *slot = DetrkDetection {
                bbox: from_box(&d.bbox),
                score: d.score,
                class_id: d.class_id as u32,
            };
        }
        Ok(())
    })
}

/// # Safety
/// `p` must be NULL or come from [`detrk_pipeline_new`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn detrk_pipeline_free(p: *mut DetrkPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}
