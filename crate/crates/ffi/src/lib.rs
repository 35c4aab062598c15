//! C ABI for the seqcon library.
//!
//! Every fallible function returns a [`SeqconStatus`]; on failure the
//! message is available from [`seqcon_last_error`] on the same thread until
//! the next failing call. Encoders and videos are opaque handles released
//! with their `_free` function. Matrices are dense row-major buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use ndarray::{Array2, ArrayView2};
use seqcon::data::{load_features, VideoRecord};
use seqcon::encoder::{self, EncoderConfig, EncoderParams};
use seqcon::eval::{self, EmbeddedVideo, SimilarityMatrix};
use seqcon::loss::{self, SclConfig};
use seqcon::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqconStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Shape = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

impl From<&Error> for SeqconStatus {
    fn from(err: &Error) -> Self {
        match err {
            Error::Usage(_) | Error::InvalidInput(_) => SeqconStatus::InvalidArgument,
            Error::Config(_) => SeqconStatus::Config,
            Error::Io { .. } => SeqconStatus::Io,
            Error::Format { .. } => SeqconStatus::Format,
            Error::Shape(_) => SeqconStatus::Shape,
            Error::Numeric(_) => SeqconStatus::Numeric,
            Error::Internal(_) => SeqconStatus::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(text).ok());
}

struct Failure(SeqconStatus, String);

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Failure(SeqconStatus::from(&err), err.to_string())
    }
}

fn fail(status: SeqconStatus, message: impl Into<String>) -> Failure {
    Failure(status, message.into())
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SeqconStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => SeqconStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("panic inside seqcon");
            SeqconStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(SeqconStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    non_null(path, "path")?;
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(SeqconStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn matrix<'a, T>(data: *const T, rows: usize, cols: usize, name: &str) -> Result<ArrayView2<'a, T>, Failure> {
    if rows == 0 || cols == 0 {
        return Err(fail(SeqconStatus::InvalidArgument, format!("`{name}` has an empty dimension")));
    }
    non_null(data, name)?;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| fail(SeqconStatus::InvalidArgument, format!("`{name}` is too large")))?;
    ArrayView2::from_shape((rows, cols), slice::from_raw_parts(data, len))
        .map_err(|e| fail(SeqconStatus::Shape, e.to_string()))
}

unsafe fn vector<'a, T>(data: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    non_null(data, name)?;
    Ok(slice::from_raw_parts(data, len))
}

unsafe fn write_out(src: &Array2<f64>, out: *mut f64, capacity: usize, name: &str) -> Result<(), Failure> {
    non_null(out, name)?;
    if capacity < src.len() {
        return Err(fail(
            SeqconStatus::BufferTooSmall,
            format!("`{name}` holds {capacity} values, {} needed", src.len()),
        ));
    }
    let dst = slice::from_raw_parts_mut(out, src.len());
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *s;
    }
    Ok(())
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn seqcon_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn seqcon_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Trained (or initialized) encoder.
pub struct SeqconEncoder {
    config: EncoderConfig,
    params: EncoderParams,
}

/// Loads an encoder from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seqcon_encoder_load(path: *const c_char, out: *mut *mut SeqconEncoder) -> SeqconStatus {
    guard(|| {
        non_null(out, "out")?;
        let ckpt = encoder::load_checkpoint(&path_arg(path)?)?;
        let params = ckpt.params()?;
        *out = Box::into_raw(Box::new(SeqconEncoder {
            config: ckpt.config,
            params,
        }));
        Ok(())
    })
}

/// Creates a randomly initialized encoder from a JSON encoder config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seqcon_encoder_init(config_json: *const c_char, seed: u64, out: *mut *mut SeqconEncoder) -> SeqconStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(config_json, "config_json")?;
        let text = CStr::from_ptr(config_json)
            .to_str()
            .map_err(|_| fail(SeqconStatus::InvalidArgument, "config is not valid UTF-8"))?;
        let config = EncoderConfig::from_json(text)?;
        let params = EncoderParams::init(&config, seed);
        *out = Box::into_raw(Box::new(SeqconEncoder { config, params }));
        Ok(())
    })
}

/// # Safety
/// `encoder` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn seqcon_encoder_free(encoder: *mut SeqconEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Feature width the encoder expects, or 0 for a null handle.
///
/// # Safety
/// `encoder` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seqcon_encoder_input_dim(encoder: *const SeqconEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.config.input_dim)
}

/// Width of the frame-wise representations, or 0 for a null handle.
///
/// # Safety
/// `encoder` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seqcon_encoder_output_dim(encoder: *const SeqconEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.config.out_dim)
}

/// Encodes `frames x input_dim` features into L2-normalized
/// `frames x output_dim` representations written to `out`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn seqcon_encoder_embed(
    encoder: *const SeqconEncoder,
    features: *const f32,
    frames: usize,
    dims: usize,
    out: *mut f64,
    out_capacity: usize,
) -> SeqconStatus {
    guard(|| {
        non_null(encoder, "encoder")?;
        let enc = &*encoder;
        let x = matrix(features, frames, dims, "features")?.mapv(f64::from);
        let h = encoder::infer(&enc.params, &enc.config, &x)?.h;
        let video = EmbeddedVideo::new("ffi", h)?;
        write_out(&video.embeddings, out, out_capacity, "out")
    })
}

/// A feature file with its sidecar metadata.
pub struct SeqconVideo {
    record: VideoRecord,
    features: Vec<f32>,
}

/// Loads an `.fseq` feature file (and its JSON sidecar when present).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seqcon_video_load(path: *const c_char, out: *mut *mut SeqconVideo) -> SeqconStatus {
    guard(|| {
        non_null(out, "out")?;
        let record = load_features(&path_arg(path)?)?;
        let features = record.features.iter().copied().collect();
        *out = Box::into_raw(Box::new(SeqconVideo { record, features }));
        Ok(())
    })
}

/// # Safety
/// `video` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn seqcon_video_free(video: *mut SeqconVideo) {
    if !video.is_null() {
        drop(Box::from_raw(video));
    }
}

/// # Safety
/// `video` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seqcon_video_frames(video: *const SeqconVideo) -> usize {
    video.as_ref().map_or(0, |v| v.record.num_frames())
}

/// # Safety
/// `video` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seqcon_video_dims(video: *const SeqconVideo) -> usize {
    video.as_ref().map_or(0, |v| v.record.feature_dim())
}

/// Row-major `frames x dims` features owned by the handle, or null.
///
/// # Safety
/// `video` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seqcon_video_features(video: *const SeqconVideo) -> *const f32 {
    video.as_ref().map_or(ptr::null(), |v| v.features.as_ptr())
}

/// Copies the per-frame phase labels into `out`.
///
/// # Safety
/// `out` must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn seqcon_video_phase_labels(video: *const SeqconVideo, out: *mut usize, capacity: usize) -> SeqconStatus {
    guard(|| {
        non_null(video, "video")?;
        non_null(out, "out")?;
        let v = &*video;
        let labels = v
            .record
            .phase_labels
            .as_ref()
            .ok_or_else(|| fail(SeqconStatus::InvalidArgument, format!("video `{}` has no phase labels", v.record.id)))?;
        if capacity < labels.len() {
            return Err(fail(SeqconStatus::BufferTooSmall, format!("{} labels, capacity {capacity}", labels.len())));
        }
        slice::from_raw_parts_mut(out, labels.len()).copy_from_slice(labels);
        Ok(())
    })
}

/// Sequence contrastive loss of two views with raw-video timestamps. The
/// gradient buffers may be null; otherwise they receive `dL/dz1` and
/// `dL/dz2`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn seqcon_scl_loss(
    z1: *const f64,
    frames1: usize,
    z2: *const f64,
    frames2: usize,
    dims: usize,
    timestamps1: *const f64,
    timestamps2: *const f64,
    sigma2: f64,
    tau: f64,
    loss_out: *mut f64,
    grad_z1: *mut f64,
    grad_z2: *mut f64,
) -> SeqconStatus {
    guard(|| {
        non_null(loss_out, "loss_out")?;
        let a = matrix(z1, frames1, dims, "z1")?.to_owned();
        let b = matrix(z2, frames2, dims, "z2")?.to_owned();
        let s1 = vector(timestamps1, frames1, "timestamps1")?;
        let s2 = vector(timestamps2, frames2, "timestamps2")?;
        let out = loss::scl_loss(&a, &b, s1, s2, &SclConfig { sigma2, tau })?;
        if !grad_z1.is_null() {
            write_out(&out.grad_z1, grad_z1, a.len(), "grad_z1")?;
        }
        if !grad_z2.is_null() {
            write_out(&out.grad_z2, grad_z2, b.len(), "grad_z2")?;
        }
        *loss_out = out.loss;
        Ok(())
    })
}

/// Row-normalized Gaussian prior over timestamp distances, `len1 x len2`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn seqcon_gaussian_weights(
    timestamps1: *const f64,
    len1: usize,
    timestamps2: *const f64,
    len2: usize,
    sigma2: f64,
    out: *mut f64,
    out_capacity: usize,
) -> SeqconStatus {
    guard(|| {
        let w = loss::gaussian_weights(vector(timestamps1, len1, "timestamps1")?, vector(timestamps2, len2, "timestamps2")?, sigma2)?;
        write_out(&w.0, out, out_capacity, "out")
    })
}

/// Cosine similarities between the rows of `a` and `b`, `rows_a x rows_b`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn seqcon_cosine_similarity(
    a: *const f64,
    rows_a: usize,
    b: *const f64,
    rows_b: usize,
    dims: usize,
    out: *mut f64,
    out_capacity: usize,
) -> SeqconStatus {
    guard(|| {
        let sim = eval::similarity_matrix(matrix(a, rows_a, dims, "a")?, matrix(b, rows_b, dims, "b")?, false)?;
        write_out(&sim.0, out, out_capacity, "out")
    })
}

/// DTW on cost `1 - sim`. Path indices go to `path_i`/`path_j` (capacity
/// `rows + cols - 1` always suffices), their count to `path_len`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn seqcon_dtw_align(
    sim: *const f64,
    rows: usize,
    cols: usize,
    path_i: *mut usize,
    path_j: *mut usize,
    path_capacity: usize,
    path_len: *mut usize,
    cost_out: *mut f64,
) -> SeqconStatus {
    guard(|| {
        non_null(path_i, "path_i")?;
        non_null(path_j, "path_j")?;
        non_null(path_len, "path_len")?;
        non_null(cost_out, "cost_out")?;
        let m = matrix(sim, rows, cols, "sim")?.to_owned();
        let (path, cost) = eval::dtw_align(&SimilarityMatrix(m))?;
        let pairs = path.pairs();
        if path_capacity < pairs.len() {
            return Err(fail(SeqconStatus::BufferTooSmall, format!("path has {} steps, capacity {path_capacity}", pairs.len())));
        }
        let (oi, oj) = (slice::from_raw_parts_mut(path_i, pairs.len()), slice::from_raw_parts_mut(path_j, pairs.len()));
        for (k, &(i, j)) in pairs.iter().enumerate() {
            oi[k] = i;
            oj[k] = j;
        }
        *path_len = pairs.len();
        *cost_out = cost;
        Ok(())
    })
}

/// Kendall's tau between frame order in `emb1` and the order of its cosine
/// nearest neighbors in `emb2`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn seqcon_kendalls_tau(
    emb1: *const f64,
    frames1: usize,
    emb2: *const f64,
    frames2: usize,
    dims: usize,
    tau_out: *mut f64,
) -> SeqconStatus {
    guard(|| {
        non_null(tau_out, "tau_out")?;
        *tau_out = eval::kendalls_tau(matrix(emb1, frames1, dims, "emb1")?, matrix(emb2, frames2, dims, "emb2")?)?;
        Ok(())
    })
}
