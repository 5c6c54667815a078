//! C ABI over streamfx: load a checkpoint, open streaming sessions, push
//! chunks, switch conditions.
//!
//! Every function returns an [`SfxStatus`]; on failure the message is
//! available from [`sfx_last_error_message`] on the same thread. Handles are
//! opaque and must be released with the matching `_free` function. A session
//! keeps its model alive, so the model may be freed first.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use streamfx::checkpoint::load_model;
use streamfx::model::DenoiserParams;
use streamfx::stream::{Condition, ConditionUpdate, SessionConfig, StreamSession};
use streamfx::{Error, Tensor};

// Large per-chunk buffers otherwise go through mmap/munmap until glibc's
// threshold adapts, which shows up as a slow drift in chunk latency.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Session = 6,
    Panic = 7,
    Internal = 8,
}

/// Loaded model weights.
pub struct SfxModel {
    params: Arc<DenoiserParams<f32>>,
}

/// One streaming session.
pub struct SfxSession {
    inner: StreamSession,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SfxStats {
    pub chunks: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

/// Chunk layout: `c_frames × height × width × channels` floats, row-major.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SfxGeometry {
    pub c_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_effect_labels: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SfxStatus {
    match e {
        Error::Io(_) => SfxStatus::Io,
        Error::Format(_) | Error::Json(_) => SfxStatus::Format,
        Error::ShapeMismatch { .. } | Error::ChunkShape { .. } => SfxStatus::Shape,
        Error::Session(_) | Error::Cache(_) => SfxStatus::Session,
        Error::InvalidArgument(_) | Error::Config(_) => SfxStatus::InvalidArgument,
        _ => SfxStatus::Internal,
    }
}

struct Fail(SfxStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SfxStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SfxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SfxStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SfxStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or point to `len` readable floats.
unsafe fn frame_arg(model: &DenoiserParams<f32>, ptr: *const f32, len: usize) -> Result<Option<Tensor<f32>>, Fail> {
    if ptr.is_null() {
        return Ok(None);
    }
    let shape = model.config.geometry().frame_shape();
    let want: usize = shape.iter().product();
    if len != want {
        return Err(Fail(SfxStatus::Shape, format!("reference has {len} floats, expected {want}")));
    }
    let data = std::slice::from_raw_parts(ptr, len).to_vec();
    Ok(Some(Tensor::new(shape.to_vec(), data)?))
}

fn label_arg(label: i32) -> Option<usize> {
    (label >= 0).then_some(label as usize)
}

/// Message for the most recent failure on this thread; empty after success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn sfx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfx_model_load(path: *const c_char, out: *mut *mut SfxModel) -> SfxStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| Fail(SfxStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (params, _) = load_model::<f32>(Path::new(p))?;
        *out = Box::into_raw(Box::new(SfxModel { params: Arc::new(params) }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`sfx_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sfx_model_free(model: *mut SfxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfx_model_geometry(model: *const SfxModel, out: *mut SfxGeometry) -> SfxStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &m.params.config;
        *out = SfxGeometry {
            c_frames: c.c_frames,
            height: c.height,
            width: c.width,
            channels: c.channels,
            n_effect_labels: c.n_effect_labels,
        };
        Ok(())
    })
}

/// Open a session. `effect_label < 0` means no label; a null `reference`
/// means no reference frame (`height × width × channels` floats otherwise).
///
/// # Safety
/// `model` must be a live handle, `reference` null or readable for
/// `reference_len` floats, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sfx_session_open(
    model: *const SfxModel,
    window: usize,
    steps: usize,
    cfg_scale: f64,
    effect_label: i32,
    reference: *const f32,
    reference_len: usize,
    seed: u64,
    out: *mut *mut SfxSession,
) -> SfxStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let condition = Condition { reference: frame_arg(&m.params, reference, reference_len)?, label: label_arg(effect_label) };
        let cfg = SessionConfig { window, steps, cfg_scale, noise_seed: seed };
        let inner = StreamSession::open(Arc::clone(&m.params), cfg, condition)?;
        *out = Box::into_raw(Box::new(SfxSession { inner }));
        Ok(())
    })
}

/// Queue a condition change for the next chunk. `effect_label < 0` and a
/// null `reference` leave that part unchanged.
///
/// # Safety
/// `session` must be a live handle; `reference` null or readable for
/// `reference_len` floats.
#[no_mangle]
pub unsafe extern "C" fn sfx_session_set_condition(
    session: *mut SfxSession,
    effect_label: i32,
    reference: *const f32,
    reference_len: usize,
) -> SfxStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let reference = frame_arg(s.inner.params(), reference, reference_len)?;
        s.inner.update_condition(ConditionUpdate { reference, label: label_arg(effect_label) })?;
        Ok(())
    })
}

/// Edit one source chunk. `frames` and `out` each hold one chunk of floats;
/// `chunk_ms` may be null.
///
/// # Safety
/// `session` must be a live handle; `frames` readable and `out` writable for
/// their lengths; `chunk_ms` null or writable.
#[no_mangle]
pub unsafe extern "C" fn sfx_session_push_chunk(
    session: *mut SfxSession,
    frames: *const f32,
    frames_len: usize,
    out: *mut f32,
    out_len: usize,
    chunk_ms: *mut f64,
) -> SfxStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        if frames.is_null() {
            return Err(null("frames"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let shape = s.inner.params().config.geometry().chunk_shape();
        let want: usize = shape.iter().product();
        if frames_len != want || out_len != want {
            return Err(Fail(SfxStatus::Shape, format!("chunk buffers hold {frames_len}/{out_len} floats, expected {want}")));
        }
        let src = Tensor::new(shape.to_vec(), std::slice::from_raw_parts(frames, frames_len).to_vec())?;
        let r = s.inner.push_chunk(&src)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(r.frames.data());
        if !chunk_ms.is_null() {
            *chunk_ms = r.chunk_ms;
        }
        Ok(())
    })
}

/// Finish the session and report latency; repeated calls return the same
/// numbers. The handle still needs [`sfx_session_free`].
///
/// # Safety
/// `session` must be a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn sfx_session_close(session: *mut SfxSession, out: *mut SfxStats) -> SfxStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let st = s.inner.close();
        if let Some(o) = out.as_mut() {
            *o = SfxStats { chunks: st.chunks, mean_ms: st.mean_ms, max_ms: st.max_ms, p95_ms: st.p95_ms, fps: st.fps };
        }
        Ok(())
    })
}

/// # Safety
/// `session` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfx_session_free(session: *mut SfxSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
