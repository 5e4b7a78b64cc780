//! C ABI over the core toolkit: opaque model handles, file-based encode and
//! decode, and numeric status codes aligned with the CLI exit codes.
//!
//! Every function is safe to call from any thread; a model handle may be
//! shared read-only across threads. Error details for the calling thread are
//! available via [`liso_last_error_message`].

use liso_core::bitstream::{error_rate, pack_message, unpack_message, Payload};
use liso_core::error::Error;
use liso_core::imageio::{load_image, quantize, save_jpeg, save_png};
use liso_core::jpeg::JpegConfig;
use liso_core::metrics::{psnr, ssim};
use liso_core::nets::{decode_bits, decoder_forward, Params};
use liso_core::optim::{liso_encode, liso_refine_lbfgs, OptimizeConfig};
use liso_core::train::load_checkpoint;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LisoStatus {
    Ok = 0,
    Io = 1,
    Config = 2,
    Divergence = 3,
    CapacityExceeded = 4,
    PayloadMismatch = 5,
    MalformedHeader = 6,
    NullArgument = 7,
    Internal = 8,
}

/// Opaque handle to a loaded checkpoint.
pub struct LisoModel {
    params: Params<f32>,
}

/// Options of [`liso_encode_file`]. Obtain defaults from
/// [`liso_encode_options_default`] and adjust fields as needed.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LisoEncodeOptions {
    /// Step size of the learned update.
    pub eta: f32,
    /// Iteration budget.
    pub max_iters: u32,
    /// Iterations without improvement before stopping.
    pub patience: u32,
    /// Quality weight of the objective.
    pub lambda: f32,
    /// Truncation bound on the perturbation; 0 or below disables it.
    pub tau: f32,
    /// L-BFGS polish steps after the learned encoder; 0 disables refinement.
    pub refine_lbfgs_steps: u32,
    /// JPEG quality in [1,100]; 0 keeps the JPEG layer off (PNG output).
    pub jpeg_quality: u8,
}

/// Per-call statistics of [`liso_encode_file`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LisoEncodeStats {
    /// Bit error rate measured on the stored file.
    pub error_rate: f64,
    /// PSNR (dB) between quantized cover and stored stego image.
    pub psnr: f64,
    /// SSIM between quantized cover and stored stego image.
    pub ssim: f64,
    /// Optimizer iterations performed.
    pub iterations: u64,
    /// Wall-clock encode seconds.
    pub seconds: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> LisoStatus {
    match err {
        Error::Config(_) | Error::EmptyDataset => LisoStatus::Config,
        Error::DivergenceDetected { .. } => LisoStatus::Divergence,
        Error::CapacityExceeded { .. } => LisoStatus::CapacityExceeded,
        Error::PayloadMismatch { .. } => LisoStatus::PayloadMismatch,
        Error::MalformedHeader(_) => LisoStatus::MalformedHeader,
        Error::Io(_) | Error::DecodeError(_) | Error::CodecError(_) => LisoStatus::Io,
        _ => LisoStatus::Internal,
    }
}

fn fail(err: Error) -> LisoStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, LisoStatus> {
    if ptr.is_null() {
        set_error("null path argument");
        return Err(LisoStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(LisoStatus::Config)
        }
    }
}

/// Message of the most recent error on this thread. The pointer stays valid
/// until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn liso_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string; do not free it.
#[no_mangle]
pub extern "C" fn liso_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint into a model handle. On success writes the handle to
/// `out_model`; free it with [`liso_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn liso_model_load(
    path: *const c_char,
    out_model: *mut *mut LisoModel,
) -> LisoStatus {
    if out_model.is_null() {
        set_error("null out_model");
        return LisoStatus::NullArgument;
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_checkpoint(path) {
        Ok(params) => {
            *out_model = Box::into_raw(Box::new(LisoModel { params }));
            LisoStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Frees a model handle. A null pointer is a no-op.
///
/// # Safety
/// `model` must have come from [`liso_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn liso_model_free(model: *mut LisoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Payload capacity of the model in bits per pixel.
///
/// # Safety
/// `model` must be a live handle from [`liso_model_load`].
#[no_mangle]
pub unsafe extern "C" fn liso_model_bpp(model: *const LisoModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).params.config.bpp as u32
}

/// Default encode options matching the CLI defaults.
#[no_mangle]
pub extern "C" fn liso_encode_options_default() -> LisoEncodeOptions {
    LisoEncodeOptions {
        eta: 0.1,
        max_iters: 50,
        patience: 5,
        lambda: 1.0,
        tau: 0.0,
        refine_lbfgs_steps: 0,
        jpeg_quality: 0,
    }
}

/// Embeds `message_len` bytes into the cover image file and writes the stego
/// image to `out_path` (PNG, or JPEG when `jpeg_quality` is nonzero). Fills
/// `out_stats` when non-null.
///
/// # Safety
/// Paths must be NUL-terminated strings; `message` must point to
/// `message_len` readable bytes; `options` and `out_stats` may be null.
#[no_mangle]
pub unsafe extern "C" fn liso_encode_file(
    model: *const LisoModel,
    cover_path: *const c_char,
    message: *const u8,
    message_len: usize,
    out_path: *const c_char,
    options: *const LisoEncodeOptions,
    out_stats: *mut LisoEncodeStats,
) -> LisoStatus {
    if model.is_null() || (message.is_null() && message_len > 0) {
        set_error("null model or message");
        return LisoStatus::NullArgument;
    }
    let cover_path = match path_arg(cover_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let out_path = match path_arg(out_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let opts = if options.is_null() {
        liso_encode_options_default()
    } else {
        *options
    };
    let params = &(*model).params;
    let bytes = if message_len == 0 {
        Vec::new()
    } else {
        std::slice::from_raw_parts(message, message_len).to_vec()
    };

    match encode_impl(params, cover_path, bytes, out_path, &opts) {
        Ok(stats) => {
            if !out_stats.is_null() {
                *out_stats = stats;
            }
            LisoStatus::Ok
        }
        Err(e) => fail(e),
    }
}

fn encode_impl(
    params: &Params<f32>,
    cover_path: &Path,
    bytes: Vec<u8>,
    out_path: &Path,
    opts: &LisoEncodeOptions,
) -> Result<LisoEncodeStats, Error> {
    let cover = load_image(cover_path)?;
    let (h, w) = cover.dims();
    let message = pack_message(&Payload::new(bytes), h, w, params.config.bpp)?;
    let jpeg = if opts.jpeg_quality > 0 {
        JpegConfig {
            quality: opts.jpeg_quality,
            enabled: true,
        }
    } else {
        JpegConfig::default()
    };
    let cfg = OptimizeConfig {
        eta: opts.eta,
        max_iters: opts.max_iters.max(1) as usize,
        patience: opts.patience.max(1) as usize,
        lambda: opts.lambda,
        tau: if opts.tau > 0.0 { opts.tau } else { f32::INFINITY },
        jpeg,
        ..OptimizeConfig::default()
    };
    let started = std::time::Instant::now();
    let (stego, trace) = if opts.refine_lbfgs_steps > 0 {
        liso_refine_lbfgs(
            &cover,
            &message,
            params,
            &cfg,
            opts.refine_lbfgs_steps as usize,
            None,
        )?
    } else {
        let (x, t, _) = liso_encode(&cover, &message, params, &cfg, None)?;
        (x, t)
    };
    let seconds = started.elapsed().as_secs_f64();
    match jpeg.active_quality() {
        Some(q) => save_jpeg(&stego, out_path, q)?,
        None => save_png(&stego, out_path)?,
    }
    let loaded = load_image(out_path)?;
    let probs = decoder_forward(params, &loaded)?;
    let bits = decode_bits(&probs);
    let cover_q = quantize(&cover);
    Ok(LisoEncodeStats {
        error_rate: error_rate(&bits, &message)?,
        psnr: psnr(&cover_q, &loaded)?,
        ssim: ssim(&cover_q, &loaded)?,
        iterations: trace.iterations() as u64,
        seconds,
    })
}

/// Decodes the message bytes hidden in a stego image file. On success the
/// buffer is written to `out_bytes`/`out_len`; release it with
/// [`liso_bytes_free`].
///
/// # Safety
/// `stego_path` must be a NUL-terminated string; `out_bytes` and `out_len`
/// must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn liso_decode_file(
    model: *const LisoModel,
    stego_path: *const c_char,
    out_bytes: *mut *mut u8,
    out_len: *mut usize,
) -> LisoStatus {
    if model.is_null() || out_bytes.is_null() || out_len.is_null() {
        set_error("null argument");
        return LisoStatus::NullArgument;
    }
    let stego_path = match path_arg(stego_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let params = &(*model).params;
    let run = || -> Result<Vec<u8>, Error> {
        let stego = load_image(stego_path)?;
        let probs = decoder_forward(params, &stego)?;
        let bits = decode_bits(&probs);
        Ok(unpack_message(&bits)?.into_bytes())
    };
    match run() {
        Ok(bytes) => {
            let mut boxed = bytes.into_boxed_slice();
            *out_len = boxed.len();
            *out_bytes = if boxed.is_empty() {
                ptr::null_mut()
            } else {
                boxed.as_mut_ptr()
            };
            std::mem::forget(boxed);
            LisoStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Frees a buffer returned by [`liso_decode_file`].
///
/// # Safety
/// `bytes`/`len` must be exactly the pair produced by a decode call; null is
/// a no-op.
#[no_mangle]
pub unsafe extern "C" fn liso_bytes_free(bytes: *mut u8, len: usize) {
    if !bytes.is_null() {
        drop(Box::from_raw(std::slice::from_raw_parts_mut(bytes, len)));
    }
}
