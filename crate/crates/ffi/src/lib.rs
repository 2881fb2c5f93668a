//! C interface to slider-forge.
//!
//! Engines are opaque handles created by `sf_engine_new` and released with
//! `sf_engine_free`. Every fallible call returns an `SfStatus`; on failure the
//! message is available from `sf_last_error_message` on the same thread.
//! Panics never cross the boundary; they are reported as `SF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use slider_forge::config::AppConfig;
use slider_forge::engine::{SliderEngine, SliderSetting};
use slider_forge::trainer::{loss_weights, LossWeightSchedule};
use slider_forge::Error;

/// Result codes shared by every function that can fail.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownSlider = 3,
    Checkpoint = 4,
    Config = 5,
    BufferTooSmall = 6,
    Internal = 7,
    Panic = 8,
}

/// Opaque engine handle.
pub struct SfEngine {
    inner: SliderEngine,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SfStatus {
    match e {
        Error::UnknownSlider(_) => SfStatus::UnknownSlider,
        Error::Config { .. } => SfStatus::Config,
        Error::CorruptCheckpoint(_) | Error::VersionMismatch { .. } | Error::Incompatible { .. } | Error::Io(_) => {
            SfStatus::Checkpoint
        }
        Error::InvalidArgument { .. }
        | Error::UnknownCondition(_)
        | Error::DuplicateSlider(_)
        | Error::NonFinite(_)
        | Error::ShapeMismatch { .. } => SfStatus::InvalidArgument,
        _ => SfStatus::Internal,
    }
}

fn fail(status: SfStatus, msg: &str) -> SfStatus {
    set_error(msg);
    status
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), SfStatus>) -> SfStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfStatus::Ok,
        Ok(Err(status)) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(SfStatus::Panic, &format!("panic: {msg}"))
        }
    }
}

fn lift<T>(r: slider_forge::Result<T>) -> Result<T, SfStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, SfStatus> {
    if p.is_null() {
        return Err(fail(SfStatus::NullPointer, &format!("`{name}` is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(SfStatus::InvalidArgument, &format!("`{name}` is not UTF-8")))
}

unsafe fn engine_ref<'a>(engine: *const SfEngine) -> Result<&'a SfEngine, SfStatus> {
    engine.as_ref().ok_or_else(|| fail(SfStatus::NullPointer, "engine handle is null"))
}

fn out_ptr<T>(p: *mut T, name: &str) -> Result<(), SfStatus> {
    if p.is_null() {
        Err(fail(SfStatus::NullPointer, &format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

/// Creates an engine from TOML config text, or the default config when
/// `config_toml` is null. Building the base model takes a few seconds.
///
/// # Safety
/// `config_toml` must be null or a valid nul-terminated string; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_engine_new(config_toml: *const c_char, out: *mut *mut SfEngine) -> SfStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = std::ptr::null_mut();
        let cfg = if config_toml.is_null() {
            AppConfig::default()
        } else {
            lift(AppConfig::from_toml_str(str_arg(config_toml, "config_toml")?))?
        };
        let inner = lift(SliderEngine::new(&cfg))?;
        *out = Box::into_raw(Box::new(SfEngine { inner }));
        Ok(())
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` must be null or a handle from `sf_engine_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_engine_free(engine: *mut SfEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Loads a slider checkpoint file into the engine's catalog.
///
/// # Safety
/// `engine` must be a live handle; `path` a valid nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sf_engine_load_slider(engine: *mut SfEngine, path: *const c_char) -> SfStatus {
    guard(|| {
        let engine = engine.as_mut().ok_or_else(|| fail(SfStatus::NullPointer, "engine handle is null"))?;
        let path = str_arg(path, "path")?;
        lift(engine.inner.load_checkpoint(Path::new(path)))?;
        Ok(())
    })
}

/// # Safety
/// `engine` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_engine_slider_count(engine: *const SfEngine, out: *mut usize) -> SfStatus {
    guard(|| {
        let engine = engine_ref(engine)?;
        out_ptr(out, "out")?;
        *out = engine.inner.slider_names().len();
        Ok(())
    })
}

/// Number of `double`s in one generated image (channels × height × width).
///
/// # Safety
/// `engine` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_engine_sample_len(engine: *const SfEngine, out: *mut usize) -> SfStatus {
    guard(|| {
        let engine = engine_ref(engine)?;
        out_ptr(out, "out")?;
        *out = engine.inner.config().sample_shape().iter().product();
        Ok(())
    })
}

/// Generates `prompt` from `seed` with `n_sliders` sliders applied and
/// writes the channel-major pixels to `out`. `steps` of 0 uses the config
/// default. Returns `SF_STATUS_BUFFER_TOO_SMALL` when `out_len` is less than
/// `sf_engine_sample_len`.
///
/// # Safety
/// `engine` must be a live handle, `prompt` a valid string, `names` and
/// `scales` arrays of `n_sliders` entries (may be null when `n_sliders` is 0)
/// and `out` a buffer of `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sf_engine_generate(
    engine: *const SfEngine,
    prompt: *const c_char,
    seed: u64,
    steps: usize,
    names: *const *const c_char,
    scales: *const f64,
    n_sliders: usize,
    out: *mut f64,
    out_len: usize,
) -> SfStatus {
    guard(|| {
        let engine = engine_ref(engine)?;
        let prompt = str_arg(prompt, "prompt")?;
        out_ptr(out, "out")?;
        let mut sliders = Vec::with_capacity(n_sliders);
        if n_sliders > 0 {
            out_ptr(names as *mut *const c_char, "names")?;
            out_ptr(scales as *mut f64, "scales")?;
            let names = std::slice::from_raw_parts(names, n_sliders);
            let scales = std::slice::from_raw_parts(scales, n_sliders);
            for (i, (&n, &s)) in names.iter().zip(scales).enumerate() {
                sliders.push(SliderSetting { name: str_arg(n, &format!("names[{i}]"))?.to_owned(), scale: s });
            }
        }
        let steps = (steps > 0).then_some(steps);
        let generation = lift(engine.inner.generate(prompt, seed, steps, &sliders, false))?;
        let pixels = generation.edited.data();
        if out_len < pixels.len() {
            return Err(fail(
                SfStatus::BufferTooSmall,
                &format!("output buffer holds {out_len} values, {} needed", pixels.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, pixels.len()).copy_from_slice(pixels);
        Ok(())
    })
}

/// Evaluates the perceptual and triplet loss weights at step `t`.
///
/// # Safety
/// `out_perp` and `out_triplet` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sf_loss_weights(
    t: u64,
    t0: u64,
    steepness: f64,
    out_perp: *mut f64,
    out_triplet: *mut f64,
) -> SfStatus {
    guard(|| {
        out_ptr(out_perp, "out_perp")?;
        out_ptr(out_triplet, "out_triplet")?;
        let schedule = lift(LossWeightSchedule::new(t0, steepness, 0.0))?;
        let (perp, triplet) = loss_weights(t, &schedule);
        *out_perp = perp;
        *out_triplet = triplet;
        Ok(())
    })
}

/// Message for the last failed call on this thread, or an empty string.
/// Valid until the next `sf_*` call on this thread.
#[no_mangle]
pub extern "C" fn sf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
