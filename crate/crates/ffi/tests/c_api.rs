use std::ffi::{CStr, CString};
use std::ptr;

use slider_forge::config::AppConfig;
use slider_forge::trainer::{save_checkpoint, train_slider};
use slider_forge_ffi::*;

const CONFIG: &str = "[training]\nsteps = 20\n";

fn last_error() -> String {
    unsafe { CStr::from_ptr(sf_last_error_message()) }.to_string_lossy().into_owned()
}

fn engine() -> *mut SfEngine {
    let text = CString::new(CONFIG).unwrap();
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { sf_engine_new(text.as_ptr(), &mut e) }, SfStatus::Ok, "{}", last_error());
    assert!(!e.is_null());
    e
}

#[test]
fn generate_through_the_c_interface() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("brightness.sfck");
    let cfg = AppConfig::from_toml_str(CONFIG).unwrap();
    save_checkpoint(&train_slider(&cfg).unwrap(), &path).unwrap();

    let e = engine();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(sf_engine_load_slider(e, cpath.as_ptr()), SfStatus::Ok, "{}", last_error());
        let mut count = 0;
        assert_eq!(sf_engine_slider_count(e, &mut count), SfStatus::Ok);
        assert_eq!(count, 1);
        let mut len = 0;
        assert_eq!(sf_engine_sample_len(e, &mut len), SfStatus::Ok);
        assert_eq!(len, 64);

        let prompt = CString::new("neutral").unwrap();
        let name = CString::new("brightness").unwrap();
        let names = [name.as_ptr()];
        let mut base = vec![0.0; len];
        let mut zero = vec![0.0; len];
        let mut up = vec![0.0; len];
        let mut again = vec![0.0; len];
        assert_eq!(sf_engine_generate(e, prompt.as_ptr(), 5, 0, ptr::null(), ptr::null(), 0, base.as_mut_ptr(), len), SfStatus::Ok);
        assert_eq!(sf_engine_generate(e, prompt.as_ptr(), 5, 0, names.as_ptr(), [0.0].as_ptr(), 1, zero.as_mut_ptr(), len), SfStatus::Ok);
        assert_eq!(sf_engine_generate(e, prompt.as_ptr(), 5, 0, names.as_ptr(), [2.0].as_ptr(), 1, up.as_mut_ptr(), len), SfStatus::Ok);
        assert_eq!(sf_engine_generate(e, prompt.as_ptr(), 5, 0, names.as_ptr(), [2.0].as_ptr(), 1, again.as_mut_ptr(), len), SfStatus::Ok);
        assert_eq!(base, zero);
        assert_eq!(up, again);
        assert_ne!(base, up);

        let mut small = vec![0.0; len - 1];
        let status = sf_engine_generate(e, prompt.as_ptr(), 5, 0, ptr::null(), ptr::null(), 0, small.as_mut_ptr(), len - 1);
        assert_eq!(status, SfStatus::BufferTooSmall);
        assert!(last_error().contains("needed"));

        let ghost = CString::new("ghost").unwrap();
        let status = sf_engine_generate(e, prompt.as_ptr(), 5, 0, [ghost.as_ptr()].as_ptr(), [1.0].as_ptr(), 1, up.as_mut_ptr(), len);
        assert_eq!(status, SfStatus::UnknownSlider);
        assert!(last_error().contains("ghost"));

        let status = sf_engine_generate(e, prompt.as_ptr(), 5, 0, names.as_ptr(), [f64::NAN].as_ptr(), 1, up.as_mut_ptr(), len);
        assert_eq!(status, SfStatus::InvalidArgument);

        assert_eq!(sf_engine_load_slider(e, cpath.as_ptr()), SfStatus::InvalidArgument, "duplicate slider");
        let missing = CString::new(dir.path().join("missing.sfck").to_str().unwrap()).unwrap();
        assert_eq!(sf_engine_load_slider(e, missing.as_ptr()), SfStatus::Checkpoint);
        sf_engine_free(e);
    }
}

#[test]
fn null_and_bad_config_are_reported() {
    unsafe {
        let mut out = 0usize;
        assert_eq!(sf_engine_slider_count(ptr::null(), &mut out), SfStatus::NullPointer);
        assert_eq!(sf_engine_new(ptr::null(), ptr::null_mut()), SfStatus::NullPointer);
        let bad = CString::new("[schedule]\nsteepness = 0\n").unwrap();
        let mut e = ptr::null_mut();
        assert_eq!(sf_engine_new(bad.as_ptr(), &mut e), SfStatus::Config);
        assert!(e.is_null());
        assert!(last_error().contains("schedule.steepness"));
        sf_engine_free(ptr::null_mut());
    }
}

#[test]
fn loss_weights_match_the_schedule() {
    let (mut perp, mut tri) = (0.0, 0.0);
    unsafe {
        assert_eq!(sf_loss_weights(77, 100, 0.1, &mut perp, &mut tri), SfStatus::Ok);
        assert!((perp - 0.908877).abs() < 1e-6);
        assert_eq!(perp + tri, 1.0);
        assert_eq!(sf_loss_weights(100, 100, 0.1, &mut perp, &mut tri), SfStatus::Ok);
        assert_eq!(perp, 0.5);
        assert_eq!(sf_loss_weights(1, 100, -1.0, &mut perp, &mut tri), SfStatus::Config);
        assert!(last_error().contains("steepness"));
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(sf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/slider_forge.h");
    let text = std::fs::read_to_string(header).unwrap();
    for symbol in ["sf_engine_new", "sf_engine_free", "sf_engine_generate", "sf_last_error_message", "SF_STATUS_PANIC"] {
        assert!(text.contains(symbol), "{symbol} missing from header");
    }
    let status = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .status()
        .expect("a C compiler is available");
    assert!(status.success());
}
