use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use anyhow::Result;
use cair::config::RunConfig;
use cair::{weights, CairConfig, CairNet, Tensor};
use cair_ffi::*;

fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.cair = CairConfig {
        levels: 2,
        base_width: 4,
        block_counts: vec![1, 1, 1],
        ca_width: 4,
        ..CairConfig::default()
    };
    cfg
}

/// Writes an identity-initialized tiny model and its config into `dir`.
fn write_identity_model(dir: &Path) -> Result<usize> {
    let cfg = tiny_run_config();
    let (net, mut store) = CairNet::init::<f32>(&cfg.model.cair, 5)?;
    for id in std::iter::once(net.ending.weight).chain(net.ending.bias) {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape))?;
    }
    std::fs::write(dir.join("config.txt"), cfg.serialize())?;
    weights::save_store(&dir.join("weights.bin"), &store)?;
    Ok(store.num_scalars())
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cair_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn ramp(h: usize, w: usize) -> Vec<f32> {
    (0..3 * h * w).map(|i| (i % 97) as f32 / 96.0).collect()
}

#[test]
fn identity_model_round_trips_pixels() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let expected_params = write_identity_model(dir.path())?;
    let w = cstr(&dir.path().join("weights.bin"));
    let mut model = ptr::null_mut();
    let st = unsafe { cair_model_load(w.as_ptr(), ptr::null(), &mut model) };
    assert_eq!(st, CairStatus::Ok, "{}", last_error());
    assert!(!model.is_null());

    let mut count = 0usize;
    assert_eq!(
        unsafe { cair_model_param_count(model, &mut count) },
        CairStatus::Ok
    );
    assert_eq!(count, expected_params);

    let (h, wd) = (10, 14);
    let input = ramp(h, wd);
    for (tta, tlsc) in [(0, 0), (1, 0), (0, 4)] {
        let mut out = vec![0f32; input.len()];
        let st = unsafe {
            cair_model_restore(model, input.as_ptr(), h, wd, tta, tlsc, out.as_mut_ptr())
        };
        assert_eq!(st, CairStatus::Ok, "{}", last_error());
        assert_eq!(out, input);
        let mut p = 0.0;
        assert_eq!(
            unsafe { cair_psnr(out.as_ptr(), input.as_ptr(), h, wd, &mut p) },
            CairStatus::Ok
        );
        assert_eq!(p, 120.0);
    }
    unsafe { cair_model_free(model) };
    Ok(())
}

#[test]
fn metrics_match_the_library() -> Result<()> {
    let (h, w) = (16, 16);
    let a = ramp(h, w);
    let b: Vec<f32> = a.iter().map(|v| (v * 0.9 + 0.05).min(1.0)).collect();
    let (mut p, mut s) = (0.0, 0.0);
    assert_eq!(
        unsafe { cair_psnr(a.as_ptr(), b.as_ptr(), h, w, &mut p) },
        CairStatus::Ok
    );
    assert_eq!(
        unsafe { cair_ssim(a.as_ptr(), b.as_ptr(), h, w, &mut s) },
        CairStatus::Ok
    );
    let ta = Tensor::from_vec(&[1, 3, h, w], a.clone())?;
    let tb = Tensor::from_vec(&[1, 3, h, w], b)?;
    assert_eq!(p, cair::metrics::psnr(&ta, &tb)?);
    assert_eq!(s, cair::metrics::ssim(&ta, &tb)?);
    let mut same = 0.0;
    assert_eq!(
        unsafe { cair_ssim(a.as_ptr(), a.as_ptr(), h, w, &mut same) },
        CairStatus::Ok
    );
    assert!((same - 1.0).abs() < 1e-12);
    Ok(())
}

#[test]
fn errors_map_to_status_codes() -> Result<()> {
    let dir = tempfile::tempdir()?;
    write_identity_model(dir.path())?;
    let bad = dir.path().join("bad.bin");
    let mut bytes = std::fs::read(dir.path().join("weights.bin"))?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&bad, bytes)?;
    let cfg = cstr(&dir.path().join("config.txt"));
    let mut model = ptr::null_mut();

    let st = unsafe { cair_model_load(cstr(&bad).as_ptr(), cfg.as_ptr(), &mut model) };
    assert_eq!(st, CairStatus::CorruptWeights);
    assert!(model.is_null());
    assert!(last_error().contains("corrupt weights"), "{}", last_error());

    let missing = dir.path().join("nope.bin");
    let st = unsafe { cair_model_load(cstr(&missing).as_ptr(), cfg.as_ptr(), &mut model) };
    assert_eq!(st, CairStatus::Io);

    let mut other = tiny_run_config();
    other.model.cair.base_width = 8;
    other.model.cair.ca_width = 8;
    let other_path = dir.path().join("other.txt");
    std::fs::write(&other_path, other.serialize())?;
    let w = cstr(&dir.path().join("weights.bin"));
    let st = unsafe { cair_model_load(w.as_ptr(), cstr(&other_path).as_ptr(), &mut model) };
    assert_eq!(st, CairStatus::ShapeMismatch);
    assert!(last_error().contains("expected"), "{}", last_error());

    let st = unsafe { cair_model_load(ptr::null(), cfg.as_ptr(), &mut model) };
    assert_eq!(st, CairStatus::NullPointer);
    assert_eq!(
        unsafe { cair_model_load(w.as_ptr(), cfg.as_ptr(), ptr::null_mut()) },
        CairStatus::NullPointer
    );

    let st = unsafe { cair_model_load(w.as_ptr(), cfg.as_ptr(), &mut model) };
    assert_eq!(st, CairStatus::Ok);
    assert!(last_error().is_empty());
    let img = ramp(4, 4);
    let mut out = vec![0f32; img.len()];
    let st = unsafe { cair_model_restore(model, img.as_ptr(), 0, 4, 0, 0, out.as_mut_ptr()) };
    assert_eq!(st, CairStatus::InvalidArgument);
    let st = unsafe { cair_model_restore(model, img.as_ptr(), 4, 4, 0, 0, ptr::null_mut()) };
    assert_eq!(st, CairStatus::NullPointer);
    let st = unsafe { cair_model_restore(ptr::null(), img.as_ptr(), 4, 4, 0, 0, out.as_mut_ptr()) };
    assert_eq!(st, CairStatus::NullPointer);
    unsafe {
        cair_model_free(model);
        cair_model_free(ptr::null_mut());
    }
    Ok(())
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(cair_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles_as_c() -> Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/cair.h"))?;
    for name in [
        "cair_model_load",
        "cair_model_free",
        "cair_model_param_count",
        "cair_model_restore",
        "cair_psnr",
        "cair_ssim",
        "cair_last_error",
        "cair_version",
        "CAIR_STATUS_CORRUPT_WEIGHTS",
        "typedef struct CairModel CairModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir()?;
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"cair.h\"\nint main(void) {\n  CairModel *m = 0;\n  CairStatus s = cair_model_load(\"w\", 0, &m);\n  cair_model_free(m);\n  return s == CAIR_STATUS_OK ? 0 : 1;\n}\n",
    )?;
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(root.join("include"))
        .arg(&src)
        .status()?;
    assert!(status.success(), "{cc} rejected the header");
    Ok(())
}
