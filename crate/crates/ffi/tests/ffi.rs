use std::ffi::{CStr, CString};
use std::ptr;

use winoquant_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(wq_last_error()) }.to_string_lossy().into_owned()
}

fn random(dims: &[usize], std: f64, seed: u64) -> *mut WqTensor {
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { wq_tensor_random(dims.as_ptr(), dims.len(), 0.0, std, seed, &mut t) }, WqStatus::Ok);
    t
}

#[test]
fn tensor_roundtrip_through_file() {
    let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
    let dims = [2usize, 3, 4];
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(wq_tensor_new(dims.as_ptr(), 3, data.as_ptr(), &mut t), WqStatus::Ok);
        assert_eq!(wq_tensor_rank(t), 3);
        assert_eq!(wq_tensor_len(t), 24);
        let dir = tempfile::tempdir().unwrap();
        let p = CString::new(dir.path().join("t.wqt").to_str().unwrap()).unwrap();
        assert_eq!(wq_tensor_save(t, p.as_ptr()), WqStatus::Ok);
        let mut u = ptr::null_mut();
        assert_eq!(wq_tensor_load(p.as_ptr(), &mut u), WqStatus::Ok);
        let mut got = [0usize; 4];
        assert_eq!(wq_tensor_dims(u, got.as_mut_ptr(), 4), WqStatus::Ok);
        assert_eq!(&got[..3], &dims);
        assert_eq!(std::slice::from_raw_parts(wq_tensor_data(u), 24), &data[..]);
        assert_eq!(wq_tensor_dims(u, got.as_mut_ptr(), 2), WqStatus::InvalidArgument);
        wq_tensor_free(t);
        wq_tensor_free(u);
    }
}

#[test]
fn null_pointers_and_messages() {
    let dims = [2usize, 2];
    unsafe {
        assert_eq!(wq_tensor_new(dims.as_ptr(), 2, ptr::null(), ptr::null_mut()), WqStatus::NullPointer);
        assert!(last_error().contains("out"));
        let mut t = ptr::null_mut();
        assert_eq!(wq_tensor_new(ptr::null(), 2, ptr::null(), &mut t), WqStatus::NullPointer);
        let zero = [0usize, 3];
        assert_eq!(wq_tensor_new(zero.as_ptr(), 2, ptr::null(), &mut t), WqStatus::InvalidShape);
        assert!(last_error().contains("zero"));
        assert_eq!(wq_tensor_rank(ptr::null()), 0);
        assert!(wq_tensor_data(ptr::null()).is_null());
        assert!(wq_transform_residual(ptr::null()).is_nan());
        wq_tensor_free(ptr::null_mut());
        wq_transform_free(ptr::null_mut());
        let missing = CString::new("/nonexistent/x.wqt").unwrap();
        assert_eq!(wq_tensor_load(missing.as_ptr(), &mut t), WqStatus::Io);
    }
}

#[test]
fn transforms_and_scales() {
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(wq_transform_standard(43, &mut t), WqStatus::Ok);
        let mut buf = [0.0f64; 64];
        let (mut r, mut c) = (0usize, 0usize);
        assert_eq!(wq_transform_matrix(t, WqMatrix::BT, buf.as_mut_ptr(), 64, &mut r, &mut c), WqStatus::Ok);
        assert_eq!((r, c), (6, 6));
        assert_eq!(&buf[..6], &[4.0, 0.0, -5.0, 0.0, 1.0, 0.0]);
        assert_eq!(wq_transform_matrix(t, WqMatrix::G, buf.as_mut_ptr(), 4, &mut r, &mut c), WqStatus::InvalidArgument);
        assert_eq!(wq_transform_residual(t), 0.0);
        wq_transform_free(t);

        assert_eq!(wq_transform_standard(53, &mut t), WqStatus::InvalidArgument);
        let sb = [1.0, -4.5, -4.5, 90.0, 90.0, 1.4, 1.4, 1.0];
        let sg = [1.0, -0.3, -0.3, 0.2, 0.2, 0.7, 0.7, 1.0];
        assert_eq!(wq_transform_with_scales(63, sb.as_ptr(), sg.as_ptr(), 8, &mut t), WqStatus::Ok);
        assert!(wq_transform_residual(t) <= 1e-12);
        wq_transform_free(t);
        let zero = [0.0; 8];
        assert_eq!(wq_transform_with_scales(63, zero.as_ptr(), sg.as_ptr(), 8, &mut t), WqStatus::InvalidScale);
        assert_eq!(wq_transform_with_scales(63, sb.as_ptr(), sg.as_ptr(), 6, &mut t), WqStatus::InvalidArgument);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        std::fs::write(&path, r#"{"tile": "F43", "s_b": [4, -6, -6, 24, 24, 1], "s_g": [0.25, -0.2, -0.2, 0.05, 0.05, 1]}"#).unwrap();
        let p = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(wq_transform_load_scales(p.as_ptr(), &mut t), WqStatus::Ok);
        wq_transform_free(t);
        std::fs::write(&path, "{oops").unwrap();
        assert_eq!(wq_transform_load_scales(p.as_ptr(), &mut t), WqStatus::Format);
    }
}

#[test]
fn convolution_modes() {
    let x = random(&[1, 32, 12, 12], 1.0, 1);
    let w = random(&[16, 32, 3, 3], 0.08, 2);
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(wq_transform_standard(43, &mut t), WqStatus::Ok);
        let mut outs = Vec::new();
        for mode in [WqConvMode::Fp, WqConvMode::DirectQ8, WqConvMode::WinoFp, WqConvMode::WinoQ8] {
            let mut y = ptr::null_mut();
            assert_eq!(wq_conv(x, w, t, mode, 1, 32, 8, &mut y), WqStatus::Ok, "{mode:?}: {}", last_error());
            outs.push(y);
        }
        let mut db = [0.0; 4];
        for (i, &y) in outs.iter().enumerate() {
            assert_eq!(wq_sqnr(outs[0], y, &mut db[i]), WqStatus::Ok);
        }
        assert_eq!(db[0], 300.0);
        assert!(db[2] > 80.0, "{db:?}");
        assert!(db[1] > 30.0 && db[3] > 10.0, "{db:?}");

        let mut y = ptr::null_mut();
        assert_eq!(wq_conv(x, w, ptr::null(), WqConvMode::WinoQ8, 1, 32, 8, &mut y), WqStatus::NullPointer);
        assert_eq!(wq_conv(x, w, t, WqConvMode::WinoQ8, 1, 48, 8, &mut y), WqStatus::InvalidSpec);
        assert_eq!(wq_conv(x, w, t, WqConvMode::WinoQ8, 1, 32, 2, &mut y), WqStatus::InvalidArgument);
        let bad = random(&[16, 8, 3, 3], 0.1, 3);
        assert_eq!(wq_conv(x, bad, t, WqConvMode::Fp, 1, 32, 8, &mut y), WqStatus::InvalidShape);
        let small = random(&[1, 16, 12, 12], 1.0, 3);
        assert_eq!(wq_sqnr(x, small, &mut db[0]), WqStatus::InvalidShape);
        wq_tensor_free(bad);
        wq_tensor_free(small);
        for y in outs {
            wq_tensor_free(y);
        }
        wq_transform_free(t);
        wq_tensor_free(x);
        wq_tensor_free(w);
    }
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/winoquant.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in ["wq_conv", "wq_last_error", "wq_tensor_free", "WQ_STATUS_OK", "typedef struct WqTensor WqTensor"] {
        assert!(text.contains(sym), "{sym}");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .status()
    else {
        eprintln!("cc not found; syntax check skipped");
        return;
    };
    assert!(status.success());
}
