use std::ffi::{c_char, CString};
use std::ptr;

use emodo_ffi::*;

fn identity_pose() -> EmodoPose {
    EmodoPose {
        rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        translation: [0.0; 3],
    }
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let len = unsafe { emodo_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take_while(|&&c| c != 0).map(|&c| c as u8).collect();
    assert!(len >= bytes.len());
    String::from_utf8(bytes).unwrap()
}

fn surface(x: f64, y: f64) -> f64 {
    0.05 * (3.0 * x).sin() * (2.0 * y).cos() + 0.03 * (4.0 * y).sin()
}

/// 200×200 grid at 1 cm over [-1, 1]², filled from `surface`.
fn filled_grid() -> *mut EmodoGrid {
    let mut grid = ptr::null_mut();
    unsafe {
        assert_eq!(emodo_grid_new(0.01, 200, -1.0, -1.0, &mut grid), EmodoStatus::Ok);
    }
    let mut xyz = Vec::new();
    for ix in 0..200 {
        for iy in 0..200 {
            let (x, y) = (-0.995 + ix as f64 * 0.01, -0.995 + iy as f64 * 0.01);
            xyz.extend_from_slice(&[x, y, surface(x, y)]);
        }
    }
    let vars = vec![1e-6; xyz.len() / 3];
    unsafe {
        assert_eq!(
            emodo_grid_integrate(grid, xyz.as_ptr(), vars.as_ptr(), vars.len(), 0.025),
            EmodoStatus::Ok
        );
    }
    grid
}

#[test]
fn grid_integrate_and_read_back() {
    let mut grid = ptr::null_mut();
    unsafe {
        assert_eq!(emodo_grid_new(0.1, 10, 0.0, 0.0, &mut grid), EmodoStatus::Ok);
        let xyz = [0.25, 0.35, 1.0, 0.26, 0.36, 1.02];
        let vars = [1e-4, 1e-4];
        assert_eq!(emodo_grid_integrate(grid, xyz.as_ptr(), vars.as_ptr(), 2, 0.025), EmodoStatus::Ok);
        let (mut occ, mut h, mut var) = (false, 0.0, 0.0);
        assert_eq!(emodo_grid_cell(grid, 2, 3, &mut occ, &mut h, &mut var), EmodoStatus::Ok);
        assert!(occ);
        assert!((h - 1.01).abs() < 1e-12);
        assert!((var - 5e-5).abs() < 1e-15);
        assert_eq!(emodo_grid_cell(grid, 3, 2, &mut occ, &mut h, &mut var), EmodoStatus::Ok);
        assert!(!occ);
        let mut count = 0;
        assert_eq!(emodo_grid_occupied_count(grid, &mut count), EmodoStatus::Ok);
        assert_eq!(count, 1);
        assert_eq!(emodo_grid_cell(grid, 10, 0, &mut occ, &mut h, &mut var), EmodoStatus::InvalidArgument);
        emodo_grid_free(grid);
    }
}

#[test]
fn snapshot_round_trip_and_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("g.emap").to_str().unwrap()).unwrap();
    let grid = filled_grid();
    unsafe {
        assert_eq!(emodo_grid_write_snapshot(grid, path.as_ptr()), EmodoStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(emodo_grid_read_snapshot(path.as_ptr(), &mut loaded), EmodoStatus::Ok);
        let (mut occ, mut h, mut var) = (false, 0.0, 0.0);
        assert_eq!(emodo_grid_cell(loaded, 57, 121, &mut occ, &mut h, &mut var), EmodoStatus::Ok);
        assert!(occ);
        // snapshot stores 32-bit floats
        assert!((h - surface(-0.995 + 0.57, -0.995 + 1.21)).abs() < 1e-6);
        emodo_grid_free(loaded);

        let bad = dir.path().join("bad.emap");
        std::fs::write(&bad, b"not a snapshot").unwrap();
        let bad = CString::new(bad.to_str().unwrap()).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(emodo_grid_read_snapshot(bad.as_ptr(), &mut out), EmodoStatus::MalformedInput);
        assert!(out.is_null());
        let missing = CString::new(dir.path().join("missing.emap").to_str().unwrap()).unwrap();
        assert_eq!(emodo_grid_read_snapshot(missing.as_ptr(), &mut out), EmodoStatus::Io);
        assert!(last_error().contains("missing.emap"));
        emodo_grid_free(grid);
    }
}

#[test]
fn null_and_invalid_arguments_are_reported() {
    unsafe {
        let mut grid = ptr::null_mut();
        assert_eq!(emodo_grid_new(0.0, 10, 0.0, 0.0, &mut grid), EmodoStatus::InvalidArgument);
        assert!(last_error().contains("resolution"));
        assert_eq!(emodo_grid_new(0.1, 10, 0.0, 0.0, ptr::null_mut()), EmodoStatus::NullPointer);
        assert!(last_error().contains("out"));
        let mut count = 0;
        assert_eq!(emodo_grid_occupied_count(ptr::null(), &mut count), EmodoStatus::NullPointer);
        assert_eq!(emodo_grid_write_snapshot(ptr::null(), ptr::null()), EmodoStatus::NullPointer);

        let mut grid = ptr::null_mut();
        assert_eq!(emodo_grid_new(0.1, 10, 0.0, 0.0, &mut grid), EmodoStatus::Ok);
        let xyz = [0.5, 0.5, 0.0];
        let bad_var = [-1.0];
        assert_eq!(
            emodo_grid_integrate(grid, xyz.as_ptr(), bad_var.as_ptr(), 1, 0.025),
            EmodoStatus::InvalidArgument
        );
        assert_eq!(
            emodo_grid_integrate(grid, xyz.as_ptr(), ptr::null(), 1, 0.025),
            EmodoStatus::NullPointer
        );
        let mut reg = std::mem::zeroed::<EmodoRegistration>();
        let mut skewed = identity_pose();
        skewed.rotation[1] = 0.5;
        assert_eq!(
            emodo_register(grid, xyz.as_ptr(), 1, &skewed, &mut reg),
            EmodoStatus::InvalidArgument
        );
        assert_eq!(
            emodo_register(grid, xyz.as_ptr(), 1, &identity_pose(), &mut reg),
            EmodoStatus::RegistrationFailed
        );
        assert_eq!(last_error(), "insufficient_map");
        emodo_grid_free(grid);
        emodo_grid_free(ptr::null_mut());
    }
}

#[test]
fn last_error_truncates_to_capacity() {
    unsafe {
        let mut grid = ptr::null_mut();
        assert_eq!(emodo_grid_new(-1.0, 10, 0.0, 0.0, &mut grid), EmodoStatus::InvalidArgument);
        let mut buf = [0 as c_char; 8];
        let full = emodo_last_error(buf.as_mut_ptr(), buf.len());
        assert!(full > 7);
        assert_eq!(buf[7], 0);
        assert_eq!(emodo_last_error(ptr::null_mut(), 0), full);
    }
}

#[test]
fn register_recovers_offset() {
    let grid = filled_grid();
    let cloud: Vec<f64> = (0..150)
        .flat_map(|i| (0..150).map(move |j| (i, j)))
        .flat_map(|(i, j)| {
            let (x, y) = (-0.75 + i as f64 * 0.01, -0.75 + j as f64 * 0.01);
            [x, y, surface(x, y)]
        })
        .collect();
    let mut prior = identity_pose();
    prior.translation = [0.01, -0.008, 0.015];
    let mut reg = unsafe { std::mem::zeroed::<EmodoRegistration>() };
    unsafe {
        assert_eq!(
            emodo_register(grid, cloud.as_ptr(), cloud.len() / 3, &prior, &mut reg),
            EmodoStatus::Ok
        );
        emodo_grid_free(grid);
    }
    assert!(reg.converged);
    for (k, expected) in [-0.01, 0.008, -0.015].iter().enumerate() {
        assert!((reg.correction.translation[k] - expected).abs() < 1e-3, "{:?}", reg.correction);
    }
    for r in 0..6 {
        assert!(reg.covariance[r * 6 + r] > 0.0);
        for c in 0..6 {
            assert!((reg.covariance[r * 6 + c] - reg.covariance[c * 6 + r]).abs() < 1e-18);
        }
    }
}

#[test]
fn pipeline_bootstraps_then_fuses() {
    let mut p = ptr::null_mut();
    let mut initial = identity_pose();
    initial.translation = [0.0, 0.0, 1.0];
    // Camera looking straight down from 1 m: x right, y back, z down.
    let ext = EmodoPose {
        rotation: [1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0],
        translation: [0.0; 3],
    };
    let config = CString::new("mode = \"icp-fused\"\n[grid]\nresolution = 0.01\nside_cells = 200\n").unwrap();
    unsafe {
        assert_eq!(emodo_pipeline_new(config.as_ptr(), &ext, &initial, 0.0, &mut p), EmodoStatus::Ok);
    }
    let cloud: Vec<f64> = (0..120)
        .flat_map(|i| (0..120).map(move |j| (i, j)))
        .flat_map(|(i, j)| {
            let (x, y) = (-0.6 + i as f64 * 0.01, -0.6 + j as f64 * 0.01);
            [x, -y, 1.0 - surface(x, y)]
        })
        .collect();
    let mut statuses = Vec::new();
    for k in 0..3 {
        let inc = EmodoIncrement {
            timestamp: 0.1 * (k + 1) as f64,
            dt: 0.1,
            rotation: identity_pose().rotation,
            translation: [0.0; 3],
            noise: [0.0; 36],
        };
        let mut out = unsafe { std::mem::zeroed::<EmodoFrameResult>() };
        unsafe {
            assert_eq!(emodo_pipeline_predict(p, &inc), EmodoStatus::Ok);
            assert_eq!(
                emodo_pipeline_process_frame(p, inc.timestamp, cloud.as_ptr(), cloud.len() / 3, &mut out),
                EmodoStatus::Ok
            );
        }
        statuses.push(out.status);
        assert!((out.body_pose.translation[2] - 1.0).abs() < 2e-3);
    }
    assert_eq!(statuses[0], EmodoFrameStatus::Bootstrap);
    assert_eq!(statuses[1], EmodoFrameStatus::Fused);

    unsafe {
        let mut pose = identity_pose();
        assert_eq!(emodo_pipeline_pose(p, &mut pose), EmodoStatus::Ok);
        let mut grid = ptr::null_mut();
        assert_eq!(emodo_pipeline_copy_grid(p, &mut grid), EmodoStatus::Ok);
        let mut count = 0;
        assert_eq!(emodo_grid_occupied_count(grid, &mut count), EmodoStatus::Ok);
        assert!(count >= 120 * 120 * 9 / 10);
        emodo_grid_free(grid);

        let backwards = EmodoIncrement {
            timestamp: 0.0,
            dt: 0.1,
            rotation: identity_pose().rotation,
            translation: [0.0; 3],
            noise: [0.0; 36],
        };
        assert_eq!(emodo_pipeline_predict(p, &backwards), EmodoStatus::InvalidArgument);
        emodo_pipeline_free(p);
    }
}

#[test]
fn malformed_config_is_rejected() {
    let config = CString::new("mode = \"sideways\"").unwrap();
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(
            emodo_pipeline_new(config.as_ptr(), &identity_pose(), &identity_pose(), 0.0, &mut p),
            EmodoStatus::MalformedInput
        );
    }
    assert!(p.is_null());
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/emodo.h")).unwrap();
    let source = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.strip_prefix("pub unsafe extern \"C\" fn "))
        .map(|l| l.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 14);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("EMODO_STATUS_PANIC = 6"));
}
