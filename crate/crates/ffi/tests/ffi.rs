use std::ffi::{CStr, CString};
use std::ptr;

use aoi_ffi::*;

const CYCLE: &str = r#"
schema_version = 1
M = 1
variant = "generate_at_will"

[[devices]]
L = 2
lambda = 1.0
cap_d = 6
cap_r = 6
"#;

fn load(text: &str) -> *mut AoiModel {
    let c = CString::new(text).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { aoi_model_from_toml(c.as_ptr(), &mut m) }, AoiStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = aoi_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn optimal_round_trip() {
    let m = load(CYCLE);
    let mut k = 0usize;
    let mut n = 0u64;
    unsafe {
        assert_eq!(aoi_model_device_count(m, &mut k), AoiStatus::Ok);
        assert_eq!(aoi_model_joint_state_count(m, &mut n), AoiStatus::Ok);
    }
    assert_eq!(k, 1);
    assert_eq!(n, 7 * 7 * 2);

    let mut opt = ptr::null_mut();
    let mut theta = 0.0;
    unsafe {
        assert_eq!(aoi_solve_optimal(m, &mut opt), AoiStatus::Ok);
        assert_eq!(aoi_optimal_theta(opt, &mut theta), AoiStatus::Ok);
    }
    // A perfect channel delivers every two slots: AoI cycles 2, 3.
    assert!((theta - 2.5).abs() < 1e-6, "theta = {theta}");

    let mid = [AoiDeviceState { a_b: 0, a_d: 0, a_r: 3, d: 1 }];
    let mut action = [9u8];
    unsafe {
        assert_eq!(aoi_optimal_action(opt, mid.as_ptr(), 1, action.as_mut_ptr()), AoiStatus::Ok);
        aoi_optimal_free(opt);
        aoi_model_free(m);
    }
    assert_eq!(action[0], 1, "mid-update device keeps transmitting");
}

#[test]
fn suboptimal_and_simulation() {
    let m = load(CYCLE);
    let mut sub = ptr::null_mut();
    let mut theta = 0.0;
    let mut summary = AoiSimSummary::default();
    let s = [AoiDeviceState { a_b: 0, a_d: 4, a_r: 5, d: 2 }];
    let mut action = [9u8];
    unsafe {
        assert_eq!(aoi_suboptimal_solve(m, &mut sub), AoiStatus::Ok);
        assert_eq!(aoi_suboptimal_theta_base(sub, &mut theta), AoiStatus::Ok);
        assert_eq!(aoi_suboptimal_action(sub, s.as_ptr(), 1, action.as_mut_ptr()), AoiStatus::Ok);
        assert_eq!(aoi_simulate(m, AoiPolicyKind::Suboptimal as u32, 7, 5000, 4, &mut summary), AoiStatus::Ok);
        aoi_suboptimal_free(sub);
        aoi_model_free(m);
    }
    assert!((theta - 2.5).abs() < 1e-6);
    assert_eq!(action[0], 2);
    assert!((summary.overall_mean - 2.5).abs() < 0.01, "{summary:?}");
}

#[test]
fn errors_map_to_status_codes() {
    let bad = CString::new("M = 1\n").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { aoi_model_from_toml(bad.as_ptr(), &mut m) }, AoiStatus::InvalidConfig);
    assert!(m.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { aoi_model_from_toml(ptr::null(), &mut m) }, AoiStatus::NullPointer);
    assert!(last_error().contains("toml"));

    let m = load(CYCLE);
    let mut summary = AoiSimSummary::default();
    let mut opt = ptr::null_mut();
    let out_of_range = [AoiDeviceState { a_b: 0, a_d: 99, a_r: 0, d: 2 }];
    let mut action = [0u8];
    unsafe {
        assert_eq!(aoi_simulate(m, 17, 1, 100, 1, &mut summary), AoiStatus::InvalidConfig);
        assert_eq!(aoi_solve_optimal(m, &mut opt), AoiStatus::Ok);
        assert_eq!(aoi_optimal_action(opt, out_of_range.as_ptr(), 1, action.as_mut_ptr()), AoiStatus::InvalidArgument);
        assert_eq!(aoi_optimal_action(opt, out_of_range.as_ptr(), 2, action.as_mut_ptr()), AoiStatus::InvalidArgument);
        assert_eq!(aoi_optimal_theta(ptr::null(), &mut 0.0), AoiStatus::NullPointer);
        aoi_optimal_free(opt);
        aoi_model_free(m);
        aoi_model_free(ptr::null_mut());
    }
}

#[test]
fn header_is_generated() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/aoi_sched.h")).unwrap();
    for name in ["aoi_model_from_toml", "aoi_solve_optimal", "aoi_simulate", "AOI_STATUS_BUDGET_EXCEEDED"] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
