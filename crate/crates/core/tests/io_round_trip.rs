mod common;

use std::fs;

use common::*;
use nalgebra::Vector3;
use rigcal::calibrate::run_calibration;
use rigcal::config::Config;
use rigcal::dataset::{parse_corner_line, read_dataset, write_dataset};
use rigcal::error::CalibError;
use rigcal::geometry::{Pose, Rotation};
use rigcal::report::{format_table_row, read_report, report_diff, write_report, Mode};

#[test]
fn dataset_round_trip_is_exact() {
    let rig = rig(3, true);
    let ds = simulate(&short_spec(2.0), &rig);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn report_round_trip_is_exact() {
    let rig = rig(4, false);
    let ds = simulate(&short_spec(3.0), &rig);
    let report = run_calibration(&ds, &perturbed_config(&rig), Mode::Joint).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.txt");
    write_report(&path, &report).unwrap();
    let back = read_report(&path).unwrap();
    assert_eq!(back, report);
    assert!(report_diff(&report, &back).contains("0.000000"));
}

#[test]
fn kalibr_row_renders_with_four_decimals() {
    let p = Pose::new(
        Rotation::from_rpy_degrees(89.0547, 1.0927, 90.8185),
        Vector3::new(0.0727, 0.1254, -0.0756),
    );
    let row = format_table_row(&p);
    assert_eq!(
        row.split_whitespace().collect::<Vec<_>>(),
        ["89.0547", "1.0927", "90.8185", "0.0727", "0.1254", "-0.0756"]
    );
}

#[test]
fn corner_line_parses() {
    let (stamp, idx, px) = parse_corner_line("c.csv".as_ref(), 1, &["1.234", "17", "640.5", "480.25"]).unwrap();
    assert_eq!((stamp, idx, px.x, px.y), (1.234, 17, 640.5, 480.25));
}

#[test]
fn malformed_imu_line_names_its_line() {
    let rig = rig(5, true);
    let ds = simulate(&short_spec(1.0), &rig);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let imu = dir.path().join("imu.csv");
    let mut lines: Vec<String> = fs::read_to_string(&imu).unwrap().lines().map(String::from).collect();
    lines[5] = "0.01,abc,0,0,0,0,0".into();
    fs::write(&imu, lines.join("\n")).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, CalibError::Parse { line: 6, .. }), "{err}");
}

#[test]
fn config_text_round_trip() {
    let rig = rig(0, true);
    let mut cfg = perturbed_config(&rig);
    cfg.seed = 42;
    cfg.lidar_motion_gain = 0.25;
    let back = Config::parse("calib.cfg".as_ref(), &cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
}
