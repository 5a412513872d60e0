use blockbuild::dronesim::{derive_seed, run_build, BuildConfig, CameraParams, ErrorModel, PlacementResult};
use blockbuild::framesync::{pad_map_hardcoded, PadMap};
use blockbuild::gridworld::{Footprint, GridWorld};
use blockbuild::planner::MockBackend;
use blockbuild::vision::{centroid_to_grid, change_region, frame_diff, DetectorConfig, RgbFrame};
use nalgebra::Vector3;

fn world() -> GridWorld {
    GridWorld::with_pad(5).unwrap()
}

fn pad_map() -> PadMap {
    pad_map_hardcoded(&Vector3::new(0.3, -0.1, 0.0), 0.4, 0.04, 5).unwrap()
}

const DESIGNS: [&str; 6] = [
    "smiley face",
    "cross",
    "diamond",
    "square",
    "letter l",
    "two columns on the left and bottom right corner only",
];

#[test]
fn perception_agrees_with_simulator_truth() {
    let backend = MockBackend::standard();
    for (d, design) in DESIGNS.iter().enumerate() {
        for s in 0..15 {
            let err = ErrorModel::misplacing(0.3, derive_seed(99, (d * 100 + s) as u64));
            let r = run_build(design, &backend, &world(), &pad_map(), &err, &BuildConfig::default(), None).unwrap();
            for step in &r.steps {
                if let PlacementResult::Landed { .. } = step.result {
                    assert_eq!(step.observed, step.executed, "{design} seed {s} step {}", step.index);
                }
            }
            assert_eq!(Footprint::parse(&r.final_scene).unwrap(), r.final_state.footprint());
        }
    }
}

#[test]
fn waypoints_come_from_the_pad_map() {
    let map = pad_map();
    let r = run_build("diamond", &MockBackend::standard(), &world(), &map, &ErrorModel::none(1), &BuildConfig::default(), None)
        .unwrap();
    assert_eq!(r.final_iou, 1.0);
    for step in &r.steps {
        let w = map.interpolate_pad_point(step.planned.cell, step.planned.layer).unwrap();
        assert_eq!(step.waypoint, [w.x, w.y, w.z]);
    }
}

#[test]
fn dumped_frames_reproduce_the_observation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BuildConfig {
        frame_dump_dir: Some(dir.path().to_path_buf()),
        ..BuildConfig::default()
    };
    let err = ErrorModel::none(3).with_forced(1, [0, 1]);
    let r = run_build("cross", &MockBackend::standard(), &world(), &pad_map(), &err, &cfg, None).unwrap();
    let cam = CameraParams::default();
    let det = DetectorConfig::for_geometry(cam.cell_px as f64, cam.block_px as f64);
    for step in r.steps.iter().filter(|s| matches!(s.result, PlacementResult::Landed { .. })) {
        let load = |which: &str| {
            let bytes = std::fs::read(dir.path().join(format!("step_{:03}_{which}.ppm", step.index))).unwrap();
            RgbFrame::from_pnm(&bytes).unwrap().to_gray()
        };
        let diff = frame_diff(&load("before"), &load("after")).unwrap();
        let region = change_region(&diff, &det).unwrap();
        let cell = centroid_to_grid(region.centroid, &cam.pad_corners(5), 5).unwrap();
        assert_eq!(Some(cell), step.observed.map(|t| t.cell));
    }
}
