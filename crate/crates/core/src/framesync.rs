//! Pad-to-world coordinate synchronization.
//!
//! Two ways of locating the pad are supported. The hardcoded method fixes a
//! known pad corner in the world frame and a yaw. The tag method observes an
//! origin tag (aligned with the world frame) and a pad tag from a stationary
//! camera, and composes their camera-frame poses into the pad frame.
//!
//! Rotations follow the `R_ab` convention: `R_ab` maps vectors expressed in
//! frame `b` into frame `a`. A tag pose in the camera frame is therefore
//! `(R_cam_tag, p_tag_cam)`.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::Cell;
use crate::planner::ActionPlan;

/// Tolerance used for orthonormality checks.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Vertical pitch of one block layer. Not published with the hardware; chosen
/// to match a 3 cm printed block.
pub const DEFAULT_BLOCK_HEIGHT_M: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SyncError {
    #[error("{which} rotation is not orthonormal (|RᵀR - I| = {deviation:.3e}, det = {det:.6})")]
    NotOrthonormal {
        which: &'static str,
        deviation: f64,
        det: f64,
    },
    #[error("cell {cell} is outside the {pad_size}x{pad_size} pad")]
    OutOfBounds { cell: Cell, pad_size: usize },
    #[error("layer {0} is not 0 or 1")]
    BadLayer(u8),
    #[error("spacing must be finite and > 0, got {0}")]
    BadSpacing(f64),
}

/// Check `RᵀR = I` and `det R = +1` within [`ORTHONORMAL_TOL`].
pub fn check_rotation(which: &'static str, r: &Matrix3<f64>) -> Result<(), SyncError> {
    let deviation = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if deviation <= ORTHONORMAL_TOL && (det - 1.0).abs() <= ORTHONORMAL_TOL {
        Ok(())
    } else {
        Err(SyncError::NotOrthonormal {
            which,
            deviation,
            det,
        })
    }
}

/// Rotation about +z by `angle` radians.
pub fn rot_z(angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner()
}

/// Rigid pose: rotation plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, SyncError> {
        check_rotation("pose", &rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Relative translation between the origin tag and the pad tag, both in the
/// camera frame: `P_origin - P_pad`.
pub fn relative_translation(p_origin_cam: &Vector3<f64>, p_pad_cam: &Vector3<f64>) -> Vector3<f64> {
    p_origin_cam - p_pad_cam
}

/// Pad-tag orientation in the world frame: `R_cam_world⁻¹ · R_cam_pad`.
/// The inverse is taken as the transpose.
pub fn relative_rotation(
    r_cam_world: &Matrix3<f64>,
    r_cam_pad: &Matrix3<f64>,
) -> Result<Matrix3<f64>, SyncError> {
    check_rotation("camera-world", r_cam_world)?;
    check_rotation("camera-pad", r_cam_pad)?;
    let r = r_cam_world.transpose() * r_cam_pad;
    check_rotation("relative", &r)?;
    Ok(r)
}

/// Notch position: `t + R · p_notch_pad`.
pub fn notch_world(t: &Vector3<f64>, r_rel: &Matrix3<f64>, p_notch_pad: &Vector3<f64>) -> Vector3<f64> {
    t + r_rel * p_notch_pad
}

/// Express the camera-frame relative translation as the pad tag's position in
/// the world frame.
///
/// `relative_translation` points from the pad tag to the origin tag and lives
/// in the camera frame; the world-frame position of the pad tag is its
/// negation rotated by `R_cam_world⁻¹`. Composing the raw vector directly
/// into [`notch_world`] is only correct when the camera frame happens to be a
/// half-turn of the world frame about an axis normal to the tag offset.
pub fn pad_translation_world(t_rel_cam: &Vector3<f64>, r_cam_world: &Matrix3<f64>) -> Vector3<f64> {
    -(r_cam_world.transpose() * t_rel_cam)
}

/// World-frame description of the pad grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PadMap {
    /// World position of pad cell (0, 0).
    pub notch_world: Vector3<f64>,
    /// Pad frame orientation in the world frame.
    pub rotation_rel: Matrix3<f64>,
    pub spacing_m: f64,
    pub pad_size: usize,
    pub block_height_m: f64,
}

impl PadMap {
    pub fn new(
        notch_world: Vector3<f64>,
        rotation_rel: Matrix3<f64>,
        spacing_m: f64,
        pad_size: usize,
    ) -> Result<Self, SyncError> {
        check_rotation("pad", &rotation_rel)?;
        if !(spacing_m.is_finite() && spacing_m > 0.0) {
            return Err(SyncError::BadSpacing(spacing_m));
        }
        Ok(Self {
            notch_world,
            rotation_rel,
            spacing_m,
            pad_size,
            block_height_m: DEFAULT_BLOCK_HEIGHT_M,
        })
    }

    pub fn with_block_height(mut self, block_height_m: f64) -> Self {
        self.block_height_m = block_height_m;
        self
    }

    /// World position of `cell` at `layer`.
    pub fn interpolate_pad_point(&self, cell: Cell, layer: u8) -> Result<Vector3<f64>, SyncError> {
        if !cell.in_pad(self.pad_size) {
            return Err(SyncError::OutOfBounds {
                cell,
                pad_size: self.pad_size,
            });
        }
        if layer > 1 {
            return Err(SyncError::BadLayer(layer));
        }
        let local = Vector3::new(
            cell.x as f64 * self.spacing_m,
            cell.y as f64 * self.spacing_m,
            layer as f64 * self.block_height_m,
        );
        Ok(self.notch_world + self.rotation_rel * local)
    }
}

/// Build a [`PadMap`] from observed origin-tag and pad-tag poses in the camera frame.
///
/// `notch_offset_pad` is the position of pad cell (0, 0) relative to the pad
/// tag, expressed in the pad frame.
pub fn pad_map_from_tags(
    origin_tag: &Pose,
    pad_tag: &Pose,
    notch_offset_pad: &Vector3<f64>,
    spacing_m: f64,
    pad_size: usize,
) -> Result<PadMap, SyncError> {
    let t_rel = relative_translation(&origin_tag.translation, &pad_tag.translation);
    let r_rel = relative_rotation(&origin_tag.rotation, &pad_tag.rotation)?;
    let t_world = pad_translation_world(&t_rel, &origin_tag.rotation);
    let notch = notch_world(&t_world, &r_rel, notch_offset_pad);
    PadMap::new(notch, r_rel, spacing_m, pad_size)
}

/// Build a level [`PadMap`] from a fixed world anchor at the pad's bottom-right
/// cell and a yaw about world z.
///
/// The grid is indexed from the bottom-left cell, so the notch sits
/// `(pad_size - 1) · spacing` back along the pad x axis from the anchor.
pub fn pad_map_hardcoded(
    anchor_world: &Vector3<f64>,
    yaw: f64,
    spacing_m: f64,
    pad_size: usize,
) -> Result<PadMap, SyncError> {
    let r = rot_z(yaw);
    let span = pad_size.saturating_sub(1) as f64 * spacing_m;
    let notch = anchor_world - r * Vector3::new(span, 0.0, 0.0);
    PadMap::new(notch, r, spacing_m, pad_size)
}

/// One world waypoint per plan coordinate, in plan order.
pub fn plan_to_world(plan: &ActionPlan, map: &PadMap) -> Result<Vec<Vector3<f64>>, SyncError> {
    plan.coordinates
        .iter()
        .map(|t| map.interpolate_pad_point(t.cell, t.layer))
        .collect()
}

/// Gaussian noise applied to simulated tag observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagNoise {
    /// Per-axis translation standard deviation in meters.
    pub translation_sigma_m: f64,
    /// Axis-angle rotation standard deviation in radians, per axis.
    pub rotation_sigma_rad: f64,
}

impl TagNoise {
    pub const NONE: TagNoise = TagNoise {
        translation_sigma_m: 0.0,
        rotation_sigma_rad: 0.0,
    };

    /// Perturb `pose` by a random rotation and translation.
    pub fn perturb<R: Rng + ?Sized>(&self, pose: &Pose, rng: &mut R) -> Pose {
        let mut draw = |sigma: f64| -> Vector3<f64> {
            if sigma <= 0.0 {
                return Vector3::zeros();
            }
            let n = Normal::new(0.0, sigma).expect("sigma is positive");
            Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
        };
        let aa = draw(self.rotation_sigma_rad);
        let dt = draw(self.translation_sigma_m);
        let dr = Rotation3::new(aa).into_inner();
        Pose {
            rotation: dr * pose.rotation,
            translation: pose.translation + dt,
        }
    }
}

/// Ground-truth scene used to synthesize tag observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TagScene {
    /// World (= origin tag) frame seen from the camera.
    pub camera_from_world: Pose,
    /// Pad tag frame in the world frame.
    pub world_from_pad_tag: Pose,
    /// Notch position relative to the pad tag, in the pad frame.
    pub notch_offset_pad: Vector3<f64>,
}

impl TagScene {
    /// Camera-frame poses `(origin_tag, pad_tag)` as a perfect detector would report them.
    pub fn observe(&self) -> (Pose, Pose) {
        let c = &self.camera_from_world;
        let p = &self.world_from_pad_tag;
        let origin = *c;
        let pad = Pose {
            rotation: c.rotation * p.rotation,
            translation: c.translation + c.rotation * p.translation,
        };
        (origin, pad)
    }

    pub fn observe_noisy<R: Rng + ?Sized>(&self, noise: &TagNoise, rng: &mut R) -> (Pose, Pose) {
        let (o, p) = self.observe();
        (noise.perturb(&o, rng), noise.perturb(&p, rng))
    }

    /// The pad map this scene implies.
    pub fn ground_truth(&self, spacing_m: f64, pad_size: usize) -> Result<PadMap, SyncError> {
        let p = &self.world_from_pad_tag;
        PadMap::new(
            p.translation + p.rotation * self.notch_offset_pad,
            p.rotation,
            spacing_m,
            pad_size,
        )
    }
}

/// Uniformly random rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let q = nalgebra::Quaternion::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng));
        if q.norm() > 1e-6 {
            return Unit::new_normalize(q).to_rotation_matrix().into_inner();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{ActionPlan, Target};
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn close(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) -> bool {
        (a - b).abs().max() <= tol
    }

    #[test]
    fn relative_translation_examples() {
        let z = Vector3::zeros();
        assert_eq!(relative_translation(&z, &z), z);
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(relative_translation(&p, &p), z);
        let t = relative_translation(&Vector3::new(0.5, 0.0, 1.0), &Vector3::new(0.2, 0.1, 1.0));
        // 0.5 - 0.2, 0.0 - 0.1, 1.0 - 1.0
        assert!(close(&t, &Vector3::new(0.3, -0.1, 0.0), 1e-15));
    }

    #[test]
    fn relative_rotation_examples() {
        let i = Matrix3::identity();
        assert_eq!(relative_rotation(&i, &i).unwrap(), i);

        let mut rng = rand::rng();
        let r = random_rotation(&mut rng);
        assert!((relative_rotation(&r, &r).unwrap() - i).abs().max() < 1e-12);

        let got = relative_rotation(&rot_z(FRAC_PI_2), &rot_z(FRAC_PI_4)).unwrap();
        // Rz(90)ᵀ = [[0,1,0],[-1,0,0],[0,0,1]]; times Rz(45) by hand.
        let s = FRAC_PI_4.sin();
        let c = FRAC_PI_4.cos();
        let rz90_t = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let rz45 = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        assert!((got - rz90_t * rz45).abs().max() < 1e-12);
        assert!((got - rot_z(-FRAC_PI_4)).abs().max() < 1e-12);
    }

    #[test]
    fn relative_rotation_rejects_non_orthonormal() {
        let bad = Matrix3::identity() * 2.0;
        assert!(matches!(
            relative_rotation(&bad, &Matrix3::identity()),
            Err(SyncError::NotOrthonormal { which: "camera-world", .. })
        ));
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(relative_rotation(&Matrix3::identity(), &reflection).is_err());
    }

    #[test]
    fn notch_world_examples() {
        let i = Matrix3::identity();
        assert_eq!(
            notch_world(&Vector3::zeros(), &i, &Vector3::new(0.1, 0.0, 0.0)),
            Vector3::new(0.1, 0.0, 0.0)
        );
        assert_eq!(
            notch_world(&Vector3::new(1.0, 1.0, 0.0), &i, &Vector3::zeros()),
            Vector3::new(1.0, 1.0, 0.0)
        );
        let got = notch_world(&Vector3::new(1.0, 0.0, 0.0), &rot_z(FRAC_PI_2), &Vector3::new(0.1, 0.0, 0.0));
        assert!(close(&got, &Vector3::new(1.0, 0.1, 0.0), 1e-15));
    }

    #[test]
    fn interpolate_examples() {
        let notch = Vector3::new(0.3, -0.2, 0.05);
        let map = PadMap::new(notch, Matrix3::identity(), 0.04, 5).unwrap();
        assert_eq!(map.interpolate_pad_point(Cell::new(0, 0), 0).unwrap(), notch);
        let p = map.interpolate_pad_point(Cell::new(2, 2), 0).unwrap();
        assert!(close(&p, &(notch + Vector3::new(0.08, 0.08, 0.0)), 1e-15));
        assert!(matches!(
            map.interpolate_pad_point(Cell::new(5, 0), 0),
            Err(SyncError::OutOfBounds { .. })
        ));
        assert_eq!(map.interpolate_pad_point(Cell::new(0, 0), 2), Err(SyncError::BadLayer(2)));
        let up = map.interpolate_pad_point(Cell::new(0, 0), 1).unwrap();
        assert!(close(&up, &(notch + Vector3::new(0.0, 0.0, DEFAULT_BLOCK_HEIGHT_M)), 1e-15));
    }

    #[test]
    fn coincident_tags_give_zero_notch() {
        let pose = Pose::new(rot_z(0.3), Vector3::new(0.2, 0.4, 1.5)).unwrap();
        let map = pad_map_from_tags(&pose, &pose, &Vector3::zeros(), 0.04, 5).unwrap();
        assert!(close(&map.notch_world, &Vector3::zeros(), 1e-15));
    }

    #[test]
    fn hardcoded_examples() {
        let map = pad_map_hardcoded(&Vector3::new(0.36, 0.0, 0.0), 0.0, 0.04, 10).unwrap();
        assert!(close(&map.notch_world, &Vector3::zeros(), 1e-15));
        assert_eq!(map.interpolate_pad_point(Cell::new(0, 0), 0).unwrap(), map.notch_world);

        let anchor = Vector3::new(1.0, 2.0, 0.0);
        let flipped = pad_map_hardcoded(&anchor, PI, 0.04, 10).unwrap();
        let p = flipped.interpolate_pad_point(Cell::new(1, 0), 0).unwrap();
        assert!(close(&p, &(flipped.notch_world - Vector3::new(0.04, 0.0, 0.0)), 1e-12));
    }

    #[test]
    fn plan_waypoints_follow_plan_order() {
        let map = PadMap::new(Vector3::new(1.0, 1.0, 0.0), Matrix3::identity(), 0.04, 5).unwrap();
        let plan = ActionPlan::from_cells("t", [Cell::new(0, 0)]);
        assert_eq!(plan_to_world(&plan, &map).unwrap(), vec![map.notch_world]);

        let mut plan = ActionPlan::from_cells("t", [Cell::new(2, 2), Cell::new(0, 1)]);
        plan.coordinates.push(Target::stacked(Cell::new(2, 2)));
        let w = plan_to_world(&plan, &map).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[0], map.interpolate_pad_point(Cell::new(2, 2), 0).unwrap());
        assert_eq!(w[1], map.interpolate_pad_point(Cell::new(0, 1), 0).unwrap());
        assert_eq!(w[2], map.interpolate_pad_point(Cell::new(2, 2), 1).unwrap());
    }

    /// The camera looks straight down at the table, so the world frame seen from
    /// the camera is a half-turn about x. Feeding the raw camera-frame vector
    /// into the notch formula then lands on the mirror image in y.
    #[test]
    fn raw_camera_translation_needs_world_rotation() {
        let scene = TagScene {
            camera_from_world: Pose::new(
                Rotation3::from_axis_angle(&Vector3::x_axis(), PI).into_inner(),
                Vector3::new(-0.1, 0.2, 1.2),
            )
            .unwrap(),
            world_from_pad_tag: Pose::new(rot_z(0.2), Vector3::new(0.5, 0.3, 0.0)).unwrap(),
            notch_offset_pad: Vector3::new(0.02, 0.02, 0.0),
        };
        let (o, p) = scene.observe();
        let truth = scene.ground_truth(0.04, 5).unwrap();
        let t_rel = relative_translation(&o.translation, &p.translation);
        let r_rel = relative_rotation(&o.rotation, &p.rotation).unwrap();
        let raw = notch_world(&t_rel, &r_rel, &scene.notch_offset_pad);
        assert!(!close(&raw, &truth.notch_world, 1e-3));
        let fixed = notch_world(&pad_translation_world(&t_rel, &o.rotation), &r_rel, &scene.notch_offset_pad);
        assert!(close(&fixed, &truth.notch_world, 1e-12));
    }

    #[test]
    fn noise_free_perturb_is_identity() {
        let pose = Pose::new(rot_z(1.0), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let mut rng = rand::rng();
        assert_eq!(TagNoise::NONE.perturb(&pose, &mut rng), pose);
    }
}
