//! Pinhole cameras and surround rigs.
//!
//! Camera frame: x right, y down, z forward. World frame: z up. The pose is
//! the camera-from-world transform `p_cam = R p_world + t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GridSpec, SceneError};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

#[inline]
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [0, 1, 2].map(|j| m[0][j] * v[0] + m[1][j] * v[1] + m[2][j] * v[2])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    /// Camera at `center` looking along world yaw `yaw` (radians), level.
    pub fn looking_at_yaw(center: Vec3, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let forward = [c, s, 0.0];
        let right = [s, -c, 0.0];
        let down = [0.0, 0.0, -1.0];
        let rotation = [right, down, forward];
        let rc = mat_vec(&rotation, center);
        Self { rotation, translation: [-rc[0], -rc[1], -rc[2]] }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (rtr - target).abs() > 1e-9 {
                    return Err(SceneError::InvalidSpec("rotation is not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(SceneError::InvalidSpec(format!("rotation determinant {det}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera centre in the world frame, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        let c = mat_t_vec(&self.pose.rotation, self.pose.translation);
        [-c[0], -c[1], -c[2]]
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let r = mat_vec(&self.pose.rotation, p);
        [0, 1, 2].map(|a| r[a] + self.pose.translation[a])
    }

    pub fn camera_to_world(&self, p: Vec3) -> Vec3 {
        let q = [0, 1, 2].map(|a| p[a] - self.pose.translation[a]);
        mat_t_vec(&self.pose.rotation, q)
    }

    /// Continuous pixel coordinates and z-depth of a world point in front of
    /// the camera (pixel `(i, j)` covers `[j, j+1) × [i, i+1)`).
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c[2] <= 1e-9 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy, c[2]))
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// World-frame direction through continuous pixel `(u, v)`, scaled so its
    /// camera-frame z component is 1 (ray parameter = z-depth).
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let d = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
        mat_t_vec(&self.pose.rotation, d)
    }

    /// World point at z-depth `depth` along pixel `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let c = self.center();
        let d = self.ray_direction(u, v);
        [0, 1, 2].map(|a| c[a] + depth * d[a])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        for c in &self.cameras {
            c.pose.validate()?;
            if !(c.intrinsics.fx > 0.0 && c.intrinsics.fy > 0.0) {
                return Err(SceneError::InvalidSpec("focal lengths must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Rig layout knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigSpec {
    pub n_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// World z of the camera centres.
    pub mount_height: f64,
    /// Uniform random yaw perturbation per camera, degrees.
    pub yaw_jitter_deg: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self { n_cameras: 4, width: 56, height: 32, focal: 20.0, mount_height: 0.6, yaw_jitter_deg: 0.0 }
    }
}

/// Cameras at the grid's horizontal centre with yaws `2πi/n` (+ jitter).
pub fn place_camera_rig(seed: u64, spec: &RigSpec, grid: &GridSpec) -> Result<CameraRig, SceneError> {
    if spec.n_cameras == 0 {
        return Err(SceneError::InvalidSpec("rig needs at least one camera".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = grid.center_at(spec.mount_height);
    let intrinsics = Intrinsics {
        fx: spec.focal,
        fy: spec.focal,
        cx: spec.width as f64 / 2.0,
        cy: spec.height as f64 / 2.0,
    };
    let cameras = (0..spec.n_cameras)
        .map(|i| {
            let jitter = if spec.yaw_jitter_deg > 0.0 {
                rng.random_range(-spec.yaw_jitter_deg..=spec.yaw_jitter_deg).to_radians()
            } else {
                0.0
            };
            let yaw = std::f64::consts::TAU * i as f64 / spec.n_cameras as f64 + jitter;
            Camera {
                intrinsics,
                pose: Pose::looking_at_yaw(center, yaw),
                width: spec.width,
                height: spec.height,
            }
        })
        .collect();
    let rig = CameraRig { cameras };
    rig.validate()?;
    Ok(rig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_cameras_quarter_turns() {
        let rig = place_camera_rig(0, &RigSpec::default(), &GridSpec::desk()).unwrap();
        for (i, cam) in rig.cameras.iter().enumerate() {
            let f = cam.pose.rotation[2];
            let yaw = f[1].atan2(f[0]).to_degrees().rem_euclid(360.0);
            assert!((yaw - 90.0 * i as f64).abs() < 1e-9);
            let c = cam.center();
            assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12 && (c[2] - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let rig = place_camera_rig(0, &RigSpec { n_cameras: 1, ..RigSpec::default() }, &GridSpec::desk()).unwrap();
        let cam = rig.cameras[0];
        let (u, v, d) = cam.project([5.0, 0.0, 0.6]).unwrap();
        assert!((u - 28.0).abs() < 1e-12 && (v - 16.0).abs() < 1e-12 && (d - 5.0).abs() < 1e-12);
        assert!(cam.project([-5.0, 0.0, 0.6]).is_none());
        let p = cam.back_project(u, v, d);
        assert!((p[0] - 5.0).abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn zero_cameras_rejected() {
        let spec = RigSpec { n_cameras: 0, ..RigSpec::default() };
        assert!(place_camera_rig(0, &spec, &GridSpec::desk()).is_err());
    }
}
