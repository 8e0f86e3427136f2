//! Pinhole cameras, pixel-to-ray conversion, and point sampling along rays.
//!
//! Conventions: the extrinsic maps world to camera space, the camera looks
//! down `-z` with `y` up in camera space, pixel `(0, 0)` is the top-left
//! corner and pixel centers sit at `+0.5`.

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

/// Flip between the `-z`-forward camera frame and the `z`-forward frame the
/// intrinsic matrix acts in (image `y` grows downwards).
fn frame_flip() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))
}

/// A calibrated pinhole view: world-to-camera extrinsic `[R|t]`, intrinsic
/// `K`, and the valid depth range along rays.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub extrinsic: Matrix3x4<f64>,
    pub intrinsic: Matrix3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsic.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsic.column(3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation().transpose() * self.translation()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation();
        let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
        if dev > 1e-5 {
            return Err(Error::Validation(format!(
                "rotation not orthonormal (deviation {dev:.2e})"
            )));
        }
        let k = &self.intrinsic;
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::Validation("intrinsic focal entries must be positive".into()));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::Validation("intrinsic lower triangle must be zero".into()));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::Validation(format!(
                "invalid depth range near={} far={}",
                self.near, self.far
            )));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` fixing the roll.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsic: Matrix3<f64>,
        near: f64,
        far: f64,
    ) -> Camera {
        let z = (eye - target).normalize(); // camera looks down -z
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        let mut e = Matrix3x4::zeros();
        for (row, axis) in [x, y, z].iter().enumerate() {
            for c in 0..3 {
                e[(row, c)] = axis[c];
            }
        }
        let t = -Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]) * eye;
        e.set_column(3, &t);
        Camera {
            extrinsic: e,
            intrinsic,
            near,
            far,
        }
    }

    /// Ray through continuous pixel coordinates `(px, py)`.
    pub fn pixel_to_ray(&self, px: f64, py: f64) -> Result<Ray> {
        let k_inv = self
            .intrinsic
            .try_inverse()
            .ok_or_else(|| Error::Validation("singular intrinsic matrix".into()))?;
        let d_cam = frame_flip() * (k_inv * Vector3::new(px, py, 1.0));
        let direction = (self.rotation().transpose() * d_cam).normalize();
        Ok(Ray {
            origin: self.center(),
            direction,
            t_near: self.near,
            t_far: self.far,
        })
    }

    /// Project a world point to pixel coordinates; `None` when the point is
    /// behind the camera.
    pub fn project(&self, point: &Vector3<f64>) -> Option<(f64, f64)> {
        let cam = self.rotation() * point + self.translation();
        let h = self.intrinsic * (frame_flip() * cam);
        if h.z <= 0.0 {
            return None;
        }
        Some((h.x / h.z, h.y / h.z))
    }
}

/// A world-space ray with its valid parameter range.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Sample positions and intervals along one ray.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub positions: Vec<Vector3<f64>>,
    pub t_values: Vec<f64>,
    /// `delta_k = t_{k+1} - t_k`; the terminal delta is `t_far - t_last`.
    pub deltas: Vec<f64>,
}

/// Sample `count` points along the ray: bin midpoints in deterministic
/// mode, one uniform draw per bin in stratified mode.
pub fn sample_along_ray(
    ray: &Ray,
    count: usize,
    stratified: bool,
    rng: &mut impl Rng,
) -> Result<RaySamples> {
    if count < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 samples per ray, got {count}"
        )));
    }
    let span = ray.t_far - ray.t_near;
    let bin = span / count as f64;
    let mut t_values = Vec::with_capacity(count);
    for k in 0..count {
        let u = if stratified { rng.gen::<f64>() } else { 0.5 };
        t_values.push(ray.t_near + (k as f64 + u) * bin);
    }
    let deltas = (0..count)
        .map(|k| {
            if k + 1 < count {
                t_values[k + 1] - t_values[k]
            } else {
                ray.t_far - t_values[k]
            }
        })
        .collect();
    let positions = t_values.iter().map(|&t| ray.point_at(t)).collect();
    Ok(RaySamples {
        positions,
        t_values,
        deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn centered_k(f: f64, w: f64, h: f64) -> Matrix3<f64> {
        Matrix3::new(f, 0.0, w / 2.0, 0.0, f, h / 2.0, 0.0, 0.0, 1.0)
    }

    fn identity_camera(f: f64) -> Camera {
        Camera {
            extrinsic: Matrix3x4::identity(),
            intrinsic: centered_k(f, 64.0, 64.0),
            near: 0.1,
            far: 10.0,
        }
    }

    #[test]
    fn center_pixel_looks_down_negative_z() {
        let cam = identity_camera(50.0);
        let ray = cam.pixel_to_ray(32.0, 32.0).unwrap();
        assert_relative_eq!(ray.origin.norm(), 0.0);
        assert_relative_eq!(ray.direction.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ray.direction.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ray.direction.z, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn one_focal_length_off_center() {
        let cam = identity_camera(50.0);
        let ray = cam.pixel_to_ray(32.0 + 50.0, 32.0).unwrap();
        let expect = Vector3::new(1.0, 0.0, -1.0).normalize();
        assert_relative_eq!((ray.direction - expect).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn translated_camera_origin() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, 4.0),
            Vector3::zeros(),
            Vector3::y(),
            centered_k(50.0, 64.0, 64.0),
            1.0,
            8.0,
        );
        cam.validate().unwrap();
        let ray = cam.pixel_to_ray(17.0, 41.0).unwrap();
        assert_relative_eq!((ray.origin - Vector3::new(0.0, 0.0, 4.0)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn reprojection_round_trip() {
        let cam = Camera::look_at(
            Vector3::new(2.0, 1.5, 3.0),
            Vector3::zeros(),
            Vector3::y(),
            centered_k(70.0, 64.0, 48.0),
            1.0,
            8.0,
        );
        for &(px, py) in &[(3.25, 40.0), (32.0, 24.0), (63.0, 1.5)] {
            let ray = cam.pixel_to_ray(px, py).unwrap();
            for &t in &[1.5, 3.0, 6.0] {
                let (u, v) = cam.project(&ray.point_at(t)).expect("in front");
                assert_relative_eq!(u, px, epsilon = 1e-4);
                assert_relative_eq!(v, py, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn singular_intrinsic_is_an_error() {
        let mut cam = identity_camera(50.0);
        cam.intrinsic[(0, 0)] = 0.0;
        assert!(cam.pixel_to_ray(1.0, 1.0).is_err());
    }

    #[test]
    fn deterministic_sampling_uses_bin_midpoints() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(0.0, 0.0, -1.0),
            t_near: 0.0,
            t_far: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_along_ray(&ray, 2, false, &mut rng).unwrap();
        assert_eq!(s.t_values, vec![0.25, 0.75]);
        assert_eq!(s.deltas, vec![0.5, 0.25]);
    }

    #[test]
    fn too_few_samples_rejected() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: -Vector3::z(),
            t_near: 0.0,
            t_far: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_along_ray(&ray, 1, false, &mut rng).is_err());
    }

    #[test]
    fn stratified_sampling_is_seeded_and_in_bins() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: -Vector3::z(),
            t_near: 2.0,
            t_far: 6.0,
        };
        let a = sample_along_ray(&ray, 16, true, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_along_ray(&ray, 16, true, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.t_values, b.t_values);

        for seed in 0..1000u64 {
            let s = sample_along_ray(&ray, 8, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let bin = (6.0 - 2.0) / 8.0;
            for (k, &t) in s.t_values.iter().enumerate() {
                let lo = 2.0 + k as f64 * bin;
                assert!(t >= lo && t <= lo + bin, "seed {seed} sample {k} out of bin");
            }
        }
    }

    #[test]
    fn deltas_sum_to_span_past_first_sample() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: -Vector3::z(),
            t_near: 1.0,
            t_far: 5.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_along_ray(&ray, 33, true, &mut rng).unwrap();
        let total: f64 = s.deltas.iter().sum();
        assert_relative_eq!(total, 5.0 - s.t_values[0], epsilon = 1e-9);
        for d in &s.deltas {
            assert!(*d > 0.0);
        }
    }
}
