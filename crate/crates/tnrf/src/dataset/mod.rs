//! Posed multi-view dataset loading and synthetic family generation.
//!
//! Real datasets are a `manifest.json` plus per-view PNGs. The synthetic
//! generator builds families of axis-aligned box assemblies (a six-part
//! "toy chair" by default) with analytic images and an exact correspondence
//! oracle based on each part's box parameterization.

pub mod color;

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use color::{linear_to_srgb_u8, srgb_u8_to_linear};

/// One posed image: linear RGB pixels plus the camera that produced them.
#[derive(Debug, Clone)]
pub struct View {
    /// Row-major `height x width` linear RGB in `[0, 1]`.
    pub image: Vec<[f64; 3]>,
    pub width: usize,
    pub height: usize,
    pub camera: Camera,
}

/// All views of one object instance.
#[derive(Debug, Clone)]
pub struct ObjectRecord {
    pub object_id: String,
    pub views: Vec<View>,
}

/// Per-part sampling ranges for the synthetic generator, in scene units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartSpec {
    /// `(lo, hi)` per axis for the box center.
    pub center_range: [(f64, f64); 3],
    /// `(lo, hi)` per axis for the box half-extents; all positive.
    pub half_extent_range: [(f64, f64); 3],
    pub color: [f64; 3],
}

/// Procedural family description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticFamilySpec {
    pub parts: Vec<PartSpec>,
    pub instance_count: usize,
    pub views_per_instance: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Maximum allowed penetration depth between parts before generation
    /// fails as ambiguous.
    pub overlap_tolerance: f64,
}

/// A normalized location on a family: which part, and where inside that
/// part's box in `[0, 1]^3` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthCorrespondence {
    pub part_index: usize,
    pub local_uvw: [f64; 3],
}

/// One axis-aligned part box of one instance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PartBox {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub color: [f64; 3],
}

impl PartBox {
    pub fn center_vec(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    pub fn half_vec(&self) -> Vector3<f64> {
        Vector3::from(self.half_extents)
    }

    /// Signed distance to the box surface (negative inside).
    pub fn signed_distance(&self, p: Vector3<f64>) -> f64 {
        let q = (p - self.center_vec()).abs() - self.half_vec();
        let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
        let inside = q.x.max(q.y).max(q.z).min(0.0);
        outside + inside
    }

    /// Normalized `[0,1]^3` coordinates of a point relative to the box.
    pub fn local_uvw(&self, p: Vector3<f64>) -> [f64; 3] {
        let mut uvw = [0.0; 3];
        for a in 0..3 {
            let span = 2.0 * self.half_extents[a];
            uvw[a] = ((p[a] - (self.center[a] - self.half_extents[a])) / span).clamp(0.0, 1.0);
        }
        uvw
    }

    /// Point of the box at normalized `[0,1]^3` coordinates.
    pub fn point_at(&self, uvw: [f64; 3]) -> Vector3<f64> {
        Vector3::from_fn(|a, _| self.center[a] - self.half_extents[a] + uvw[a] * 2.0 * self.half_extents[a])
    }
}

/// Exact correspondences for a generated family, backed by per-instance
/// part boxes. Serialized as `gt_family.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrespondenceOracle {
    /// `instances[i][k]` is part `k` of instance `i`.
    pub instances: Vec<Vec<PartBox>>,
    /// Surface membership tolerance in scene units.
    pub epsilon_surface: f64,
}

pub const DEFAULT_EPSILON_SURFACE: f64 = 1e-3;

impl CorrespondenceOracle {
    /// Locate a point on an instance's surface.
    pub fn locate(&self, instance: usize, p: Vector3<f64>) -> Result<GroundTruthCorrespondence> {
        let parts = self
            .instances
            .get(instance)
            .ok_or_else(|| Error::Domain(format!("no instance {instance}")))?;
        let mut best: Option<(f64, usize)> = None;
        for (k, part) in parts.iter().enumerate() {
            let d = part.signed_distance(p).abs();
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, k));
            }
        }
        let (d, k) = best.ok_or_else(|| Error::Domain("instance has no parts".into()))?;
        if d > self.epsilon_surface {
            return Err(Error::Domain(format!(
                "point {:?} is {d:.3e} scene units from the nearest part surface (tolerance {:.1e})",
                (p.x, p.y, p.z),
                self.epsilon_surface
            )));
        }
        Ok(GroundTruthCorrespondence {
            part_index: k,
            local_uvw: parts[k].local_uvw(p),
        })
    }

    /// Map a surface point of the source instance to the matching surface
    /// point of the target instance.
    pub fn gt_correspond(
        &self,
        source: usize,
        target: usize,
        p: Vector3<f64>,
    ) -> Result<Vector3<f64>> {
        let loc = self.locate(source, p)?;
        let parts = self
            .instances
            .get(target)
            .ok_or_else(|| Error::Domain(format!("no instance {target}")))?;
        let part = parts
            .get(loc.part_index)
            .ok_or_else(|| Error::Domain(format!("target lacks part {}", loc.part_index)))?;
        Ok(part.point_at(loc.local_uvw))
    }

    /// Axis-aligned bounds of one instance.
    pub fn instance_bounds(&self, instance: usize) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let parts = self
            .instances
            .get(instance)
            .ok_or_else(|| Error::Domain(format!("no instance {instance}")))?;
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for part in parts {
            for a in 0..3 {
                lo[a] = lo[a].min(part.center[a] - part.half_extents[a]);
                hi[a] = hi[a].max(part.center[a] + part.half_extents[a]);
            }
        }
        Ok((lo, hi))
    }

    /// Deterministic lattice of points on the instance's exact surface:
    /// a `per_face x per_face` grid of face-interior points on each of
    /// the six faces of every part box. All returned points satisfy
    /// [`CorrespondenceOracle::locate`].
    pub fn sample_surface_points(&self, instance: usize, per_face: usize) -> Result<Vec<Vector3<f64>>> {
        let parts = self
            .instances
            .get(instance)
            .ok_or_else(|| Error::Domain(format!("no instance {instance}")))?;
        if per_face == 0 {
            return Err(Error::Validation("per_face must be positive".into()));
        }
        let mut out = Vec::with_capacity(parts.len() * 6 * per_face * per_face);
        for part in parts {
            for axis in 0..3 {
                for side in 0..2 {
                    for i in 0..per_face {
                        for j in 0..per_face {
                            let mut uvw = [0.0; 3];
                            uvw[axis] = side as f64;
                            uvw[(axis + 1) % 3] = (i as f64 + 0.5) / per_face as f64;
                            uvw[(axis + 2) % 3] = (j as f64 + 0.5) / per_face as f64;
                            out.push(part.point_at(uvw));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&body).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

impl SyntheticFamilySpec {
    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::Validation("family needs at least one part".into()));
        }
        if self.instance_count == 0 || self.views_per_instance == 0 {
            return Err(Error::Validation(
                "instance and view counts must be positive".into(),
            ));
        }
        if self.image_size < 2 {
            return Err(Error::Validation("image size must be at least 2".into()));
        }
        for (k, part) in self.parts.iter().enumerate() {
            for a in 0..3 {
                let (clo, chi) = part.center_range[a];
                let (hlo, hhi) = part.half_extent_range[a];
                if clo > chi || hlo > hhi {
                    return Err(Error::Validation(format!(
                        "part {k} axis {a} has an empty parameter range"
                    )));
                }
                if hlo <= 0.0 {
                    return Err(Error::Validation(format!(
                        "part {k} axis {a} allows non-positive extent {hlo}"
                    )));
                }
                if chi + hhi > 1.0 || clo - hhi < -1.0 {
                    return Err(Error::Validation(format!(
                        "part {k} axis {a} can leave the [-1,1] world cube"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The default six-part family: seat, back, and four legs, with
    /// per-instance jitter in position and extent. Margins are chosen so
    /// parts can never touch.
    pub fn toy_chair(instance_count: usize, views_per_instance: usize, image_size: usize, seed: u64) -> Self {
        let jitter = |c: f64| (c - 0.02, c + 0.02);
        let seat = PartSpec {
            center_range: [jitter(0.0), jitter(0.0), jitter(0.0)],
            half_extent_range: [(0.40, 0.55), (0.04, 0.07), (0.40, 0.55)],
            color: [0.80, 0.60, 0.40],
        };
        let back = PartSpec {
            center_range: [jitter(0.0), (0.42, 0.48), (-0.48, -0.44)],
            half_extent_range: [(0.40, 0.55), (0.25, 0.30), (0.03, 0.05)],
            color: [0.70, 0.45, 0.30],
        };
        let leg = |x: f64, z: f64| PartSpec {
            center_range: [jitter(x), (-0.45, -0.41), jitter(z)],
            half_extent_range: [(0.05, 0.08), (0.24, 0.30), (0.05, 0.08)],
            color: [0.40, 0.30, 0.20],
        };
        SyntheticFamilySpec {
            parts: vec![
                seat,
                back,
                leg(-0.4, -0.4),
                leg(0.4, -0.4),
                leg(-0.4, 0.4),
                leg(0.4, 0.4),
            ],
            instance_count,
            views_per_instance,
            image_size,
            seed,
            overlap_tolerance: 0.0,
        }
    }
}

/// Penetration depth of two axis-aligned boxes (0 when disjoint or touching).
fn penetration_depth(a: &PartBox, b: &PartBox) -> f64 {
    let mut depth = f64::INFINITY;
    for axis in 0..3 {
        let overlap = (a.half_extents[axis] + b.half_extents[axis])
            - (a.center[axis] - b.center[axis]).abs();
        if overlap <= 0.0 {
            return 0.0;
        }
        depth = depth.min(overlap);
    }
    depth
}

/// Camera position `index` of `count` on a sphere around the origin,
/// distributed by the golden spiral.
fn sphere_camera(index: usize, count: usize, radius: f64, intrinsic: Matrix3<f64>, near: f64, far: f64) -> Camera {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    // keep y in (-0.8, 0.8) so the up vector never degenerates
    let y = if count == 1 {
        0.2
    } else {
        -0.8 + 1.6 * (index as f64 + 0.5) / count as f64
    };
    let r = (1.0 - y * y).sqrt();
    let theta = golden * index as f64;
    let eye = Vector3::new(r * theta.cos(), y, r * theta.sin()) * radius;
    Camera::look_at(eye, Vector3::zeros(), Vector3::y(), intrinsic, near, far)
}

const CAMERA_RADIUS: f64 = 3.0;

fn family_intrinsic(image_size: usize) -> Matrix3<f64> {
    let f = image_size as f64;
    let c = image_size as f64 / 2.0;
    Matrix3::new(f, 0.0, c, 0.0, f, c, 0.0, 0.0, 1.0)
}

/// First intersection of a ray with a part box: `(t, inward face normal)`.
fn ray_box_hit(origin: Vector3<f64>, dir: Vector3<f64>, part: &PartBox) -> Option<(f64, Vector3<f64>)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut entry_axis = 0usize;
    for a in 0..3 {
        let (o, d) = (origin[a] - part.center[a], dir[a]);
        let h = part.half_extents[a];
        if d.abs() < 1e-12 {
            if o.abs() > h {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((-h - o) / d, (h - o) / d);
        let (lo, hi) = (ta.min(tb), ta.max(tb));
        if lo > t0 {
            t0 = lo;
            entry_axis = a;
        }
        t1 = t1.min(hi);
    }
    if t0 > t1 || t1 <= 0.0 || t0 <= 0.0 {
        return None;
    }
    let mut normal = Vector3::zeros();
    normal[entry_axis] = -dir[entry_axis].signum();
    Some((t0, normal))
}

const AMBIENT: f64 = 0.3;

/// Shade one analytic ray: nearest part hit with headlight Lambertian
/// shading over a white background.
fn shade_ray(origin: Vector3<f64>, dir: Vector3<f64>, parts: &[PartBox]) -> [f64; 3] {
    let mut best: Option<(f64, Vector3<f64>, [f64; 3])> = None;
    for part in parts {
        if let Some((t, n)) = ray_box_hit(origin, dir, part) {
            if best.map_or(true, |(bt, _, _)| t < bt) {
                best = Some((t, n, part.color));
            }
        }
    }
    match best {
        None => [1.0, 1.0, 1.0],
        Some((_, n, c)) => {
            let lambert = n.dot(&-dir).max(0.0);
            let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
            [c[0] * shade, c[1] * shade, c[2] * shade]
        }
    }
}

fn render_analytic_view(parts: &[PartBox], camera: &Camera, size: usize) -> Result<Vec<[f64; 3]>> {
    (0..size * size)
        .into_par_iter()
        .map(|i| {
            let (px, py) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
            let ray = camera.pixel_to_ray(px, py)?;
            Ok(shade_ray(ray.origin, ray.direction, parts))
        })
        .collect()
}

/// Generate a synthetic family: posed analytic renderings plus the exact
/// correspondence oracle.
pub fn generate_synthetic_family(
    spec: &SyntheticFamilySpec,
) -> Result<(Vec<ObjectRecord>, CorrespondenceOracle)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut instances = Vec::with_capacity(spec.instance_count);
    for i in 0..spec.instance_count {
        let mut parts = Vec::with_capacity(spec.parts.len());
        for part in &spec.parts {
            let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
                if lo == hi {
                    lo
                } else {
                    rng.gen_range(lo..hi)
                }
            };
            let center = [
                draw(&mut rng, part.center_range[0]),
                draw(&mut rng, part.center_range[1]),
                draw(&mut rng, part.center_range[2]),
            ];
            let half_extents = [
                draw(&mut rng, part.half_extent_range[0]),
                draw(&mut rng, part.half_extent_range[1]),
                draw(&mut rng, part.half_extent_range[2]),
            ];
            parts.push(PartBox {
                center,
                half_extents,
                color: part.color,
            });
        }
        for a in 0..parts.len() {
            for b in a + 1..parts.len() {
                let depth = penetration_depth(&parts[a], &parts[b]);
                if depth > spec.overlap_tolerance {
                    return Err(Error::Generation(format!(
                        "instance {i}: parts {a} and {b} overlap by {depth:.4} scene units, \
                         correspondences would be ambiguous"
                    )));
                }
            }
        }
        instances.push(parts);
    }

    let intrinsic = family_intrinsic(spec.image_size);
    let near = CAMERA_RADIUS - 2.0;
    let far = CAMERA_RADIUS + 2.0;
    let mut records = Vec::with_capacity(spec.instance_count);
    for (i, parts) in instances.iter().enumerate() {
        let mut views = Vec::with_capacity(spec.views_per_instance);
        for v in 0..spec.views_per_instance {
            let camera = sphere_camera(v, spec.views_per_instance, CAMERA_RADIUS, intrinsic, near, far);
            let image = render_analytic_view(parts, &camera, spec.image_size)?;
            views.push(View {
                image,
                width: spec.image_size,
                height: spec.image_size,
                camera,
            });
        }
        records.push(ObjectRecord {
            object_id: format!("instance_{i:03}"),
            views,
        });
    }
    Ok((
        records,
        CorrespondenceOracle {
            instances,
            epsilon_surface: DEFAULT_EPSILON_SURFACE,
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestView {
    image: String,
    extrinsic: Vec<f64>,
    intrinsic: Vec<f64>,
    near: f64,
    far: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestObject {
    id: String,
    views: Vec<ManifestView>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    objects: Vec<ManifestObject>,
}

/// Load a dataset directory: `manifest.json` plus referenced PNG images.
/// Objects come back sorted by id so latent indices are deterministic.
pub fn load_dataset(root: &Path) -> Result<Vec<ObjectRecord>> {
    let manifest_path = root.join("manifest.json");
    let body = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&body).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    let mut records = Vec::with_capacity(manifest.objects.len());
    for obj in &manifest.objects {
        let mut views = Vec::with_capacity(obj.views.len());
        let mut resolution: Option<(usize, usize)> = None;
        for view in &obj.views {
            if view.extrinsic.len() != 12 || view.intrinsic.len() != 9 {
                return Err(Error::Validation(format!(
                    "object {}: extrinsic must have 12 entries and intrinsic 9",
                    obj.id
                )));
            }
            let extrinsic = Matrix3x4::from_row_slice(&view.extrinsic);
            let intrinsic = Matrix3::from_row_slice(&view.intrinsic);
            let camera = Camera {
                extrinsic,
                intrinsic,
                near: view.near,
                far: view.far,
            };
            camera.validate()?;
            let image_path = root.join(&view.image);
            let img = image::open(&image_path)
                .map_err(|e| match e {
                    image::ImageError::IoError(io) => Error::io(&image_path, io),
                    other => Error::Parse {
                        path: image_path.clone(),
                        message: other.to_string(),
                    },
                })?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            match resolution {
                None => resolution = Some((w, h)),
                Some(r) if r != (w, h) => {
                    return Err(Error::Validation(format!(
                        "object {}: view resolution {w}x{h} differs from {}x{}",
                        obj.id, r.0, r.1
                    )))
                }
                _ => {}
            }
            let image = img
                .pixels()
                .map(|p| {
                    [
                        srgb_u8_to_linear(p[0]),
                        srgb_u8_to_linear(p[1]),
                        srgb_u8_to_linear(p[2]),
                    ]
                })
                .collect();
            views.push(View {
                image,
                width: w,
                height: h,
                camera,
            });
        }
        records.push(ObjectRecord {
            object_id: obj.id.clone(),
            views,
        });
    }
    records.sort_by(|a, b| a.object_id.cmp(&b.object_id));
    Ok(records)
}

/// Write records as a dataset directory loadable by [`load_dataset`].
pub fn write_dataset(root: &Path, records: &[ObjectRecord]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut objects = Vec::with_capacity(records.len());
    for record in records {
        let obj_dir = root.join("images").join(&record.object_id);
        std::fs::create_dir_all(&obj_dir).map_err(|e| Error::io(&obj_dir, e))?;
        let mut views = Vec::with_capacity(record.views.len());
        for (v, view) in record.views.iter().enumerate() {
            let rel: PathBuf = ["images", record.object_id.as_str(), &format!("view_{v:03}.png")]
                .iter()
                .collect();
            let path = root.join(&rel);
            let mut img = image::RgbImage::new(view.width as u32, view.height as u32);
            for (i, px) in view.image.iter().enumerate() {
                img.put_pixel(
                    (i % view.width) as u32,
                    (i / view.width) as u32,
                    image::Rgb([
                        linear_to_srgb_u8(px[0]),
                        linear_to_srgb_u8(px[1]),
                        linear_to_srgb_u8(px[2]),
                    ]),
                );
            }
            img.save(&path).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&path, io),
                other => Error::Parse {
                    path: path.clone(),
                    message: other.to_string(),
                },
            })?;
            views.push(ManifestView {
                image: rel.to_string_lossy().into_owned(),
                extrinsic: view.camera.extrinsic.transpose().as_slice().to_vec(),
                intrinsic: view.camera.intrinsic.transpose().as_slice().to_vec(),
                near: view.camera.near,
                far: view.camera.far,
            });
        }
        objects.push(ManifestObject {
            id: record.object_id.clone(),
            views,
        });
    }
    let manifest = Manifest { objects };
    let path = root.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse {
        path: path.clone(),
        message: e.to_string(),
    })?;
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single_cube_spec(seed: u64) -> SyntheticFamilySpec {
        SyntheticFamilySpec {
            parts: vec![PartSpec {
                center_range: [(0.0, 0.0); 3],
                half_extent_range: [(0.4, 0.4); 3],
                color: [0.8, 0.2, 0.2],
            }],
            instance_count: 1,
            views_per_instance: 1,
            image_size: 64,
            seed,
            overlap_tolerance: 0.0,
        }
    }

    #[test]
    fn minimal_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (records, _) = generate_synthetic_family(&single_cube_spec(1)).unwrap();
        write_dataset(dir.path(), &records).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].views.len(), 1);
        assert_eq!(loaded[0].object_id, "instance_000");
    }

    #[test]
    fn missing_image_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = r#"{"objects":[{"id":"a","views":[{
            "image":"missing.png",
            "extrinsic":[1,0,0,0, 0,1,0,0, 0,0,1,3],
            "intrinsic":[64,0,32, 0,64,32, 0,0,1],
            "near":1.0,"far":5.0}]}]}"#;
        std::fs::write(dir.path().join("manifest.json"), manifest).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing.png"), "{err}");
    }

    #[test]
    fn round_trip_preserves_poses_exactly_and_images_closely() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticFamilySpec::toy_chair(2, 3, 32, 9);
        let (records, _) = generate_synthetic_family(&spec).unwrap();
        write_dataset(dir.path(), &records).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), records.len());
        for (a, b) in records.iter().zip(&loaded) {
            assert_eq!(a.object_id, b.object_id);
            for (va, vb) in a.views.iter().zip(&b.views) {
                assert_eq!(va.camera.extrinsic, vb.camera.extrinsic);
                assert_eq!(va.camera.intrinsic, vb.camera.intrinsic);
                assert_eq!((va.camera.near, va.camera.far), (vb.camera.near, vb.camera.far));
                for (pa, pb) in va.image.iter().zip(&vb.image) {
                    for c in 0..3 {
                        assert!((pa[c] - pb[c]).abs() <= 1.0 / 255.0);
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_under_seed() {
        let spec = SyntheticFamilySpec::toy_chair(2, 2, 16, 42);
        let (a, oa) = generate_synthetic_family(&spec).unwrap();
        let (b, ob) = generate_synthetic_family(&spec).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (va, vb) in ra.views.iter().zip(&rb.views) {
                assert_eq!(va.image, vb.image);
                assert_eq!(va.camera.extrinsic, vb.camera.extrinsic);
            }
        }
        for (ia, ib) in oa.instances.iter().zip(&ob.instances) {
            for (pa, pb) in ia.iter().zip(ib) {
                assert_eq!(pa.center, pb.center);
                assert_eq!(pa.half_extents, pb.half_extents);
            }
        }
    }

    #[test]
    fn single_cube_renders_a_shaded_silhouette() {
        let (records, oracle) = generate_synthetic_family(&single_cube_spec(3)).unwrap();
        let view = &records[0].views[0];
        let background = view
            .image
            .iter()
            .filter(|p| p.iter().all(|&c| c == 1.0))
            .count();
        let foreground = view.image.len() - background;
        assert!(foreground > 0, "cube must be visible");
        assert!(background > 0, "background must remain");
        // the oracle maps a cube corner to itself on the same instance
        let corner = Vector3::new(0.4, 0.4, 0.4);
        let mapped = oracle.gt_correspond(0, 0, corner).unwrap();
        assert_relative_eq!((mapped - corner).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_scale_correspondence_closed_form() {
        // two single-part instances differing only by a known scale
        let s = 1.5;
        let base = PartBox {
            center: [0.1, -0.2, 0.05],
            half_extents: [0.2, 0.3, 0.25],
            color: [0.5; 3],
        };
        let scaled = PartBox {
            center: [-0.1, 0.15, 0.0],
            half_extents: [0.2 * s, 0.3 * s, 0.25 * s],
            color: [0.5; 3],
        };
        let oracle = CorrespondenceOracle {
            instances: vec![vec![base], vec![scaled]],
            epsilon_surface: DEFAULT_EPSILON_SURFACE,
        };
        let p = Vector3::new(0.1 + 0.2, -0.2 + 0.1, 0.05 + 0.05); // on +x face
        let mapped = oracle.gt_correspond(0, 1, p).unwrap();
        let expected = scaled.center_vec() + (p - base.center_vec()) * s;
        assert_relative_eq!((mapped - expected).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn top_face_center_maps_to_top_face_center() {
        let spec = SyntheticFamilySpec::toy_chair(2, 1, 8, 11);
        let (_, oracle) = generate_synthetic_family(&spec).unwrap();
        let k = 0; // seat
        let src = &oracle.instances[0][k];
        let dst = &oracle.instances[1][k];
        let top_center = Vector3::new(src.center[0], src.center[1] + src.half_extents[1], src.center[2]);
        let mapped = oracle.gt_correspond(0, 1, top_center).unwrap();
        let expected = Vector3::new(dst.center[0], dst.center[1] + dst.half_extents[1], dst.center[2]);
        assert_relative_eq!((mapped - expected).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_instances_give_identity_correspondence() {
        let spec = SyntheticFamilySpec::toy_chair(1, 1, 8, 5);
        let (_, oracle) = generate_synthetic_family(&spec).unwrap();
        for part in &oracle.instances[0] {
            let p = Vector3::new(
                part.center[0] - part.half_extents[0],
                part.center[1],
                part.center[2],
            );
            let mapped = oracle.gt_correspond(0, 0, p).unwrap();
            assert_relative_eq!((mapped - p).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn off_surface_point_is_a_domain_error() {
        let spec = SyntheticFamilySpec::toy_chair(1, 1, 8, 6);
        let (_, oracle) = generate_synthetic_family(&spec).unwrap();
        assert!(matches!(
            oracle.gt_correspond(0, 0, Vector3::new(0.95, 0.95, 0.95)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn correspondence_is_bijective_between_instances() {
        let spec = SyntheticFamilySpec::toy_chair(3, 1, 8, 17);
        let (_, oracle) = generate_synthetic_family(&spec).unwrap();
        for k in 0..oracle.instances[0].len() {
            let part = oracle.instances[0][k];
            // face centers and corners of part k
            let mut points = Vec::new();
            for a in 0..3 {
                for sign in [-1.0, 1.0] {
                    let mut p = part.center_vec();
                    p[a] += sign * part.half_extents[a];
                    points.push(p);
                }
            }
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    for sz in [-1.0, 1.0] {
                        points.push(
                            part.center_vec()
                                + Vector3::new(
                                    sx * part.half_extents[0],
                                    sy * part.half_extents[1],
                                    sz * part.half_extents[2],
                                ),
                        );
                    }
                }
            }
            for p in points {
                let fwd = oracle.gt_correspond(0, 2, p).unwrap();
                let back = oracle.gt_correspond(2, 0, fwd).unwrap();
                assert!((back - p).norm() < 1e-9, "part {k}: {p:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn overlapping_parts_fail_generation() {
        let mut spec = single_cube_spec(1);
        spec.parts.push(spec.parts[0].clone());
        let err = generate_synthetic_family(&spec).unwrap_err();
        assert!(matches!(err, Error::Generation(_)), "{err}");
    }

    #[test]
    fn silhouettes_match_analytic_projection_within_boundary() {
        let spec = SyntheticFamilySpec::toy_chair(1, 4, 48, 23);
        let (records, oracle) = generate_synthetic_family(&spec).unwrap();
        let parts = &oracle.instances[0];
        for view in &records[0].views {
            let size = view.width;
            let rendered: Vec<bool> = view
                .image
                .iter()
                .map(|p| p.iter().any(|&c| c != 1.0))
                .collect();
            let analytic: Vec<bool> = (0..size * size)
                .map(|i| {
                    let (px, py) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
                    let ray = view.camera.pixel_to_ray(px, py).unwrap();
                    parts
                        .iter()
                        .any(|p| ray_box_hit(ray.origin, ray.direction, p).is_some())
                })
                .collect();
            for i in 0..size * size {
                if rendered[i] == analytic[i] {
                    continue;
                }
                // a mismatch must sit within one pixel of a mask boundary
                let (x, y) = ((i % size) as isize, (i / size) as isize);
                let mut near_boundary = false;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= size as isize || ny >= size as isize {
                            continue;
                        }
                        if analytic[(ny as usize) * size + nx as usize] != analytic[i] {
                            near_boundary = true;
                        }
                    }
                }
                assert!(near_boundary, "interior silhouette mismatch at pixel {i}");
            }
        }
    }

    #[test]
    fn spec_validation_rejects_degenerate_inputs() {
        let mut empty = single_cube_spec(1);
        empty.parts.clear();
        assert!(empty.validate().is_err());

        let mut bad_extent = single_cube_spec(1);
        bad_extent.parts[0].half_extent_range[1] = (0.0, 0.1);
        assert!(bad_extent.validate().is_err());

        let mut outside = single_cube_spec(1);
        outside.parts[0].center_range[0] = (0.9, 0.9);
        assert!(outside.validate().is_err());
    }
}
