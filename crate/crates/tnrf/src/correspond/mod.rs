//! Dense correspondences mediated by the shared template space.
//!
//! Instance surfaces are extracted with marching cubes, warped into the
//! template with the deformation field, and matched by exact nearest
//! neighbor search over a uniform spatial hash grid. On top of the raw
//! point map sit keypoint transfer (with pixel lifting through rendered
//! depth) and texture transfer (recoloring one instance's surface with
//! another's radiance).

pub mod marching;
pub mod mesh;
mod tables;

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::camera::{sample_along_ray, Camera};
use crate::error::{Error, Result};
use crate::fields::FieldModel;
use crate::renderer::{composite, RenderOutput, RenderSettings, ViewRender};
use marching::{marching_cubes, GridField};
use mesh::Mesh;

/// Iso-level for surface extraction; trained densities saturate well
/// above this near surfaces.
pub const DEFAULT_ISO_LEVEL: f64 = 10.0;

/// Surface extraction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSettings {
    /// Cells per axis of the sampling grid over `[-1, 1]^3`.
    pub grid_resolution: usize,
    /// Density iso-level defining the surface.
    pub level: f64,
}

impl Default for ExtractionSettings {
    fn default() -> Self {
        ExtractionSettings {
            grid_resolution: 64,
            level: DEFAULT_ISO_LEVEL,
        }
    }
}

/// Extract the iso-surface of an instance's density field.
pub fn extract_mesh<T: Real>(
    model: &FieldModel<T>,
    z_shape: &[T],
    settings: &ExtractionSettings,
) -> Result<Mesh> {
    let grid = GridField::sample(settings.grid_resolution, |points| {
        model.instance_density_points(points, z_shape)
    })?;
    Ok(marching_cubes(&grid, settings.level))
}

/// Warp points into template space; the batched equivalent of applying
/// the deformation field point by point.
pub fn to_template<T: Real>(
    model: &FieldModel<T>,
    points: &[Vector3<f64>],
    z_shape: &[T],
) -> Vec<Vector3<f64>> {
    model
        .warp_points(points, z_shape)
        .into_iter()
        .map(|(warped, _)| warped)
        .collect()
}

/// Uniform hash grid over a fixed point set for exact nearest neighbor
/// queries. Ties are broken toward the lowest point index.
pub struct SpatialIndex {
    cell: f64,
    origin: Vector3<f64>,
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
    points: Vec<Vector3<f64>>,
}

impl SpatialIndex {
    pub fn build(points: Vec<Vector3<f64>>, cell: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("cannot index an empty point set".into()));
        }
        if !(cell > 0.0) {
            return Err(Error::Validation(format!("cell size must be positive, got {cell}")));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in &points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let dims = std::array::from_fn(|k| (((hi[k] - lo[k]) / cell).floor() as usize) + 1);
        let mut index = SpatialIndex {
            cell,
            origin: lo,
            dims,
            buckets: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
            points,
        };
        for (i, p) in index.points.iter().enumerate() {
            let c = index.cell_of(p);
            index.buckets[Self::flat(&index.dims, c)].push(i as u32);
        }
        Ok(index)
    }

    fn flat(dims: &[usize; 3], c: [usize; 3]) -> usize {
        (c[2] * dims[1] + c[1]) * dims[0] + c[0]
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [usize; 3] {
        std::array::from_fn(|k| {
            (((p[k] - self.origin[k]) / self.cell).floor().max(0.0) as usize).min(self.dims[k] - 1)
        })
    }

    /// Exact nearest point by expanding shell search: `(index, distance)`.
    pub fn nearest(&self, query: &Vector3<f64>) -> (usize, f64) {
        let home: [i64; 3] = std::array::from_fn(|k| {
            ((query[k] - self.origin[k]) / self.cell).floor() as i64
        });
        let mut best: Option<(usize, f64)> = None;
        let max_shell = self.dims.iter().max().unwrap() + 1;
        for shell in 0..=max_shell as i64 {
            if let Some((_, d)) = best {
                // every cell in this shell is at least (shell - 1) cells away
                if (shell - 1) as f64 * self.cell > d {
                    break;
                }
            }
            for dz in -shell..=shell {
                for dy in -shell..=shell {
                    for dx in -shell..=shell {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != shell {
                            continue;
                        }
                        let c = [home[0] + dx, home[1] + dy, home[2] + dz];
                        if c.iter().zip(&self.dims).any(|(&v, &d)| v < 0 || v >= d as i64) {
                            continue;
                        }
                        let bucket =
                            &self.buckets[Self::flat(&self.dims, [c[0] as usize, c[1] as usize, c[2] as usize])];
                        for &i in bucket {
                            let d = (self.points[i as usize] - query).norm();
                            let better = match best {
                                None => true,
                                Some((bi, bd)) => d < bd || (d == bd && (i as usize) < bi),
                            };
                            if better {
                                best = Some((i as usize, d));
                            }
                        }
                    }
                }
            }
        }
        best.expect("index is nonempty")
    }
}

/// A dense point-to-point correspondence between two instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    pub source_instance: usize,
    pub target_instance: usize,
    pub source_points: Vec<Vector3<f64>>,
    pub template_points: Vec<Vector3<f64>>,
    pub target_points: Vec<Vector3<f64>>,
    pub distances_in_template: Vec<f64>,
    /// Index of the matched target mesh vertex per query.
    pub target_vertices: Vec<usize>,
}

impl CorrespondenceMap {
    pub fn validate(&self) -> Result<()> {
        let q = self.source_points.len();
        if self.template_points.len() != q
            || self.target_points.len() != q
            || self.distances_in_template.len() != q
            || self.target_vertices.len() != q
        {
            return Err(Error::Shape("correspondence field lengths differ".into()));
        }
        if self.distances_in_template.iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::Validation("negative correspondence distance".into()));
        }
        Ok(())
    }

    /// Write one row per query: source, template, and target coordinates
    /// plus the template-space match distance.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(
                w,
                "source_x,source_y,source_z,template_x,template_y,template_z,target_x,target_y,target_z,distance"
            )?;
            for i in 0..self.source_points.len() {
                let (s, m, t) = (self.source_points[i], self.template_points[i], self.target_points[i]);
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{}",
                    s.x, s.y, s.z, m.x, m.y, m.z, t.x, t.y, t.z, self.distances_in_template[i]
                )?;
            }
            Ok(())
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

/// Correspond query points on the source instance to a target mesh that
/// has already been extracted.
pub fn correspond_to_mesh<T: Real>(
    model: &FieldModel<T>,
    z_shape_source: &[T],
    z_shape_target: &[T],
    queries: &[Vector3<f64>],
    target_mesh: &Mesh,
    settings: &ExtractionSettings,
    source_instance: usize,
    target_instance: usize,
) -> Result<CorrespondenceMap> {
    if target_mesh.is_empty() {
        return Err(Error::Domain("target mesh is empty".into()));
    }
    let warped_targets = to_template(model, &target_mesh.vertices, z_shape_target);
    let cell = 2.0 * (2.0 / settings.grid_resolution as f64);
    let index = SpatialIndex::build(warped_targets, cell)?;
    let template_points = to_template(model, queries, z_shape_source);
    let matches: Vec<(usize, f64)> = template_points.par_iter().map(|q| index.nearest(q)).collect();
    let map = CorrespondenceMap {
        source_instance,
        target_instance,
        source_points: queries.to_vec(),
        target_points: matches.iter().map(|&(i, _)| target_mesh.vertices[i]).collect(),
        target_vertices: matches.iter().map(|&(i, _)| i).collect(),
        distances_in_template: matches.iter().map(|&(_, d)| d).collect(),
        template_points,
    };
    map.validate()?;
    Ok(map)
}

/// Correspond query points on the source instance to the target
/// instance, extracting the target surface internally.
pub fn correspond<T: Real>(
    model: &FieldModel<T>,
    z_shape_source: &[T],
    z_shape_target: &[T],
    queries: &[Vector3<f64>],
    settings: &ExtractionSettings,
    source_instance: usize,
    target_instance: usize,
) -> Result<CorrespondenceMap> {
    let target_mesh = extract_mesh(model, z_shape_target, settings)?;
    correspond_to_mesh(
        model,
        z_shape_source,
        z_shape_target,
        queries,
        &target_mesh,
        settings,
        source_instance,
        target_instance,
    )
}

/// Minimum accumulated opacity for a pixel to count as foreground.
pub const LIFT_OPACITY_THRESHOLD: f64 = 0.5;

/// Lift a pixel to 3D through any density field's expected depth.
pub fn lift_pixel_field(
    field: impl Fn(&[Vector3<f64>]) -> Vec<f64>,
    camera: &Camera,
    px: f64,
    py: f64,
    samples_per_ray: usize,
) -> Result<Vector3<f64>> {
    let ray = camera.pixel_to_ray(px, py)?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let samples = sample_along_ray(&ray, samples_per_ray, false, &mut rng)?;
    let sigma = field(&samples.positions);
    let colors = vec![[0.0; 3]; sigma.len()];
    let (out, _): (RenderOutput, _) = composite(&samples, &sigma, &colors, [0.0; 3])?;
    if out.opacity < LIFT_OPACITY_THRESHOLD {
        return Err(Error::Domain(format!(
            "background pixel ({px}, {py}): opacity {:.3} below {LIFT_OPACITY_THRESHOLD}",
            out.opacity
        )));
    }
    Ok(ray.point_at(out.depth))
}

/// Lift a pixel on a rendered instance to the 3D point at its expected
/// depth. Fails on background pixels.
pub fn lift_pixel<T: Real>(
    model: &FieldModel<T>,
    z_shape: &[T],
    camera: &Camera,
    px: f64,
    py: f64,
    samples_per_ray: usize,
) -> Result<Vector3<f64>> {
    lift_pixel_field(
        |points| model.instance_density_points(points, z_shape),
        camera,
        px,
        py,
        samples_per_ray,
    )
}

/// One named keypoint annotation: either a 3D position or a pixel in a
/// specific view, never both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointEntry {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xyz: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel: Option<PixelRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelRef {
    pub view: usize,
    pub x: f64,
    pub y: f64,
}

impl KeypointEntry {
    pub fn validate(&self) -> Result<()> {
        match (&self.xyz, &self.pixel) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::Validation(format!(
                "keypoint `{}` must have exactly one of xyz or pixel",
                self.name
            ))),
        }
    }
}

/// A keypoint annotation file: an instance index and its keypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub instance: usize,
    pub keypoints: Vec<KeypointEntry>,
}

impl KeypointSet {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: KeypointSet = serde_json::from_str(&body).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        for k in &set.keypoints {
            k.validate()?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        for k in &self.keypoints {
            k.validate()?;
        }
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

/// Resolve annotations to 3D positions, lifting pixel annotations through
/// the given cameras (indexed by view).
pub fn resolve_keypoints<T: Real>(
    model: &FieldModel<T>,
    z_shape: &[T],
    cameras: &[Camera],
    set: &KeypointSet,
    samples_per_ray: usize,
) -> Result<Vec<(String, Vector3<f64>)>> {
    let mut out = Vec::with_capacity(set.keypoints.len());
    for entry in &set.keypoints {
        entry.validate()?;
        let position = match (&entry.xyz, &entry.pixel) {
            (Some(p), None) => Vector3::new(p[0], p[1], p[2]),
            (None, Some(px)) => {
                let camera = cameras.get(px.view).ok_or_else(|| {
                    Error::Validation(format!(
                        "keypoint `{}` references view {} of {}",
                        entry.name,
                        px.view,
                        cameras.len()
                    ))
                })?;
                lift_pixel(model, z_shape, camera, px.x + 0.5, px.y + 0.5, samples_per_ray)?
            }
            _ => unreachable!("validated above"),
        };
        out.push((entry.name.clone(), position));
    }
    Ok(out)
}

/// Keypoints carried onto one target instance.
#[derive(Debug, Clone)]
pub struct TransferredKeypoints {
    pub target_instance: usize,
    /// `(name, position on the target, template-space match distance)`.
    pub keypoints: Vec<(String, Vector3<f64>, f64)>,
}

/// Transfer resolved keypoints from the source instance onto each target.
pub fn transfer_keypoints<T: Real>(
    model: &FieldModel<T>,
    z_shape_source: &[T],
    source_instance: usize,
    keypoints: &[(String, Vector3<f64>)],
    targets: &[(usize, &[T])],
    settings: &ExtractionSettings,
) -> Result<Vec<TransferredKeypoints>> {
    let queries: Vec<Vector3<f64>> = keypoints.iter().map(|(_, p)| *p).collect();
    let mut out = Vec::with_capacity(targets.len());
    for &(target_instance, z_target) in targets {
        let map = correspond(
            model,
            z_shape_source,
            z_target,
            &queries,
            settings,
            source_instance,
            target_instance,
        )?;
        out.push(TransferredKeypoints {
            target_instance,
            keypoints: keypoints
                .iter()
                .enumerate()
                .map(|(i, (name, _))| {
                    (name.clone(), map.target_points[i], map.distances_in_template[i])
                })
                .collect(),
        });
    }
    Ok(out)
}

/// The source side of a texture transfer: the source surface colored by
/// its own radiance, and its vertices indexed in template space.
pub struct TextureSource {
    pub mesh: Mesh,
    index: SpatialIndex,
    colors: Vec<[f64; 3]>,
}

/// Extract the source surface and bake per-vertex radiance, evaluated at
/// each vertex along its outward normal.
pub fn texture_source<T: Real>(
    model: &FieldModel<T>,
    z_shape: &[T],
    z_appearance: &[T],
    settings: &ExtractionSettings,
) -> Result<TextureSource> {
    let mut mesh = extract_mesh(model, z_shape, settings)?;
    if mesh.is_empty() {
        return Err(Error::Domain("source mesh is empty".into()));
    }
    let normals = mesh.normals.clone().unwrap_or_else(|| vec![Vector3::zeros(); mesh.vertices.len()]);
    let colors = model.instance_radiance_points(&mesh.vertices, &normals, z_shape, z_appearance);
    mesh.colors = Some(colors.clone());
    let warped = to_template(model, &mesh.vertices, z_shape);
    let cell = 2.0 * (2.0 / settings.grid_resolution as f64);
    let index = SpatialIndex::build(warped, cell)?;
    Ok(TextureSource { mesh, index, colors })
}

impl TextureSource {
    /// Color template-space points by their nearest source vertex.
    pub fn color_at_template(&self, template_points: &[Vector3<f64>]) -> Vec<[f64; 3]> {
        template_points
            .par_iter()
            .map(|q| self.colors[self.index.nearest(q).0])
            .collect()
    }
}

/// Recolor the target instance's surface with the source instance's
/// radiance, matched through the template.
pub fn transfer_texture<T: Real>(
    model: &FieldModel<T>,
    z_shape_source: &[T],
    z_appearance_source: &[T],
    z_shape_target: &[T],
    settings: &ExtractionSettings,
) -> Result<Mesh> {
    let source = texture_source(model, z_shape_source, z_appearance_source, settings)?;
    let mut target = extract_mesh(model, z_shape_target, settings)?;
    if target.is_empty() {
        return Err(Error::Domain("target mesh is empty".into()));
    }
    let warped = to_template(model, &target.vertices, z_shape_target);
    target.colors = Some(source.color_at_template(&warped));
    Ok(target)
}

/// Render the target instance's geometry with colors pulled from the
/// source through the template, sample by sample along camera rays.
pub fn render_texture_transfer<T: Real>(
    model: &FieldModel<T>,
    z_shape_source: &[T],
    z_appearance_source: &[T],
    z_shape_target: &[T],
    camera: &Camera,
    settings: &ExtractionSettings,
    render: &RenderSettings,
) -> Result<ViewRender> {
    let source = texture_source(model, z_shape_source, z_appearance_source, settings)?;
    let (w, h) = (render.width, render.height);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut all_samples = Vec::with_capacity(w * h);
    let mut positions = Vec::with_capacity(w * h * render.samples_per_ray);
    for i in 0..w * h {
        let (px, py) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        let ray = camera.pixel_to_ray(px, py)?;
        let samples = sample_along_ray(&ray, render.samples_per_ray, false, &mut rng)?;
        positions.extend_from_slice(&samples.positions);
        all_samples.push(samples);
    }
    let sigma = model.instance_density_points(&positions, z_shape_target);
    let warped = to_template(model, &positions, z_shape_target);
    let colors = source.color_at_template(&warped);
    let p = render.samples_per_ray;
    let outputs: Result<Vec<RenderOutput>> = all_samples
        .par_iter()
        .enumerate()
        .map(|(i, samples)| {
            let lo = i * p;
            let (out, _) = composite(samples, &sigma[lo..lo + p], &colors[lo..lo + p], render.background)?;
            Ok(out)
        })
        .collect();
    let outputs = outputs?;
    Ok(ViewRender {
        width: w,
        height: h,
        color: outputs.iter().map(|o| o.color).collect(),
        depth: outputs.iter().map(|o| o.depth).collect(),
        opacity: outputs.iter().map(|o| o.opacity).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> (FieldModel<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = FieldModel::new(ModelConfig::tiny(4, 4, 16), &mut rng);
        let zs = vec![0.01, -0.02, 0.03, 0.005];
        let za = vec![-0.01, 0.02, 0.0, 0.015];
        (model, zs, za)
    }

    /// Iso-level placed at the median sampled density, so an untrained
    /// model still yields a nonempty surface.
    fn median_level(model: &FieldModel<f64>, zs: &[f64], g: usize) -> f64 {
        let grid = GridField::sample(g, |pts| model.instance_density_points(pts, zs)).unwrap();
        let mut v = grid.values.clone();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn spatial_index_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let points: Vec<Vector3<f64>> = (0..400)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let index = SpatialIndex::build(points.clone(), 0.25).unwrap();
        for _ in 0..200 {
            let q = Vector3::new(
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
            );
            let (bi, bd) = points
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .unwrap();
            let (gi, gd) = index.nearest(&q);
            assert_eq!(gi, bi);
            assert!((gd - bd).abs() < 1e-12);
        }
    }

    #[test]
    fn equidistant_query_prefers_the_lower_index() {
        let points = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0)];
        let index = SpatialIndex::build(points, 0.5).unwrap();
        let (i, d) = index.nearest(&Vector3::zeros());
        assert_eq!(i, 0);
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn to_template_matches_pointwise_warp() {
        let (model, zs, _) = tiny_model();
        let points = vec![Vector3::new(0.2, -0.4, 0.1), Vector3::new(-0.7, 0.3, 0.9)];
        let warped = to_template(&model, &points, &zs);
        for (w, (expect, _)) in warped.iter().zip(model.warp_points(&points, &zs)) {
            assert_eq!(*w, expect);
        }
    }

    #[test]
    fn self_correspondence_is_exact_on_mesh_vertices() {
        let (model, zs, _) = tiny_model();
        let settings = ExtractionSettings {
            grid_resolution: 12,
            level: median_level(&model, &zs, 12),
        };
        let mesh = extract_mesh(&model, &zs, &settings).unwrap();
        assert!(!mesh.is_empty());
        let queries = mesh.vertices[..mesh.vertices.len().min(50)].to_vec();
        let map =
            correspond_to_mesh(&model, &zs, &zs, &queries, &mesh, &settings, 0, 0).unwrap();
        for (i, q) in queries.iter().enumerate() {
            assert_eq!(map.target_points[i], *q);
            assert_eq!(map.distances_in_template[i], 0.0);
        }
    }

    #[test]
    fn correspondence_to_empty_mesh_is_an_error() {
        let (model, zs, _) = tiny_model();
        let settings = ExtractionSettings::default();
        let empty = Mesh::default();
        let queries = vec![Vector3::zeros()];
        let err = correspond_to_mesh(&model, &zs, &zs, &queries, &empty, &settings, 0, 1);
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn denser_target_mesh_does_not_increase_template_distances() {
        let (model, zs, _) = tiny_model();
        let queries = vec![
            Vector3::new(0.1, 0.2, -0.3),
            Vector3::new(-0.5, 0.0, 0.4),
            Vector3::new(0.3, -0.6, 0.2),
        ];
        let mut mean = Vec::new();
        for g in [10, 20] {
            let settings = ExtractionSettings {
                grid_resolution: g,
                level: median_level(&model, &zs, g),
            };
            let map = correspond(&model, &zs, &zs, &queries, &settings, 0, 1).unwrap();
            let m: f64 = map.distances_in_template.iter().sum::<f64>() / queries.len() as f64;
            mean.push(m);
        }
        assert!(mean[1] <= mean[0] + 1e-12, "{mean:?}");
    }

    fn test_camera(size: f64) -> Camera {
        use nalgebra::Matrix3;
        let k = Matrix3::new(size, 0.0, size / 2.0, 0.0, size, size / 2.0, 0.0, 0.0, 1.0);
        Camera::look_at(
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            k,
            1.0,
            5.0,
        )
    }

    #[test]
    fn lift_pixel_recovers_a_slab_surface() {
        let size = 33.0;
        let camera = test_camera(size);
        // opaque slab with its front face at z = -2 (wait, front toward camera)
        let field = |points: &[Vector3<f64>]| -> Vec<f64> {
            points.iter().map(|p| if p.z <= 0.0 { 500.0 } else { 0.0 }).collect()
        };
        let p = lift_pixel_field(field, &camera, size / 2.0, size / 2.0, 256).unwrap();
        // expected depth is just past the first opaque sample behind z = 0
        let tolerance = 2.0 * (5.0 - 1.0) / 256.0;
        assert!(p.z.abs() < tolerance, "lifted {p:?}");
        assert!(p.x.abs() < 1e-9 && p.y.abs() < 1e-9);
    }

    #[test]
    fn lift_pixel_rejects_background() {
        let (model, zs, _) = tiny_model();
        let camera = test_camera(33.0);
        // scale the latent field's density down to guarantee transparency
        let field = |points: &[Vector3<f64>]| -> Vec<f64> {
            model
                .instance_density_points(points, &zs)
                .into_iter()
                .map(|s| s * 1e-6)
                .collect()
        };
        let err = lift_pixel_field(field, &camera, 16.5, 16.5, 32);
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn keypoint_set_round_trips_and_rejects_double_form() {
        let set = KeypointSet {
            instance: 2,
            keypoints: vec![
                KeypointEntry {
                    name: "seat_center".into(),
                    xyz: Some([0.0, 0.1, 0.0]),
                    pixel: None,
                },
                KeypointEntry {
                    name: "back_top".into(),
                    xyz: None,
                    pixel: Some(PixelRef { view: 1, x: 12.0, y: 7.0 }),
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kp.json");
        set.save(&path).unwrap();
        assert_eq!(KeypointSet::load(&path).unwrap(), set);

        let bad = KeypointEntry {
            name: "both".into(),
            xyz: Some([0.0; 3]),
            pixel: Some(PixelRef { view: 0, x: 0.0, y: 0.0 }),
        };
        assert!(bad.validate().is_err());
        let neither = KeypointEntry {
            name: "neither".into(),
            xyz: None,
            pixel: None,
        };
        assert!(neither.validate().is_err());
    }

    #[test]
    fn keypoints_transfer_to_self_unchanged() {
        let (model, zs, _) = tiny_model();
        let settings = ExtractionSettings {
            grid_resolution: 12,
            level: median_level(&model, &zs, 12),
        };
        let mesh = extract_mesh(&model, &zs, &settings).unwrap();
        let keypoints: Vec<(String, Vector3<f64>)> = mesh.vertices[..4]
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("k{i}"), *v))
            .collect();
        let targets: Vec<(usize, &[f64])> = vec![(0, &zs)];
        let out = transfer_keypoints(&model, &zs, 0, &keypoints, &targets, &settings).unwrap();
        for (i, (name, p, d)) in out[0].keypoints.iter().enumerate() {
            assert_eq!(name, &keypoints[i].0);
            assert_eq!(*p, keypoints[i].1);
            assert_eq!(*d, 0.0);
        }
    }

    #[test]
    fn texture_transfer_to_self_keeps_vertex_colors() {
        let (model, zs, za) = tiny_model();
        let settings = ExtractionSettings {
            grid_resolution: 12,
            level: median_level(&model, &zs, 12),
        };
        let source = texture_source(&model, &zs, &za, &settings).unwrap();
        let transferred = transfer_texture(&model, &zs, &za, &zs, &settings).unwrap();
        let (sc, tc) = (source.mesh.colors.unwrap(), transferred.colors.unwrap());
        assert_eq!(sc, tc);
        for c in &tc {
            assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn texture_transfer_render_has_frame_shape() {
        let (model, zs, za) = tiny_model();
        let settings = ExtractionSettings {
            grid_resolution: 10,
            level: median_level(&model, &zs, 10),
        };
        let camera = test_camera(8.0);
        let render = RenderSettings {
            width: 8,
            height: 8,
            samples_per_ray: 8,
            background: [1.0; 3],
        };
        let view =
            render_texture_transfer(&model, &zs, &za, &zs, &camera, &settings, &render).unwrap();
        assert_eq!(view.color.len(), 64);
        assert!(view.color.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
