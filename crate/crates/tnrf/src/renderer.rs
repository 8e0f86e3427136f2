//! Quadrature compositing of density/radiance samples into pixel colors,
//! expected depth, and accumulated opacity.
//!
//! The discretization is the standard piecewise-constant quadrature
//! `alpha_k = 1 - exp(-sigma_k delta_k)` with front-to-back transmittance.
//! Unfilled opacity is composited over a configurable background (white by
//! default). Depth is the opacity-normalized expected termination distance.

use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::camera::{sample_along_ray, Camera, RaySamples};
use crate::dataset::color::linear_to_srgb_u8;
use crate::error::{Error, Result};
use crate::fields::FieldModel;

/// Floor for the opacity denominator in the expected-depth ratio.
pub const OPACITY_EPSILON: f64 = 1e-8;

/// Per-sample compositing quantities along one ray.
#[derive(Debug, Clone)]
pub struct TransmittanceTrace {
    /// `alpha_k = 1 - exp(-sigma_k delta_k)`, each in `[0, 1]`.
    pub alphas: Vec<f64>,
    /// Front-to-back survival: `T_1 = 1`, `T_{k+1} = T_k (1 - alpha_k)`.
    pub transmittances: Vec<f64>,
    /// Rendering weights `w_k = T_k alpha_k`; they sum to at most 1.
    pub weights: Vec<f64>,
}

/// Composited result for one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    /// Expected termination distance in scene units.
    pub depth: f64,
    /// Accumulated opacity, the sum of the rendering weights.
    pub opacity: f64,
}

/// Blend density/radiance samples along one ray over a background color.
pub fn composite(
    samples: &RaySamples,
    sigma: &[f64],
    color: &[[f64; 3]],
    background: [f64; 3],
) -> Result<(RenderOutput, TransmittanceTrace)> {
    let p = samples.t_values.len();
    if sigma.len() != p || color.len() != p || samples.deltas.len() != p {
        return Err(Error::Shape(format!(
            "composite expects {p} samples, got {} densities and {} colors",
            sigma.len(),
            color.len()
        )));
    }
    let mut alphas = Vec::with_capacity(p);
    let mut transmittances = Vec::with_capacity(p);
    let mut weights = Vec::with_capacity(p);
    let mut t = 1.0;
    let mut out_color = [0.0; 3];
    let mut depth_sum = 0.0;
    let mut opacity = 0.0;
    for k in 0..p {
        let (s, d) = (sigma[k], samples.deltas[k]);
        if s < 0.0 {
            return Err(Error::Validation(format!("negative density {s} at sample {k}")));
        }
        if d < 0.0 {
            return Err(Error::Validation(format!("negative interval {d} at sample {k}")));
        }
        let alpha = 1.0 - (-s * d).exp();
        let w = t * alpha;
        for c in 0..3 {
            out_color[c] += w * color[k][c];
        }
        depth_sum += w * samples.t_values[k];
        opacity += w;
        alphas.push(alpha);
        transmittances.push(t);
        weights.push(w);
        t *= 1.0 - alpha;
    }
    for c in 0..3 {
        out_color[c] += (1.0 - opacity) * background[c];
    }
    let depth = depth_sum / opacity.max(OPACITY_EPSILON);
    Ok((
        RenderOutput {
            color: out_color,
            depth,
            opacity,
        },
        TransmittanceTrace {
            alphas,
            transmittances,
            weights,
        },
    ))
}

/// Tape handles produced by [`composite_batch`].
pub struct CompositeVars {
    /// `[3 x rays]` composited colors.
    pub color: Var,
    /// `[1 x rays]` expected depths.
    pub depth: Var,
    /// `[1 x rays]` accumulated opacities.
    pub opacity: Var,
    /// `[1 x rays*P]` rendering weights, ray-major.
    pub weights: Var,
}

/// Differentiable compositing of `rays` contiguous segments of `P` samples.
///
/// `sigma` is `[1 x rays*P]`, `color` is `[3 x rays*P]`, `t_values` and
/// `deltas` are `[1 x rays*P]` constants, all ray-major.
pub fn composite_batch<T: Real>(
    tape: &mut Tape<T>,
    sigma: Var,
    color: Var,
    t_values: Var,
    deltas: Var,
    samples_per_ray: usize,
    background: [f64; 3],
) -> CompositeVars {
    let total = tape.value(sigma).cols;
    let rays = total / samples_per_ray;
    let sd = tape.mul(sigma, deltas);
    let neg_sd = tape.neg(sd);
    let survival = tape.exp(neg_sd);
    let alpha = tape.scale_add(survival, -T::one(), T::one());
    let trans = tape.exclusive_cumprod_seg(survival, samples_per_ray);
    let weights = tape.mul(trans, alpha);
    let opacity = tape.sum_seg(weights, samples_per_ray);
    let weighted_color = tape.mul_row_broadcast(color, weights);
    let color_sum = tape.sum_seg(weighted_color, samples_per_ray);
    let residual = tape.scale_add(opacity, -T::one(), T::one());
    let bg = {
        let mut t = Tensor::zeros(3, rays);
        for c in 0..3 {
            for v in t.row_mut(c) {
                *v = T::from_f64(background[c]);
            }
        }
        tape.constant(t)
    };
    let bg_contrib = tape.mul_row_broadcast(bg, residual);
    let color_out = tape.add(color_sum, bg_contrib);
    let weighted_t = tape.mul(weights, t_values);
    let depth_sum = tape.sum_seg(weighted_t, samples_per_ray);
    let denom = tape.max_const(opacity, T::from_f64(OPACITY_EPSILON));
    let inv = tape.recip(denom);
    let depth = tape.mul(depth_sum, inv);
    CompositeVars {
        color: color_out,
        depth,
        opacity,
        weights,
    }
}

/// Full-frame render settings.
#[derive(Debug, Clone)]
pub struct RenderSettings {
    pub width: usize,
    pub height: usize,
    pub samples_per_ray: usize,
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            width: 64,
            height: 64,
            samples_per_ray: 64,
            background: [1.0, 1.0, 1.0],
        }
    }
}

/// A rendered frame in row-major pixel order.
#[derive(Debug, Clone)]
pub struct ViewRender {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

/// Render an arbitrary density/radiance field given per-point evaluation.
///
/// `field(position, direction) -> (sigma, rgb)` must be pure; rays are
/// rendered in parallel and written in deterministic row-major order.
pub fn render_field_view<F>(field: &F, camera: &Camera, settings: &RenderSettings) -> Result<ViewRender>
where
    F: Fn(Vector3<f64>, Vector3<f64>) -> (f64, [f64; 3]) + Sync,
{
    let (w, h) = (settings.width, settings.height);
    let results: Result<Vec<RenderOutput>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (px, py) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            let ray = camera.pixel_to_ray(px, py)?;
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            let samples = sample_along_ray(&ray, settings.samples_per_ray, false, &mut rng)?;
            let (sigma, color): (Vec<f64>, Vec<[f64; 3]>) = samples
                .positions
                .iter()
                .map(|p| field(*p, ray.direction))
                .unzip();
            let (out, _) = composite(&samples, &sigma, &color, settings.background)?;
            Ok(out)
        })
        .collect();
    let results = results?;
    Ok(ViewRender {
        width: w,
        height: h,
        color: results.iter().map(|r| r.color).collect(),
        depth: results.iter().map(|r| r.depth).collect(),
        opacity: results.iter().map(|r| r.opacity).collect(),
    })
}

/// Render a frame from a field model and one object's latent codes.
pub fn render_view<T: Real>(
    model: &FieldModel<T>,
    z_shape: &[T],
    z_appearance: &[T],
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<ViewRender> {
    let (w, h) = (settings.width, settings.height);
    let p = settings.samples_per_ray;
    let mut positions = Vec::with_capacity(w * h * p);
    let mut dirs = Vec::with_capacity(w * h * p);
    let mut all_samples = Vec::with_capacity(w * h);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for i in 0..w * h {
        let (px, py) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        let ray = camera.pixel_to_ray(px, py)?;
        let samples = sample_along_ray(&ray, p, false, &mut rng)?;
        positions.extend_from_slice(&samples.positions);
        dirs.extend(std::iter::repeat(ray.direction).take(p));
        all_samples.push(samples);
    }
    let (sigma, color) = model.instance_points(&positions, &dirs, z_shape, z_appearance);
    let results: Result<Vec<RenderOutput>> = all_samples
        .par_iter()
        .enumerate()
        .map(|(i, samples)| {
            let (out, _) = composite(
                samples,
                &sigma[i * p..(i + 1) * p],
                &color[i * p..(i + 1) * p],
                settings.background,
            )?;
            Ok(out)
        })
        .collect();
    let results = results?;
    Ok(ViewRender {
        width: w,
        height: h,
        color: results.iter().map(|r| r.color).collect(),
        depth: results.iter().map(|r| r.depth).collect(),
        opacity: results.iter().map(|r| r.opacity).collect(),
    })
}

/// Mean squared error and peak signal-to-noise ratio between two frames of
/// linear RGB pixels.
pub fn psnr(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "psnr expects equal nonempty frames, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut mse = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        for c in 0..3 {
            let d = pa[c] - pb[c];
            mse += d * d;
        }
    }
    mse /= (a.len() * 3) as f64;
    let psnr = -10.0 * mse.max(1e-12).log10();
    Ok((mse, psnr))
}

/// Recorded depth range accompanying a 16-bit depth image.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::Parse {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Write linear RGB pixels as an 8-bit sRGB PNG.
pub fn write_color_png(path: &Path, width: usize, height: usize, pixels: &[[f64; 3]]) -> Result<()> {
    let mut img = image::RgbImage::new(width as u32, height as u32);
    for (i, px) in pixels.iter().enumerate() {
        let (x, y) = ((i % width) as u32, (i / width) as u32);
        img.put_pixel(
            x,
            y,
            image::Rgb([
                linear_to_srgb_u8(px[0]),
                linear_to_srgb_u8(px[1]),
                linear_to_srgb_u8(px[2]),
            ]),
        );
    }
    img.save(path).map_err(|e| image_err(path, e))
}

/// Write a depth map as a 16-bit PNG scaled to its range, with the range
/// recorded in a `.range.json` sidecar next to the image.
pub fn write_depth_png(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<(DepthRange, std::path::PathBuf)> {
    let min = depth.iter().copied().fold(f64::INFINITY, f64::min);
    let max = depth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(width as u32, height as u32);
    for (i, d) in depth.iter().enumerate() {
        let (x, y) = ((i % width) as u32, (i / width) as u32);
        let v = (((d - min) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16;
        img.put_pixel(x, y, image::Luma([v]));
    }
    img.save(path).map_err(|e| image_err(path, e))?;
    let range = DepthRange { min, max };
    let sidecar = path.with_extension("range.json");
    let body = serde_json::to_string_pretty(&range).map_err(|e| Error::Parse {
        path: sidecar.clone(),
        message: e.to_string(),
    })?;
    std::fs::write(&sidecar, body).map_err(|e| Error::io(&sidecar, e))?;
    Ok((range, sidecar))
}

/// Write an opacity map as an 8-bit grayscale PNG.
pub fn write_opacity_png(path: &Path, width: usize, height: usize, opacity: &[f64]) -> Result<()> {
    let mut img = image::GrayImage::new(width as u32, height as u32);
    for (i, o) in opacity.iter().enumerate() {
        let (x, y) = ((i % width) as u32, (i / width) as u32);
        let v = (o.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(x, y, image::Luma([v]));
    }
    img.save(path).map_err(|e| image_err(path, e))
}
