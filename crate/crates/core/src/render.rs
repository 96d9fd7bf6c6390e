//! Differentiable splatting of point clouds into silhouettes and RGB images.
//!
//! Points are projected with a pinhole camera and splatted with an isotropic
//! Gaussian truncated at `3σ`. Silhouettes take the union of the splats as
//! `1 − ∏(1 − kᵢ)`. Colors are a weighted average where each splat weight is
//! scaled by `exp(−(depth − distance)/τ)`, so nearer points dominate, and a
//! tiny background weight resolves empty pixels to the background color.
//!
//! Pixel `(row, col)` has its center at image coordinates `(u, v) = (col, row)`.
//! Images are channel-major `[3, H, W]`; masks are `[H, W]`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{CustomOp, DiffError, Tape, Tensor, Var};
use crate::geometry::{transform_to_camera_var, PointCloud, Viewpoint, CAMERA_DISTANCE};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("cannot render an empty point cloud")]
    EmptyCloud,
    #[error("point {index} has non-positive camera depth {depth}")]
    BehindCamera { index: usize, depth: f64 },
    #[error("point cloud has no colors")]
    MissingColors,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            focal: 64.0,
            cx: 32.0,
            cy: 32.0,
        }
    }
}

/// Everything the splatting kernels need besides the cloud and viewpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub intrinsics: CameraIntrinsics,
    /// Gaussian kernel width in pixels.
    pub sigma: f64,
    /// Depth temperature of the soft z-ordering, in object units.
    pub tau_depth: f64,
    pub background: [f64; 3],
    /// Weight of the background color in every pixel's blend.
    pub background_weight: f64,
    pub distance: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            sigma: 1.0,
            tau_depth: 0.1,
            background: [1.0, 1.0, 1.0],
            background_weight: 1e-8,
            distance: CAMERA_DISTANCE,
        }
    }
}

impl RenderSettings {
    fn radius(&self) -> f64 {
        3.0 * self.sigma
    }

    pub fn pixels(&self) -> usize {
        self.intrinsics.height * self.intrinsics.width
    }
}

/// Projected image coordinates `[N, 2]` and camera depths `[N]`.
#[derive(Clone, Copy, Debug)]
pub struct Projection<'t> {
    pub uv: Var<'t>,
    pub depth: Var<'t>,
}

/// Pinhole projection of `[N, 3]` points seen from (azimuth, elevation) in degrees.
pub fn project_points<'t>(
    points: Var<'t>,
    azimuth: Var<'t>,
    elevation: Var<'t>,
    settings: &RenderSettings,
) -> Result<Projection<'t>, RenderError> {
    let shape = points.shape();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(DiffError::ShapeMismatch {
            op: "project_points",
            lhs: shape,
            rhs: vec![0, 3],
        }
        .into());
    }
    let n = shape[0];
    if n == 0 {
        return Err(RenderError::EmptyCloud);
    }
    let cam = transform_to_camera_var(points, azimuth, elevation, settings.distance)?;
    let z = cam.narrow(1, 2, 1)?;
    if let Some((index, &depth)) = z.value().data().iter().enumerate().find(|(_, &d)| d <= 0.0) {
        return Err(RenderError::BehindCamera { index, depth });
    }
    let k = &settings.intrinsics;
    let u = cam.narrow(1, 0, 1)?.div(z)?.mul_scalar(k.focal).add_scalar(k.cx);
    let v = cam.narrow(1, 1, 1)?.div(z)?.mul_scalar(k.focal).add_scalar(k.cy);
    let uv = points.tape().concat(&[u, v], 1)?;
    Ok(Projection {
        uv,
        depth: z.reshape(&[n])?,
    })
}

/// Visits every pixel within the truncation radius of `(u, v)`.
fn for_each_pixel(u: f64, v: f64, settings: &RenderSettings, mut f: impl FnMut(usize, f64, f64, f64)) {
    let r = settings.radius();
    let k = &settings.intrinsics;
    if !(u.is_finite() && v.is_finite()) {
        return;
    }
    let c0 = (u - r).ceil().max(0.0) as i64;
    let c1 = ((u + r).floor() as i64).min(k.width as i64 - 1);
    let r0 = (v - r).ceil().max(0.0) as i64;
    let r1 = ((v + r).floor() as i64).min(k.height as i64 - 1);
    let inv = 1.0 / (2.0 * settings.sigma * settings.sigma);
    for row in r0..=r1 {
        let dv = v - row as f64;
        for col in c0..=c1 {
            let du = u - col as f64;
            let d2 = du * du + dv * dv;
            if d2 <= r * r {
                f(row as usize * k.width + col as usize, du, dv, (-d2 * inv).exp());
            }
        }
    }
}

struct MaskSplat {
    settings: RenderSettings,
    /// Product of the non-zero factors `1 − kᵢ` per pixel.
    product: Vec<f64>,
    /// Number of factors that are exactly zero per pixel.
    zeros: Vec<u32>,
}

impl CustomOp for MaskSplat {
    fn name(&self) -> &'static str {
        "render_mask"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let uv = inputs[0];
        let mut g_uv = Tensor::zeros(uv.shape());
        let inv_s2 = 1.0 / (self.settings.sigma * self.settings.sigma);
        let gd = grad.data();
        for (i, p) in uv.data().chunks(2).enumerate() {
            let (mut gu, mut gv) = (0.0, 0.0);
            for_each_pixel(p[0], p[1], &self.settings, |pix, du, dv, k| {
                let factor = 1.0 - k;
                let others = if factor == 0.0 {
                    if self.zeros[pix] == 1 {
                        self.product[pix]
                    } else {
                        0.0
                    }
                } else if self.zeros[pix] == 0 {
                    self.product[pix] / factor
                } else {
                    0.0
                };
                // dM/dk = others; dk/du = -k du / σ².
                let s = gd[pix] * others * k * inv_s2;
                gu -= s * du;
                gv -= s * dv;
            });
            g_uv.data_mut()[2 * i] = gu;
            g_uv.data_mut()[2 * i + 1] = gv;
        }
        vec![Some(g_uv)]
    }
}

/// Soft silhouette `[H, W]` of projected points `[N, 2]`.
pub fn render_mask<'t>(uv: Var<'t>, settings: &RenderSettings) -> Result<Var<'t>, RenderError> {
    let value = uv.value();
    if value.ndim() != 2 || value.shape()[1] != 2 {
        return Err(DiffError::ShapeMismatch {
            op: "render_mask",
            lhs: value.shape().to_vec(),
            rhs: vec![0, 2],
        }
        .into());
    }
    if value.shape()[0] == 0 {
        return Err(RenderError::EmptyCloud);
    }
    let pixels = settings.pixels();
    let mut product = vec![1.0; pixels];
    let mut zeros = vec![0u32; pixels];
    for p in value.data().chunks(2) {
        for_each_pixel(p[0], p[1], settings, |pix, _, _, k| {
            let factor = 1.0 - k;
            if factor == 0.0 {
                zeros[pix] += 1;
            } else {
                product[pix] *= factor;
            }
        });
    }
    let data: Vec<f64> = product
        .iter()
        .zip(&zeros)
        .map(|(&p, &z)| if z > 0 { 1.0 } else { 1.0 - p })
        .collect();
    let out = Tensor::new(&[settings.intrinsics.height, settings.intrinsics.width], data)?;
    let op = Rc::new(MaskSplat {
        settings: *settings,
        product,
        zeros,
    });
    Ok(uv.tape().custom(op, &[uv], out))
}

struct ColorSplat {
    settings: RenderSettings,
    /// Total blend weight per pixel, background included.
    denominator: Vec<f64>,
}

impl ColorSplat {
    fn depth_weight(&self, depth: f64) -> f64 {
        (-(depth - self.settings.distance) / self.settings.tau_depth).exp()
    }
}

impl CustomOp for ColorSplat {
    fn name(&self) -> &'static str {
        "render_color"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (uv, depth, colors) = (inputs[0], inputs[1], inputs[2]);
        let pixels = self.settings.pixels();
        let mut g_uv = Tensor::zeros(uv.shape());
        let mut g_depth = Tensor::zeros(depth.shape());
        let mut g_col = Tensor::zeros(colors.shape());
        let inv_s2 = 1.0 / (self.settings.sigma * self.settings.sigma);
        let (od, gd) = (out.data(), grad.data());
        for (i, p) in uv.data().chunks(2).enumerate() {
            let dw = self.depth_weight(depth.data()[i]);
            let c = &colors.data()[3 * i..3 * i + 3];
            let (mut gu, mut gv, mut gz) = (0.0, 0.0, 0.0);
            let mut gc = [0.0; 3];
            for_each_pixel(p[0], p[1], &self.settings, |pix, du, dv, k| {
                let w = k * dw;
                let den = self.denominator[pix];
                // dL/dw = Σ_c g_c (c_i,c − C_c) / den
                let mut dl_dw = 0.0;
                for ch in 0..3 {
                    let g = gd[ch * pixels + pix];
                    dl_dw += g * (c[ch] - od[ch * pixels + pix]);
                    gc[ch] += g * w / den;
                }
                dl_dw /= den;
                gu -= dl_dw * w * du * inv_s2;
                gv -= dl_dw * w * dv * inv_s2;
                gz -= dl_dw * w / self.settings.tau_depth;
            });
            g_uv.data_mut()[2 * i] = gu;
            g_uv.data_mut()[2 * i + 1] = gv;
            g_depth.data_mut()[i] = gz;
            g_col.data_mut()[3 * i..3 * i + 3].copy_from_slice(&gc);
        }
        vec![Some(g_uv), Some(g_depth), Some(g_col)]
    }
}

/// Soft z-ordered RGB image `[3, H, W]` from projected points, depths and `[N, 3]` colors.
pub fn render_color<'t>(
    projection: &Projection<'t>,
    colors: Var<'t>,
    settings: &RenderSettings,
) -> Result<Var<'t>, RenderError> {
    let (uv, depth, col) = (projection.uv.value(), projection.depth.value(), colors.value());
    let n = uv.shape()[0];
    if n == 0 {
        return Err(RenderError::EmptyCloud);
    }
    if col.shape() != [n, 3] || depth.shape() != [n] {
        return Err(DiffError::ShapeMismatch {
            op: "render_color",
            lhs: uv.shape().to_vec(),
            rhs: col.shape().to_vec(),
        }
        .into());
    }
    let pixels = settings.pixels();
    let bg_w = settings.background_weight;
    let mut numerator = vec![0.0; 3 * pixels];
    for ch in 0..3 {
        numerator[ch * pixels..(ch + 1) * pixels].fill(bg_w * settings.background[ch]);
    }
    let mut denominator = vec![bg_w; pixels];
    let helper = ColorSplat {
        settings: *settings,
        denominator: Vec::new(),
    };
    for (i, p) in uv.data().chunks(2).enumerate() {
        let dw = helper.depth_weight(depth.data()[i]);
        let c = &col.data()[3 * i..3 * i + 3];
        for_each_pixel(p[0], p[1], settings, |pix, _, _, k| {
            let w = k * dw;
            denominator[pix] += w;
            for ch in 0..3 {
                numerator[ch * pixels + pix] += w * c[ch];
            }
        });
    }
    let data: Vec<f64> = numerator
        .iter()
        .enumerate()
        .map(|(idx, &num)| num / denominator[idx % pixels])
        .collect();
    let out = Tensor::new(&[3, settings.intrinsics.height, settings.intrinsics.width], data)?;
    let op = Rc::new(ColorSplat {
        settings: *settings,
        denominator,
    });
    Ok(colors
        .tape()
        .custom(op, &[projection.uv, projection.depth, colors], out))
}

/// Non-differentiable silhouette of `cloud` from `view`.
pub fn mask_of(cloud: &PointCloud, view: &Viewpoint, settings: &RenderSettings) -> Result<Tensor, RenderError> {
    let tape = Tape::new();
    let proj = project_points(
        tape.constant(cloud.positions_tensor()),
        tape.scalar(view.azimuth),
        tape.scalar(view.elevation),
        &RenderSettings {
            distance: view.distance,
            ..*settings
        },
    )?;
    Ok((*render_mask(proj.uv, settings)?.value()).clone())
}

/// Non-differentiable RGB render of a colored `cloud` from `view`.
pub fn image_of(cloud: &PointCloud, view: &Viewpoint, settings: &RenderSettings) -> Result<Tensor, RenderError> {
    let colors = cloud.colors_tensor().ok_or(RenderError::MissingColors)?;
    let tape = Tape::new();
    let settings = RenderSettings {
        distance: view.distance,
        ..*settings
    };
    let proj = project_points(
        tape.constant(cloud.positions_tensor()),
        tape.scalar(view.azimuth),
        tape.scalar(view.elevation),
        &settings,
    )?;
    Ok((*render_color(&proj, tape.constant(colors), &settings)?.value()).clone())
}

/// Binarizes a soft mask at 0.5.
pub fn threshold(mask: &Tensor) -> Tensor {
    mask.map(|x| if x >= 0.5 { 1.0 } else { 0.0 })
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn iou(a: &Tensor, b: &Tensor) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        if x && y {
            inter += 1.0;
        }
        if x || y {
            union += 1.0;
        }
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// Exact binary silhouette of a sphere of `radius` centered at the origin:
/// the disc of pixel radius `f·tan(asin(radius / distance))` about the principal point.
pub fn sphere_silhouette(radius: f64, s: &RenderSettings) -> Tensor {
    let alpha = (radius / s.distance).asin();
    let r_px = s.intrinsics.focal * alpha.tan();
    let k = &s.intrinsics;
    let mut m = Tensor::zeros(&[k.height, k.width]);
    for row in 0..k.height {
        for col in 0..k.width {
            let d = ((col as f64 - k.cx).powi(2) + (row as f64 - k.cy).powi(2)).sqrt();
            if d <= r_px {
                m.data_mut()[row * k.width + col] = 1.0;
            }
        }
    }
    m
}
