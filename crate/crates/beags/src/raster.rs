//! Forward alpha-blending renderer over sorted ray-splat hits, with a
//! per-pixel boundary penalty channel, and the analytic backward pass to all
//! trainable surfel parameters.
//!
//! Per pixel, hits are sorted front to back by (t, surfel index) and
//! composited with weights `w_i = alpha_i * g_i * T_i`,
//! `T_{i+1} = T_i * (1 - alpha_i * g_i)`. The boundary channel accumulates
//! `w_i` for every surfel whose class disagrees with the supervision mask at
//! that pixel. Both passes are parallel over pixels with fixed reduction
//! order, so results are identical at any thread count.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image2::{ClassImage, ColorImage, Image2, ScalarImage, EMPTY_CLASS};
use crate::surfel::{frame_backward, Frame, GaussianSurfel, Ray};
use crate::{Vec2, Vec3};

/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_FLOOR: f64 = 1e-4;

/// Blend weights at or below this are not recorded as contributions.
pub const CONTRIBUTION_MIN: f64 = 1e-6;

const TILE: u32 = 8;
/// Rows per backward accumulation band. Bands are merged in index order, so
/// gradients do not depend on the thread count.
const GRAD_BAND_ROWS: u32 = 8;

#[derive(Clone, Copy, Debug)]
pub struct Contribution {
    pub surfel: u32,
    pub weight: f64,
}

#[derive(Default)]
pub struct RenderOptions<'a> {
    /// Refined class mask M' driving the boundary-loss channel.
    pub supervision: Option<&'a ClassImage>,
    /// Keep per-pixel (surfel, weight) records for assignment and debugging.
    pub record_contributions: bool,
}

pub struct RenderOutput {
    pub color: ColorImage,
    /// Blended expected splat depth along the ray, world units.
    pub depth: ScalarImage,
    /// Accumulated opacity.
    pub alpha: ScalarImage,
    /// Class id per pixel, or `EMPTY_CLASS` where alpha < 0.5.
    pub semantic: ClassImage,
    /// Per-pixel boundary loss; zero wherever no supervision was supplied.
    pub boundary: ScalarImage,
    pub contributions: Option<Image2<Vec<Contribution>>>,
}

/// Per-surfel gradients, indexed like the input scene.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub center: Vec<Vec3>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vec2>,
    pub color: Vec<Vec3>,
    pub opacity_logit: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        ParamGrads {
            center: vec![Vec3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vec2::zeros(); n],
            color: vec![Vec3::zeros(); n],
            opacity_logit: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logit.is_empty()
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, factor: f64) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.center[i] += factor * other.center[i];
            for k in 0..4 {
                self.rotation[i][k] += factor * other.rotation[i][k];
            }
            self.log_scale[i] += factor * other.log_scale[i];
            self.color[i] += factor * other.color[i];
            self.opacity_logit[i] += factor * other.opacity_logit[i];
        }
    }
}

/// Upstream adjoint images for the backward pass. Channels without an
/// adjoint carry no gradient.
#[derive(Default)]
pub struct Adjoints<'a> {
    pub color: Option<&'a ColorImage>,
    pub boundary: Option<&'a ScalarImage>,
}

struct Prepared {
    center: Vec3,
    rotation: [f64; 4],
    frame: Frame,
    scale: Vec2,
    alpha: f64,
    color: Vec3,
    class: u32,
}

fn prepare(scene: &[GaussianSurfel]) -> (Vec<Prepared>, u32) {
    let mut num_classes = 0;
    let prep = scene
        .iter()
        .map(|g| {
            num_classes = num_classes.max(g.class + 1);
            Prepared {
                center: g.center,
                rotation: g.rotation,
                frame: g.frame(),
                scale: g.scale(),
                alpha: g.opacity(),
                color: g.color,
                class: g.class,
            }
        })
        .collect();
    (prep, num_classes)
}

/// Tile candidate lists plus per-surfel conservative pixel-space boxes, so
/// gather can pre-reject without touching the 3D math.
struct Culling {
    tiles_x: u32,
    lists: Vec<Vec<u32>>,
    /// (x_lo, x_hi, y_lo, y_hi) in padded pixel coordinates; None when the
    /// surfel cannot hit any pixel ray.
    boxes: Vec<Option<[f64; 4]>>,
}

impl Culling {
    #[inline]
    fn candidates(&self, px: u32, py: u32) -> &[u32] {
        &self.lists[((py / TILE) * self.tiles_x + px / TILE) as usize]
    }
}

/// Bounds of n/d over intervals, with d strictly positive.
fn ratio_bounds(n_lo: f64, n_hi: f64, d_lo: f64, d_hi: f64) -> (f64, f64) {
    let lo = if n_lo >= 0.0 { n_lo / d_hi } else { n_lo / d_lo };
    let hi = if n_hi >= 0.0 { n_hi / d_lo } else { n_hi / d_hi };
    (lo, hi)
}

/// Conservative culling: each surfel's 3-sigma disk lies inside a ball
/// around its center, and the ball's projection is interval-bounded. A
/// surfel is listed for every pixel its padded bound covers, so culled
/// rendering is hit-for-hit identical to testing every surfel at every
/// pixel.
fn bin_surfels(prep: &[Prepared], cam: &Camera) -> Culling {
    let tiles_x = (cam.width + TILE - 1) / TILE;
    let tiles_y = (cam.height + TILE - 1) / TILE;
    let mut lists = vec![Vec::new(); (tiles_x * tiles_y) as usize];

    let boxes: Vec<Option<[f64; 4]>> = prep
        .par_iter()
        .map(|p| {
            let xc = cam.to_camera(&p.center);
            let r = 3.0 * p.scale.x.max(p.scale.y) * (1.0 + 1e-9) + 1e-12;
            if xc.z + r <= 0.0 {
                // Entire support behind the camera plane: no pixel ray with
                // t > 0 can reach it.
                return None;
            }
            let (px_lo, px_hi, py_lo, py_hi) = if xc.z - r <= 1e-9 {
                (
                    0.0,
                    cam.width as f64,
                    0.0,
                    cam.height as f64,
                )
            } else {
                let (rx_lo, rx_hi) = ratio_bounds(xc.x - r, xc.x + r, xc.z - r, xc.z + r);
                let (ry_lo, ry_hi) = ratio_bounds(xc.y - r, xc.y + r, xc.z - r, xc.z + r);
                (
                    cam.fx * rx_lo + cam.cx,
                    cam.fx * rx_hi + cam.cx,
                    cam.fy * ry_lo + cam.cy,
                    cam.fy * ry_hi + cam.cy,
                )
            };
            // Pad one pixel against rounding.
            Some([px_lo - 1.0, px_hi + 1.0, py_lo - 1.0, py_hi + 1.0])
        })
        .collect();

    for (i, b) in boxes.iter().enumerate() {
        let Some([x_lo, x_hi, y_lo, y_hi]) = *b else {
            continue;
        };
        if x_hi < 0.0 || y_hi < 0.0 {
            continue;
        }
        let x0 = x_lo.floor().max(0.0) as u32;
        let y0 = y_lo.floor().max(0.0) as u32;
        let x1 = (x_hi.ceil() as i64).min(cam.width as i64 - 1);
        let y1 = (y_hi.ceil() as i64).min(cam.height as i64 - 1);
        if x1 < x0 as i64 || y1 < y0 as i64 || x0 >= cam.width || y0 >= cam.height {
            continue;
        }
        for ty in y0 / TILE..=(y1 as u32) / TILE {
            for tx in x0 / TILE..=(x1 as u32) / TILE {
                lists[(ty * tiles_x + tx) as usize].push(i as u32);
            }
        }
    }
    Culling {
        tiles_x,
        lists,
        boxes,
    }
}

fn pixel_ray(cam: &Camera, x: u32, y: u32) -> Ray {
    cam.generate_ray(Vec2::new(x as f64 + 0.5, y as f64 + 0.5))
}

/// Collects hits for one pixel into `hits` as (t, id, r^2), sorted front to
/// back with ties broken by surfel index. The density is evaluated lazily by
/// the compositing loops, which usually terminate early.
fn gather_hits(
    prep: &[Prepared],
    culling: &Culling,
    x: u32,
    y: u32,
    ray: &Ray,
    hits: &mut Vec<(f64, u32, f64)>,
) {
    hits.clear();
    let (pcx, pcy) = (x as f64 + 0.5, y as f64 + 0.5);
    for &id in culling.candidates(x, y) {
        let Some(b) = &culling.boxes[id as usize] else {
            continue;
        };
        if pcx < b[0] || pcx > b[1] || pcy < b[2] || pcy > b[3] {
            continue;
        }
        let p = &prep[id as usize];
        let denom = ray.dir.dot(&p.frame.normal);
        if denom.abs() < crate::surfel::PARALLEL_EPS {
            continue;
        }
        let t = (p.center - ray.origin).dot(&p.frame.normal) / denom;
        if t <= crate::surfel::NEAR_PLANE {
            continue;
        }
        let delta = ray.point_at(t) - p.center;
        let u = delta.dot(&p.frame.t_u) / p.scale.x;
        let v = delta.dot(&p.frame.t_v) / p.scale.y;
        let r2 = u * u + v * v;
        if r2 > crate::surfel::DENSITY_CUTOFF * crate::surfel::DENSITY_CUTOFF {
            continue;
        }
        hits.push((t, id, r2));
    }
    hits.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
}

struct PixelOut {
    color: Vec3,
    depth: f64,
    alpha: f64,
    semantic: u32,
    boundary: f64,
    records: Vec<Contribution>,
}

/// Forward pass. `supervision`, when given, must match the camera size.
pub fn render(
    scene: &[GaussianSurfel],
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    if let Some(sup) = opts.supervision {
        if sup.width() != cam.width || sup.height() != cam.height {
            return Err(Error::config(format!(
                "supervision mask is {}x{} but the camera renders {}x{}",
                sup.width(),
                sup.height(),
                cam.width,
                cam.height
            )));
        }
    }
    let (prep, num_classes) = prepare(scene);
    let culling = bin_surfels(&prep, cam);
    let (w, h) = (cam.width, cam.height);

    let pixels: Vec<PixelOut> = (0..w * h)
        .into_par_iter()
        .map_init(
            || (Vec::new(), vec![0.0f64; num_classes as usize]),
            |(hits, class_w), idx| {
                let (x, y) = (idx % w, idx / w);
                let ray = pixel_ray(cam, x, y);
                gather_hits(&prep, &culling, x, y, &ray, hits);

                class_w.iter_mut().for_each(|v| *v = 0.0);
                let sup = opts.supervision.map(|s| *s.get(x, y));
                let mut transmittance = 1.0;
                let mut color = Vec3::zeros();
                let mut wsum = 0.0;
                let mut depth_num = 0.0;
                let mut boundary = 0.0;
                let mut records = Vec::new();
                for &(t, id, r2) in hits.iter() {
                    if transmittance < TRANSMITTANCE_FLOOR {
                        break;
                    }
                    let g = (-0.5 * r2).exp();
                    let p = &prep[id as usize];
                    let a = p.alpha * g;
                    let wi = a * transmittance;
                    color += wi * p.color;
                    wsum += wi;
                    depth_num += wi * t;
                    class_w[p.class as usize] += wi;
                    if let Some(m) = sup {
                        if p.class != m {
                            boundary += wi;
                        }
                    }
                    if opts.record_contributions && wi > CONTRIBUTION_MIN {
                        records.push(Contribution {
                            surfel: id,
                            weight: wi,
                        });
                    }
                    transmittance *= 1.0 - a;
                }
                let semantic = if wsum < 0.5 {
                    EMPTY_CLASS
                } else {
                    let mut best = 0u32;
                    let mut best_w = f64::NEG_INFINITY;
                    for (c, &cw) in class_w.iter().enumerate() {
                        if cw > best_w {
                            best_w = cw;
                            best = c as u32;
                        }
                    }
                    best
                };
                PixelOut {
                    color,
                    depth: depth_num / wsum.max(1e-8),
                    alpha: wsum,
                    semantic,
                    boundary,
                    records,
                }
            },
        )
        .collect();

    let mut out = RenderOutput {
        color: ColorImage::black(w, h),
        depth: ScalarImage::zeros(w, h),
        alpha: ScalarImage::zeros(w, h),
        semantic: ClassImage::filled(w, h, EMPTY_CLASS),
        boundary: ScalarImage::zeros(w, h),
        contributions: opts
            .record_contributions
            .then(|| Image2::filled(w, h, Vec::new())),
    };
    for (idx, px) in pixels.into_iter().enumerate() {
        out.color.data_mut()[idx] = px.color;
        out.depth.data_mut()[idx] = px.depth;
        out.alpha.data_mut()[idx] = px.alpha;
        out.semantic.data_mut()[idx] = px.semantic;
        out.boundary.data_mut()[idx] = px.boundary;
        if let Some(recs) = out.contributions.as_mut() {
            recs.data_mut()[idx] = px.records;
        }
    }
    Ok(out)
}

/// Forward pass restricted to surfels of one class. Contribution records, if
/// requested, index the filtered list.
pub fn render_class_subset(
    scene: &[GaussianSurfel],
    cam: &Camera,
    class: u32,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    let subset: Vec<GaussianSurfel> = scene
        .iter()
        .filter(|g| g.class == class)
        .cloned()
        .collect();
    render(&subset, cam, opts)
}

/// Analytic gradients of the color and boundary channels with respect to all
/// trainable parameters, chained through the transmittance product. Depth,
/// semantic and alpha channels carry no gradient.
pub fn backward(
    scene: &[GaussianSurfel],
    cam: &Camera,
    supervision: Option<&ClassImage>,
    adjoints: &Adjoints,
) -> Result<ParamGrads> {
    let (w, h) = (cam.width, cam.height);
    if let Some(img) = adjoints.color {
        if img.width() != w || img.height() != h {
            return Err(Error::config("color adjoint does not match camera size"));
        }
    }
    if let Some(img) = adjoints.boundary {
        if img.width() != w || img.height() != h {
            return Err(Error::config("boundary adjoint does not match camera size"));
        }
        if supervision.is_none() {
            return Err(Error::config(
                "boundary adjoint supplied without a supervision mask",
            ));
        }
    }
    if let Some(sup) = supervision {
        if sup.width() != w || sup.height() != h {
            return Err(Error::config("supervision mask does not match camera size"));
        }
    }

    let (prep, _) = prepare(scene);
    let culling = bin_surfels(&prep, cam);
    let n = scene.len();
    let bands = (h + GRAD_BAND_ROWS - 1) / GRAD_BAND_ROWS;

    let partials: Vec<ParamGrads> = (0..bands)
        .into_par_iter()
        .map(|band| {
            let mut grads = ParamGrads::zeros(n);
            let mut hits: Vec<(f64, u32, f64)> = Vec::new();
            let mut stack: Vec<HitState> = Vec::new();
            let y0 = band * GRAD_BAND_ROWS;
            let y1 = (y0 + GRAD_BAND_ROWS).min(h);
            for y in y0..y1 {
                for x in 0..w {
                    let adj_color = adjoints
                        .color
                        .map(|img| *img.get(x, y))
                        .unwrap_or_else(Vec3::zeros);
                    let adj_boundary =
                        adjoints.boundary.map(|img| *img.get(x, y)).unwrap_or(0.0);
                    if adj_color == Vec3::zeros() && adj_boundary == 0.0 {
                        continue;
                    }
                    let sup = supervision.map(|s| *s.get(x, y));
                    let ray = pixel_ray(cam, x, y);
                    gather_hits(&prep, &culling, x, y, &ray, &mut hits);
                    backward_pixel(
                        &prep, &ray, sup, adj_color, adj_boundary, &hits, &mut stack, &mut grads,
                    );
                }
            }
            grads
        })
        .collect();

    let mut total = ParamGrads::zeros(n);
    for part in &partials {
        total.add_scaled(part, 1.0);
    }
    Ok(total)
}

struct HitState {
    id: u32,
    t: f64,
    g: f64,
    a: f64,
    w: f64,
    trans_before: f64,
    payload: f64,
}

/// Replays the forward compositing of one pixel over pre-gathered, sorted
/// hits and pulls the combined color/boundary payload adjoint back to the
/// surfel parameters. Returns the pixel's composited color and boundary
/// values (the exact forward results).
#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    prep: &[Prepared],
    ray: &Ray,
    sup: Option<u32>,
    adj_color: Vec3,
    adj_boundary: f64,
    hits: &[(f64, u32, f64)],
    stack: &mut Vec<HitState>,
    grads: &mut ParamGrads,
) -> (Vec3, f64) {
    stack.clear();
    let mut color = Vec3::zeros();
    let mut boundary = 0.0;
    let mut transmittance = 1.0;
    for &(t, id, r2) in hits.iter() {
        if transmittance < TRANSMITTANCE_FLOOR {
            break;
        }
        let g = (-0.5 * r2).exp();
        let p = &prep[id as usize];
        let a = p.alpha * g;
        let w = a * transmittance;
        color += w * p.color;
        let mismatch = matches!(sup, Some(m) if p.class != m);
        if mismatch {
            boundary += w;
        }
        let payload = adj_color.dot(&p.color) + if mismatch { adj_boundary } else { 0.0 };
        stack.push(HitState {
            id,
            t,
            g,
            a,
            w,
            trans_before: transmittance,
            payload,
        });
        transmittance *= 1.0 - a;
    }

    // d(pixel)/d(a_i) = T_i * payload_i - S_i / (1 - a_i), with S_i the
    // composited payload behind hit i; each surfel occludes everything
    // after it.
    let mut suffix = 0.0;
    for hs in stack.iter().rev() {
        let d_a = hs.trans_before * hs.payload - suffix / (1.0 - hs.a);
        suffix += hs.w * hs.payload;

        let id = hs.id as usize;
        let p = &prep[id];
        grads.color[id] += hs.w * adj_color;

        let d_alpha = d_a * hs.g;
        grads.opacity_logit[id] += d_alpha * p.alpha * (1.0 - p.alpha);

        let d_g = d_a * p.alpha;
        if d_g == 0.0 {
            continue;
        }
        let dir = ray.dir;
        let delta = ray.point_at(hs.t) - p.center;
        let uv = Vec2::new(
            delta.dot(&p.frame.t_u) / p.scale.x,
            delta.dot(&p.frame.t_v) / p.scale.y,
        );
        let d_u = -hs.g * uv.x * d_g;
        let d_v = -hs.g * uv.y * d_g;
        if d_u == 0.0 && d_v == 0.0 {
            continue;
        }
        let dn = dir.dot(&p.frame.normal);
        let d_dot_tu = dir.dot(&p.frame.t_u);
        let d_dot_tv = dir.dot(&p.frame.t_v);

        grads.center[id] += d_u * ((d_dot_tu / dn) * p.frame.normal - p.frame.t_u) / p.scale.x
            + d_v * ((d_dot_tv / dn) * p.frame.normal - p.frame.t_v) / p.scale.y;
        grads.log_scale[id].x += -uv.x * d_u;
        grads.log_scale[id].y += -uv.y * d_v;

        let d_tu = (d_u / p.scale.x) * delta;
        let d_tv = (d_v / p.scale.y) * delta;
        let d_n = -((d_u * d_dot_tu / p.scale.x) + (d_v * d_dot_tv / p.scale.y)) / dn * delta;
        let dq = frame_backward(&p.rotation, d_tu, d_tv, d_n);
        for k in 0..4 {
            grads.rotation[id][k] += dq[k];
        }
    }
    (color, boundary)
}

/// Fused single-pass evaluation of the photometric L1 term and the boundary
/// term with their gradients: hits are gathered once per pixel and the
/// adjoints (sign(diff)/(HW*3) for color, lambda_bound/(HW) for boundary)
/// are formed locally. Produces exactly the same gradients as `backward`
/// driven by `rgb_loss` adjoints.
pub struct FusedLoss {
    pub rgb: f64,
    pub bound: f64,
    pub grads: ParamGrads,
}

pub fn rgb_boundary_loss_grads(
    scene: &[GaussianSurfel],
    cam: &Camera,
    gt: &ColorImage,
    supervision: Option<&ClassImage>,
    lambda_bound: f64,
) -> Result<FusedLoss> {
    let (w, h) = (cam.width, cam.height);
    if gt.width() != w || gt.height() != h {
        return Err(Error::config("ground-truth image does not match camera size"));
    }
    if let Some(sup) = supervision {
        if sup.width() != w || sup.height() != h {
            return Err(Error::config("supervision mask does not match camera size"));
        }
    }
    let (prep, _) = prepare(scene);
    let culling = bin_surfels(&prep, cam);
    let n = scene.len();
    let bands = (h + GRAD_BAND_ROWS - 1) / GRAD_BAND_ROWS;
    let color_norm = 1.0 / (w as f64 * h as f64 * 3.0);
    let pixel_norm = 1.0 / (w as f64 * h as f64);
    let adj_boundary = lambda_bound * pixel_norm;

    struct BandOut {
        rgb: f64,
        bound: f64,
        grads: ParamGrads,
    }
    let partials: Vec<BandOut> = (0..bands)
        .into_par_iter()
        .map(|band| {
            let mut grads = ParamGrads::zeros(n);
            let mut hits: Vec<(f64, u32, f64)> = Vec::new();
            let mut stack: Vec<HitState> = Vec::new();
            let mut rgb = 0.0;
            let mut bound = 0.0;
            let y0 = band * GRAD_BAND_ROWS;
            let y1 = (y0 + GRAD_BAND_ROWS).min(h);
            for y in y0..y1 {
                for x in 0..w {
                    let sup = supervision.map(|s| *s.get(x, y));
                    // First compositing pass to know the color residual sign.
                    let ray = pixel_ray(cam, x, y);
                    gather_hits(&prep, &culling, x, y, &ray, &mut hits);
                    let mut color = Vec3::zeros();
                    let mut transmittance = 1.0;
                    for &(_t, id, r2) in hits.iter() {
                        if transmittance < TRANSMITTANCE_FLOOR {
                            break;
                        }
                        let g = (-0.5 * r2).exp();
                        let p = &prep[id as usize];
                        let a = p.alpha * g;
                        color += a * transmittance * p.color;
                        transmittance *= 1.0 - a;
                    }
                    let diff = color - gt.get(x, y);
                    rgb += (diff.x.abs() + diff.y.abs() + diff.z.abs()) * color_norm;
                    let sgn = |v: f64| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    };
                    let adj_color =
                        Vec3::new(sgn(diff.x), sgn(diff.y), sgn(diff.z)) * color_norm;
                    let ab = if sup.is_some() { adj_boundary } else { 0.0 };
                    let (_, boundary) = backward_pixel(
                        &prep, &ray, sup, adj_color, ab, &hits, &mut stack, &mut grads,
                    );
                    bound += boundary * pixel_norm;
                }
            }
            BandOut { rgb, bound, grads }
        })
        .collect();

    let mut grads = ParamGrads::zeros(n);
    let mut rgb = 0.0;
    let mut bound = 0.0;
    for part in &partials {
        rgb += part.rgb;
        bound += part.bound;
        grads.add_scaled(&part.grads, 1.0);
    }
    Ok(FusedLoss { rgb, bound, grads })
}
