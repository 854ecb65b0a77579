//! Deterministic synthetic benchmark factory: oracle-labeled surfel scenes
//! with planted hidden geometry, orbit cameras, ground-truth masks, and
//! controlled mask corruption.
//!
//! Objects are tiled with three stacked surfel shells so that interiors are
//! fully extinguished by the transmittance floor; spikes planted beneath the
//! ground plane therefore receive exactly zero blend weight in every
//! training view. The init-scene perturbation additionally rotates a few
//! host-class surfels into vertical fins whose heads stay on the visible
//! surface while their tails dive below the plane, and tilts a few box-side
//! surfels into skirts that straddle the box/ground boundary. Those are the
//! artifacts the boundary and occupancy terms are asked to remove.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image2::{BoolImage, ClassImage, EMPTY_CLASS};
use crate::raster::{render, RenderOptions};
use crate::surfel::{logit, GaussianSurfel};
use crate::{Vec2, Vec3};

/// Stacked surfel shells as (inward offset in world units, lateral tiling
/// phase in cells). The half-cell phase of the second shell puts its disk
/// centers under the first shell's coverage minima, which drives the
/// worst-ray transmittance below the compositing floor before any hidden
/// geometry is reached.
const SHELLS: [(f64, f64); 2] = [(0.0, 0.0), (0.06, 0.5)];
/// Surfel sigma as a multiple of the tiling spacing.
const SIGMA_PER_SPACING: f64 = 0.75;
const SURFACE_OPACITY: f64 = 0.99;
const SPIKE_OPACITY: f64 = 0.98;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Sphere,
    Box,
    Plane,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub primitive: Primitive,
    pub center: [f64; 3],
    /// Sphere: radius in `size[0]`. Box: full extents. Plane: x/y extents.
    pub size: [f64; 3],
    pub class: u32,
    /// Total surfel budget over all shells.
    pub surfels: usize,
    pub color: [f64; 3],
}

/// Init-scene degradation: jitter plus planted hidden tails and boundary
/// skirts.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbSpec {
    /// Center jitter as a fraction of each surfel's sigma.
    pub jitter_position: f64,
    pub jitter_log_scale: f64,
    pub jitter_rotation: f64,
    pub jitter_color: f64,
    pub jitter_opacity: f64,
    /// Vertical fins with visible heads and below-plane tails.
    pub tail_count: usize,
    /// Full vertical span of a fin (6 sigma), world units.
    pub tail_depth: f64,
    /// Box-side surfels tilted into skirts straddling the ground boundary.
    pub straddler_count: usize,
    pub straddler_scale: f64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        PerturbSpec {
            jitter_position: 0.35,
            jitter_log_scale: 0.15,
            jitter_rotation: 0.10,
            jitter_color: 0.05,
            jitter_opacity: 0.3,
            tail_count: 14,
            tail_depth: 1.2,
            straddler_count: 10,
            straddler_scale: 2.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub radius: f64,
    pub elevation_deg: f64,
    pub train_views: usize,
    pub test_views: usize,
    pub target: [f64; 3],
    pub hfov_deg: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub spike_count: usize,
    /// Vertical span of a planted spike below the ground plane.
    pub spike_depth: f64,
    pub orbit: OrbitSpec,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    #[serde(default)]
    pub perturb: PerturbSpec,
}

/// True per-surfel labels and spike flags, aligned with the oracle scene
/// (and with any scene perturbed from it, which preserves indices).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleTable {
    pub classes: Vec<u32>,
    pub spike: Vec<bool>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.iter().all(|o| o.surfels == 0) {
            return Err(Error::config("scene spec has no surfels"));
        }
        if self.orbit.train_views < 3 {
            return Err(Error::config("need at least 3 training views"));
        }
        let mut classes: Vec<u32> = self.objects.iter().map(|o| o.class).collect();
        classes.sort_unstable();
        classes.dedup();
        for (i, c) in classes.iter().enumerate() {
            if *c != i as u32 + 1 {
                return Err(Error::config(
                    "object class ids must be contiguous starting at 1 (0 is background)",
                ));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> u32 {
        self.objects.iter().map(|o| o.class).max().unwrap_or(0) + 1
    }
}

/// The shipping benchmark: ground plane, sphere and box resting on it, plus
/// hidden spikes below the plane.
pub fn default_benchmark(seed: u64) -> SceneSpec {
    SceneSpec {
        objects: vec![
            ObjectSpec {
                primitive: Primitive::Plane,
                center: [0.0, 0.0, 0.0],
                size: [6.0, 6.0, 0.0],
                class: 1,
                surfels: 972,
                color: [0.62, 0.60, 0.58],
            },
            ObjectSpec {
                primitive: Primitive::Sphere,
                center: [-0.9, 0.5, 0.8],
                size: [0.8, 0.0, 0.0],
                class: 2,
                surfels: 420,
                color: [0.75, 0.30, 0.25],
            },
            ObjectSpec {
                primitive: Primitive::Box,
                center: [0.9, -0.4, 0.5],
                size: [1.0, 1.0, 1.0],
                class: 3,
                surfels: 420,
                color: [0.55, 0.56, 0.60],
            },
        ],
        spike_count: 20,
        spike_depth: 1.5,
        orbit: OrbitSpec {
            radius: 7.0,
            elevation_deg: 35.0,
            train_views: 24,
            test_views: 6,
            target: [0.0, 0.0, 0.4],
            hfov_deg: 55.0,
        },
        width: 128,
        height: 128,
        seed,
        perturb: PerturbSpec::default(),
    }
}

fn quat_from_frame(t_u: Vec3, t_v: Vec3, n: Vec3) -> [f64; 4] {
    let m = Matrix3::from_columns(&[t_u, t_v, n]);
    let q = nalgebra::UnitQuaternion::from_matrix(&m);
    [q.w, q.i, q.j, q.k]
}

fn tangent_basis(normal: Vec3) -> (Vec3, Vec3) {
    let helper = if normal.z.abs() < 0.9 {
        Vec3::z()
    } else {
        Vec3::x()
    };
    let t_u = helper.cross(&normal).normalize();
    let t_v = normal.cross(&t_u);
    (t_u, t_v)
}

fn jittered_color(base: [f64; 3], rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(
        (base[0] + rng.gen_range(-0.08..0.08)).clamp(0.03, 0.97),
        (base[1] + rng.gen_range(-0.08..0.08)).clamp(0.03, 0.97),
        (base[2] + rng.gen_range(-0.08..0.08)).clamp(0.03, 0.97),
    )
}

fn surface_surfel(
    point: Vec3,
    normal: Vec3,
    sigma: f64,
    obj: &ObjectSpec,
    rng: &mut ChaCha8Rng,
) -> GaussianSurfel {
    let (t_u, t_v) = tangent_basis(normal);
    // Random in-plane spin breaks tiling artifacts.
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let (c, s) = (phi.cos(), phi.sin());
    let ru = c * t_u + s * t_v;
    let rv = -s * t_u + c * t_v;
    GaussianSurfel {
        center: point,
        rotation: quat_from_frame(ru, rv, normal),
        log_scale: Vec2::new(sigma.ln(), sigma.ln()),
        color: jittered_color(obj.color, rng),
        opacity_logit: logit(SURFACE_OPACITY),
        class: obj.class,
    }
}

fn tile_sphere(obj: &ObjectSpec, out: &mut Vec<GaussianSurfel>, rng: &mut ChaCha8Rng) {
    let radius = obj.size[0];
    let center = Vec3::from(obj.center);
    let per_layer = (obj.surfels / SHELL_OFFSETS.len()).max(1);
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    for offset in SHELL_OFFSETS {
        let r = radius - offset;
        let spacing = (4.0 * std::f64::consts::PI * r * r / per_layer as f64).sqrt();
        let sigma = SIGMA_PER_SPACING * spacing;
        for i in 0..per_layer {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / per_layer as f64;
            let ring = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let n = Vec3::new(ring * phi.cos(), ring * phi.sin(), z);
            out.push(surface_surfel(center + r * n, n, sigma, obj, rng));
        }
    }
}

fn tile_plane(obj: &ObjectSpec, out: &mut Vec<GaussianSurfel>, rng: &mut ChaCha8Rng) {
    let (sx, sy) = (obj.size[0], obj.size[1]);
    let center = Vec3::from(obj.center);
    let per_layer = (obj.surfels / SHELL_OFFSETS.len()).max(1);
    let nx = ((sx / sy * per_layer as f64).sqrt().round() as usize).max(1);
    let ny = (per_layer / nx).max(1);
    let spacing = (sx / nx as f64).max(sy / ny as f64);
    let sigma = SIGMA_PER_SPACING * spacing;
    for offset in SHELL_OFFSETS {
        for iy in 0..ny {
            for ix in 0..nx {
                let p = center
                    + Vec3::new(
                        (ix as f64 + 0.5) / nx as f64 * sx - sx / 2.0,
                        (iy as f64 + 0.5) / ny as f64 * sy - sy / 2.0,
                        -offset,
                    );
                out.push(surface_surfel(p, Vec3::z(), sigma, obj, rng));
            }
        }
    }
}

fn tile_box(obj: &ObjectSpec, out: &mut Vec<GaussianSurfel>, rng: &mut ChaCha8Rng) {
    let half = Vec3::new(obj.size[0] / 2.0, obj.size[1] / 2.0, obj.size[2] / 2.0);
    let center = Vec3::from(obj.center);
    let per_layer = (obj.surfels / SHELL_OFFSETS.len()).max(1);
    let faces: [(Vec3, Vec3, Vec3); 6] = [
        (Vec3::x(), Vec3::y(), Vec3::z()),
        (-Vec3::x(), Vec3::y(), Vec3::z()),
        (Vec3::y(), Vec3::x(), Vec3::z()),
        (-Vec3::y(), Vec3::x(), Vec3::z()),
        (Vec3::z(), Vec3::x(), Vec3::y()),
        (-Vec3::z(), Vec3::x(), Vec3::y()),
    ];
    let total_area: f64 = faces
        .iter()
        .map(|(n, a, b)| 4.0 * half.dot(&a.abs()) * half.dot(&b.abs()) * n.norm())
        .sum();
    for offset in SHELL_OFFSETS {
        for (n, a_axis, b_axis) in faces {
            let ea = half.dot(&a_axis.abs()) * 2.0;
            let eb = half.dot(&b_axis.abs()) * 2.0;
            let count = (per_layer as f64 * ea * eb / total_area).round().max(1.0) as usize;
            let na = ((ea / eb * count as f64).sqrt().round() as usize).max(1);
            let nb = (count / na).max(1);
            let spacing = (ea / na as f64).max(eb / nb as f64);
            let sigma = SIGMA_PER_SPACING * spacing;
            let face_center = center + n.component_mul(&half) - n * offset;
            for ia in 0..na {
                for ib in 0..nb {
                    let p = face_center
                        + a_axis * ((ia as f64 + 0.5) / na as f64 * ea - ea / 2.0)
                        + b_axis * ((ib as f64 + 0.5) / nb as f64 * eb - eb / 2.0);
                    out.push(surface_surfel(p, n, sigma, obj, rng));
                }
            }
        }
    }
}

/// A vertical, thin surfel spanning `[top - depth, top]` in z.
fn vertical_fin(
    xy: Vec2,
    top: f64,
    depth: f64,
    sigma_v: f64,
    color: Vec3,
    opacity: f64,
    class: u32,
    rng: &mut ChaCha8Rng,
) -> GaussianSurfel {
    let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
    let t_u = Vec3::z();
    let t_v = Vec3::new(azimuth.cos(), azimuth.sin(), 0.0);
    let n = t_u.cross(&t_v);
    let sigma_u = depth / 6.0;
    GaussianSurfel {
        center: Vec3::new(xy.x, xy.y, top - depth / 2.0),
        rotation: quat_from_frame(t_u, t_v, n),
        log_scale: Vec2::new(sigma_u.ln(), sigma_v.ln()),
        color,
        opacity_logit: logit(opacity),
        class,
    }
}

/// Oracle scene: tiled shells plus fully-hidden spikes below the ground
/// plane, each carrying its host object's class.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Vec<GaussianSurfel>, OracleTable)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scene = Vec::new();
    for obj in &spec.objects {
        match obj.primitive {
            Primitive::Sphere => tile_sphere(obj, &mut scene, &mut rng),
            Primitive::Box => tile_box(obj, &mut scene, &mut rng),
            Primitive::Plane => tile_plane(obj, &mut scene, &mut rng),
        }
    }
    let mut spike = vec![false; scene.len()];

    let hosts: Vec<&ObjectSpec> = spec
        .objects
        .iter()
        .filter(|o| o.primitive != Primitive::Plane)
        .collect();
    if !hosts.is_empty() {
        for i in 0..spec.spike_count {
            let host = hosts[i % hosts.len()];
            let lateral = match host.primitive {
                Primitive::Sphere => host.size[0],
                _ => host.size[0] / 2.0,
            } * 0.5;
            let xy = Vec2::new(
                host.center[0] + rng.gen_range(-lateral..lateral),
                host.center[1] + rng.gen_range(-lateral..lateral),
            );
            // Topmost extent stays well below the plane; the plane's shells
            // extinguish every ray before it can reach them.
            let top = -0.15 * spec.spike_depth - rng.gen_range(0.0..0.05);
            let fin = vertical_fin(
                xy,
                top,
                spec.spike_depth,
                spec.spike_depth / 30.0 + rng.gen_range(0.0..0.01),
                Vec3::from(host.color),
                SPIKE_OPACITY,
                host.class,
                &mut rng,
            );
            scene.push(fin);
            spike.push(true);
        }
    }

    let classes = scene.iter().map(|g| g.class).collect();
    Ok((scene, OracleTable { classes, spike }))
}

/// Degraded training init: jitters every non-spike surfel and converts a few
/// of them into hidden-tail fins and boundary skirts. Surfel indices are
/// preserved, so the oracle table still lines up.
pub fn perturb_scene(
    oracle: &[GaussianSurfel],
    table: &OracleTable,
    spec: &SceneSpec,
) -> Vec<GaussianSurfel> {
    let p = &spec.perturb;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7065_7274);
    let mut scene: Vec<GaussianSurfel> = oracle.to_vec();

    for (i, g) in scene.iter_mut().enumerate() {
        if table.spike[i] {
            continue;
        }
        let sigma = g.scale().x.max(g.scale().y);
        for k in 0..3 {
            g.center[k] += rng.gen_range(-1.0..1.0) * p.jitter_position * sigma;
        }
        g.log_scale.x += rng.gen_range(-1.0..1.0) * p.jitter_log_scale;
        g.log_scale.y += rng.gen_range(-1.0..1.0) * p.jitter_log_scale;
        let axis = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if axis.norm() > 1e-6 {
            let angle = rng.gen_range(-1.0..1.0) * p.jitter_rotation;
            let dq = nalgebra::UnitQuaternion::from_axis_angle(
                &nalgebra::Unit::new_normalize(axis),
                angle,
            );
            let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                g.rotation[0],
                g.rotation[1],
                g.rotation[2],
                g.rotation[3],
            ));
            let r = dq * q;
            g.rotation = [r.w, r.i, r.j, r.k];
        }
        for k in 0..3 {
            g.color[k] = (g.color[k] + rng.gen_range(-1.0..1.0) * p.jitter_color).clamp(0.0, 1.0);
        }
        g.opacity_logit += rng.gen_range(-1.0..1.0) * p.jitter_opacity;
    }

    // Hidden tails: low-band surfels of every object become vertical fins
    // whose heads stay at the surface while the tails dive below the plane.
    let mut candidates: Vec<usize> = (0..scene.len())
        .filter(|&i| !table.spike[i] && oracle[i].center.z > 0.02 && oracle[i].center.z < 0.45)
        .collect();
    candidates.sort_by(|&a, &b| {
        oracle[a]
            .center
            .z
            .partial_cmp(&oracle[b].center.z)
            .unwrap()
            .then(a.cmp(&b))
    });
    // Deterministic spread: take every stride-th candidate.
    let stride = (candidates.len() / p.tail_count.max(1)).max(1);
    let tail_ids: Vec<usize> = candidates.iter().step_by(stride).take(p.tail_count).copied().collect();
    for &i in &tail_ids {
        let anchor = oracle[i].center;
        let sigma_v = oracle[i].scale().y * 0.4;
        let color = oracle[i].color;
        let class_color = color;
        let fin = vertical_fin(
            Vec2::new(anchor.x, anchor.y),
            anchor.z + 0.05,
            p.tail_depth,
            sigma_v.max(0.02),
            class_color,
            SURFACE_OPACITY,
            oracle[i].class,
            &mut rng,
        );
        scene[i] = fin;
    }

    // Skirts: box-side surfels near the ground tilt outward-down so they
    // straddle the object/ground boundary in image space.
    let mut side_candidates: Vec<usize> = (0..scene.len())
        .filter(|&i| {
            if table.spike[i] || tail_ids.contains(&i) {
                return false;
            }
            let g = &oracle[i];
            let n = g.frame().normal;
            g.center.z > 0.03 && g.center.z < 0.30 && n.z.abs() < 0.3 && g.class >= 2
        })
        .collect();
    side_candidates.sort_unstable();
    let stride = (side_candidates.len() / p.straddler_count.max(1)).max(1);
    for &i in side_candidates.iter().step_by(stride).take(p.straddler_count) {
        let g = &oracle[i];
        let outward = {
            let n = g.frame().normal;
            Vec3::new(n.x, n.y, 0.0).normalize()
        };
        // Disk plane spans the downward-outward direction and the horizontal
        // face tangent.
        let t_u = (outward - 0.9 * Vec3::z()).normalize();
        let t_v = outward.cross(&Vec3::z()).normalize();
        let n = t_u.cross(&t_v);
        let sigma_u = g.scale().x * p.straddler_scale;
        let sigma_v = g.scale().y * 1.1;
        scene[i] = GaussianSurfel {
            center: g.center + t_u * sigma_u,
            rotation: quat_from_frame(t_u, t_v, n),
            log_scale: Vec2::new(sigma_u.ln(), sigma_v.ln()),
            color: g.color,
            opacity_logit: g.opacity_logit,
            class: g.class,
        };
    }

    for g in scene.iter_mut() {
        g.normalize_rotation();
        g.class = 0;
    }
    scene
}

/// Training/test orbit rings. Test azimuths interleave the training ones.
pub fn orbit_cameras(spec: &SceneSpec) -> (Vec<Camera>, Vec<Camera>) {
    let orbit = &spec.orbit;
    let target = Vec3::from(orbit.target);
    let elev = orbit.elevation_deg.to_radians();
    let mk = |azimuth: f64| {
        let eye = Vec3::new(
            orbit.radius * elev.cos() * azimuth.cos(),
            orbit.radius * elev.cos() * azimuth.sin(),
            orbit.radius * elev.sin(),
        );
        Camera::look_at(eye, target, Vec3::z(), orbit.hfov_deg, spec.width, spec.height)
    };
    let train: Vec<Camera> = (0..orbit.train_views)
        .map(|i| mk(std::f64::consts::TAU * i as f64 / orbit.train_views as f64))
        .collect();
    let test: Vec<Camera> = (0..orbit.test_views)
        .map(|i| {
            mk(std::f64::consts::TAU * (i as f64 + 0.37) / orbit.test_views as f64)
        })
        .collect();
    (train, test)
}

/// Rendered ground truth (semantic channel under oracle labels, background 0)
/// and extracted ground truth (occlusion-free per-class silhouettes with
/// spikes excluded).
pub struct GtRenders {
    pub rendered: Vec<ClassImage>,
    /// extracted[class-1][view]
    pub extracted: Vec<Vec<BoolImage>>,
}

pub fn render_gt_masks(
    oracle: &[GaussianSurfel],
    table: &OracleTable,
    cams: &[Camera],
    num_classes: u32,
    alpha_threshold: f64,
) -> Result<GtRenders> {
    let mut rendered: Vec<ClassImage> = Vec::new();
    for cam in cams {
        let out = render(oracle, cam, &RenderOptions::default())?;
        rendered.push(out.semantic.map(|&c| if c == EMPTY_CLASS { 0 } else { c }));
    }
    let mut extracted = Vec::new();
    for class in 1..num_classes {
        let subset: Vec<GaussianSurfel> = oracle
            .iter()
            .zip(&table.spike)
            .filter(|(g, &is_spike)| g.class == class && !is_spike)
            .map(|(g, _)| g.clone())
            .collect();
        let mut views = Vec::new();
        for cam in cams {
            let out = render(&subset, cam, &RenderOptions::default())?;
            views.push(out.alpha.map(|&a| a >= alpha_threshold));
        }
        extracted.push(views);
    }
    // Boundary hygiene: a semantic pixel not confirmed by its own class's
    // solo silhouette (knife-edge blends at silhouette crossings) falls back
    // to background, keeping rendered gt a subset of extracted gt.
    for (v, mask) in rendered.iter_mut().enumerate() {
        for idx in 0..mask.data().len() {
            let c = mask.data()[idx];
            if c >= 1 && !extracted[(c - 1) as usize][v].data()[idx] {
                mask.data_mut()[idx] = 0;
            }
        }
    }
    Ok(GtRenders {
        rendered,
        extracted,
    })
}

/// Flips a fraction of boundary-adjacent pixels (Chebyshev distance <= 3
/// from a class edge) in a seeded random half of the views. Flipped pixels
/// take the most frequent different label in their 9x9 neighborhood.
pub fn corrupt_masks(masks: &[ClassImage], fraction: f64, seed: u64) -> Result<Vec<ClassImage>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config("corruption fraction must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut view_ids: Vec<usize> = (0..masks.len()).collect();
    use rand::seq::SliceRandom;
    view_ids.shuffle(&mut rng);
    view_ids.truncate(masks.len() / 2);
    view_ids.sort_unstable();

    let mut out = masks.to_vec();
    for &v in &view_ids {
        let mask = &masks[v];
        let (w, h) = (mask.width(), mask.height());
        // Edge pixels: any 4-neighbor differs.
        let mut near_edge = vec![false; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let c = *mask.get(x, y);
                let edge = (x > 0 && *mask.get(x - 1, y) != c)
                    || (x + 1 < w && *mask.get(x + 1, y) != c)
                    || (y > 0 && *mask.get(x, y - 1) != c)
                    || (y + 1 < h && *mask.get(x, y + 1) != c);
                if edge {
                    for dy in -3i64..=3 {
                        for dx in -3i64..=3 {
                            let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                            if xx >= 0 && yy >= 0 && (xx as u32) < w && (yy as u32) < h {
                                near_edge[(yy as u32 * w + xx as u32) as usize] = true;
                            }
                        }
                    }
                }
            }
        }
        let mut pixels: Vec<(u32, u32)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| near_edge[(y * w + x) as usize])
            .collect();
        pixels.shuffle(&mut rng);
        let flip_count = (fraction * pixels.len() as f64).round() as usize;
        for &(x, y) in pixels.iter().take(flip_count) {
            let current = *mask.get(x, y);
            // Most frequent different label within radius 4.
            let mut counts: std::collections::BTreeMap<u32, u32> = Default::default();
            for dy in -4i64..=4 {
                for dx in -4i64..=4 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx >= 0 && yy >= 0 && (xx as u32) < w && (yy as u32) < h {
                        let label = *mask.get(xx as u32, yy as u32);
                        if label != current {
                            *counts.entry(label).or_insert(0) += 1;
                        }
                    }
                }
            }
            if let Some((&label, _)) = counts.iter().max_by_key(|(l, c)| (**c, std::cmp::Reverse(**l))) {
                out[v].set(x, y, label);
            }
        }
    }
    Ok(out)
}

/// Everything `gen` produces, bundled for in-process use.
pub struct Benchmark {
    pub spec: SceneSpec,
    pub oracle_scene: Vec<GaussianSurfel>,
    pub init_scene: Vec<GaussianSurfel>,
    pub table: OracleTable,
    pub train_cams: Vec<Camera>,
    pub test_cams: Vec<Camera>,
    /// Clean input masks for training views (rendered oracle semantics).
    pub train_masks: Vec<ClassImage>,
    /// Ground truth for evaluation on test views.
    pub gt_test: GtRenders,
    /// Oracle rendered masks of the training views, for reprojection tests.
    pub gt_train: GtRenders,
}

pub fn build_benchmark(spec: &SceneSpec, alpha_threshold: f64) -> Result<Benchmark> {
    let (oracle_scene, table) = generate_scene(spec)?;
    let init_scene = perturb_scene(&oracle_scene, &table, spec);
    let (train_cams, test_cams) = orbit_cameras(spec);
    let l = spec.num_classes();
    let gt_train = render_gt_masks(&oracle_scene, &table, &train_cams, l, alpha_threshold)?;
    let gt_test = render_gt_masks(&oracle_scene, &table, &test_cams, l, alpha_threshold)?;
    Ok(Benchmark {
        spec: spec.clone(),
        train_masks: gt_train.rendered.clone(),
        oracle_scene,
        init_scene,
        table,
        train_cams,
        test_cams,
        gt_test,
        gt_train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::CONTRIBUTION_MIN;

    fn small_spec() -> SceneSpec {
        let mut spec = default_benchmark(7);
        spec.objects[0].surfels = 300;
        spec.objects[1].surfels = 150;
        spec.objects[2].surfels = 150;
        spec.spike_count = 6;
        spec.orbit.train_views = 6;
        spec.orbit.test_views = 2;
        spec.width = 64;
        spec.height = 64;
        spec
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let (a, ta) = generate_scene(&spec).unwrap();
        let (b, tb) = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.classes, tb.classes);
        let ia = perturb_scene(&a, &ta, &spec);
        let ib = perturb_scene(&b, &tb, &spec);
        assert_eq!(ia, ib);
    }

    #[test]
    fn sphere_surfels_sit_on_shell_radii() {
        let mut spec = small_spec();
        spec.objects.truncate(2);
        spec.objects.remove(0);
        spec.objects[0].class = 1;
        spec.spike_count = 0;
        let (scene, table) = generate_scene(&spec).unwrap();
        assert!(table.spike.iter().all(|s| !s));
        let center = Vec3::from(spec.objects[0].center);
        let radius = spec.objects[0].size[0];
        for g in &scene {
            let r = (g.center - center).norm();
            let on_shell = SHELL_OFFSETS
                .iter()
                .any(|off| (r - (radius - off)).abs() < 1e-6);
            assert!(on_shell, "distance {r}");
        }
    }

    #[test]
    fn spikes_carry_host_class_and_sit_below_plane() {
        let spec = small_spec();
        let (scene, table) = generate_scene(&spec).unwrap();
        let spikes: Vec<_> = scene
            .iter()
            .zip(&table.spike)
            .filter(|(_, &s)| s)
            .map(|(g, _)| g)
            .collect();
        assert_eq!(spikes.len(), 6);
        for g in spikes {
            assert!(g.class >= 2, "spikes belong to a host object");
            let top = g.center.z + 3.0 * g.scale().x;
            assert!(top < -0.05, "spike pokes above the plane: top {top}");
        }
    }

    #[test]
    fn spike_surfels_are_invisible_in_training_views() {
        let spec = small_spec();
        let (scene, table) = generate_scene(&spec).unwrap();
        let (train_cams, _) = orbit_cameras(&spec);
        let opts = RenderOptions {
            supervision: None,
            record_contributions: true,
        };
        let mut total = vec![0.0f64; scene.len()];
        for cam in &train_cams {
            let out = render(&scene, cam, &opts).unwrap();
            for (_, _, recs) in out.contributions.as_ref().unwrap().enumerate() {
                for r in recs {
                    total[r.surfel as usize] += r.weight;
                }
            }
        }
        for (i, is_spike) in table.spike.iter().enumerate() {
            if *is_spike {
                assert!(
                    total[i] < CONTRIBUTION_MIN,
                    "spike {i} visible with weight {}",
                    total[i]
                );
            }
        }
    }

    #[test]
    fn gt_rendered_is_subset_of_extracted() {
        let spec = small_spec();
        let bench = build_benchmark(&spec, 0.5).unwrap();
        for (ci, views) in bench.gt_test.extracted.iter().enumerate() {
            let class = ci as u32 + 1;
            for (v, extracted) in views.iter().enumerate() {
                let rendered = &bench.gt_test.rendered[v];
                for (x, y, &r) in rendered.enumerate() {
                    if r == class {
                        assert!(
                            *extracted.get(x, y),
                            "class {class} view {v} pixel ({x},{y})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn corrupt_masks_identity_at_zero_fraction() {
        let spec = small_spec();
        let bench = build_benchmark(&spec, 0.5).unwrap();
        let corrupted = corrupt_masks(&bench.train_masks, 0.0, 3).unwrap();
        for (a, b) in corrupted.iter().zip(&bench.train_masks) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn corrupt_masks_flip_count_matches_fraction() {
        let spec = small_spec();
        let bench = build_benchmark(&spec, 0.5).unwrap();
        for fraction in [0.3, 1.0] {
            let corrupted = corrupt_masks(&bench.train_masks, fraction, 11).unwrap();
            let mut changed_views = 0;
            for (v, (a, b)) in corrupted.iter().zip(&bench.train_masks).enumerate() {
                let diffs = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .filter(|(x, y)| x != y)
                    .count();
                if diffs == 0 {
                    continue;
                }
                changed_views += 1;
                // Recount the boundary-adjacent set for this view.
                let mask = &bench.train_masks[v];
                let (w, h) = (mask.width(), mask.height());
                let mut near = 0usize;
                for y in 0..h {
                    for x in 0..w {
                        let mut found = false;
                        for dy in -3i64..=3 {
                            for dx in -3i64..=3 {
                                let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                                if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                                    continue;
                                }
                                let (xx, yy) = (xx as u32, yy as u32);
                                let c = *mask.get(xx, yy);
                                let edge = (xx > 0 && *mask.get(xx - 1, yy) != c)
                                    || (xx + 1 < w && *mask.get(xx + 1, yy) != c)
                                    || (yy > 0 && *mask.get(xx, yy - 1) != c)
                                    || (yy + 1 < h && *mask.get(xx, yy + 1) != c);
                                if edge {
                                    found = true;
                                }
                            }
                        }
                        if found {
                            near += 1;
                        }
                    }
                }
                let expect = (fraction * near as f64).round() as usize;
                // Some selected pixels may flip to a label equal to a
                // neighbor's flip, but each flip changes the pixel, so the
                // diff count matches the request exactly.
                assert!(
                    diffs.abs_diff(expect) <= 1,
                    "view {v}: {diffs} diffs vs {expect} requested"
                );
            }
            assert_eq!(changed_views, bench.train_masks.len() / 2);
        }
    }

    #[test]
    fn init_scene_keeps_oracle_alignment() {
        let spec = small_spec();
        let (oracle, table) = generate_scene(&spec).unwrap();
        let init = perturb_scene(&oracle, &table, &spec);
        assert_eq!(init.len(), oracle.len());
        // Spikes are untouched apart from class reset.
        for (i, is_spike) in table.spike.iter().enumerate() {
            if *is_spike {
                assert_eq!(init[i].center, oracle[i].center);
                assert_eq!(init[i].log_scale, oracle[i].log_scale);
            }
            assert_eq!(init[i].class, 0, "init classes start unassigned");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec();
        spec.orbit.train_views = 2;
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.objects[2].class = 5;
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        for o in &mut spec.objects {
            o.surfels = 0;
        }
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = default_benchmark(3);
        let json = serde_json::to_string_pretty(&spec).unwrap();
        let back: SceneSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.objects.len(), spec.objects.len());
        assert_eq!(back.seed, spec.seed);
        assert_eq!(back.spike_count, spec.spike_count);
    }
}
