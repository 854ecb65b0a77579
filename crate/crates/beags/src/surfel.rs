//! Gaussian surfels and ray-splat intersection.
//!
//! A surfel is a 2D Gaussian disk embedded in 3D: a center, a tangent frame
//! from a quaternion, two scales, a flat RGB color, an opacity and a fixed
//! semantic class. Opacity is stored as a logit and scales as logs so the
//! optimizer works on unconstrained parameters.

use crate::{Vec2, Vec3};

/// Density support cutoff in sigma units; beyond 3 sigma a splat contributes
/// nothing.
pub const DENSITY_CUTOFF: f64 = 3.0;

/// Intersections closer than this along the ray are discarded (world units).
pub const NEAR_PLANE: f64 = 1e-4;

/// Rays whose direction is this close to parallel with a splat plane miss it.
pub const PARALLEL_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSurfel {
    pub center: Vec3,
    /// Quaternion as (w, x, y, z); renormalized after every optimizer step.
    pub rotation: [f64; 4],
    /// Log of (s_u, s_v).
    pub log_scale: Vec2,
    /// RGB in [0, 1].
    pub color: Vec3,
    /// Opacity logit; the realized opacity is its sigmoid.
    pub opacity_logit: f64,
    /// Semantic class id. Not trainable; set once by assignment.
    pub class: u32,
}

impl GaussianSurfel {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec2 {
        Vec2::new(self.log_scale.x.exp(), self.log_scale.y.exp())
    }

    pub fn frame(&self) -> Frame {
        surfel_frame(self)
    }

    pub fn normalize_rotation(&mut self) {
        let q = &mut self.rotation;
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        for c in q.iter_mut() {
            *c /= n;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Orthonormal surfel frame; `normal = t_u x t_v`.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub t_u: Vec3,
    pub t_v: Vec3,
    pub normal: Vec3,
}

/// Tangent frame realized from the surfel quaternion. The quaternion is
/// normalized here, so the map is well defined slightly off the unit sphere
/// (finite-difference probes rely on that).
pub fn surfel_frame(g: &GaussianSurfel) -> Frame {
    frame_from_quaternion(&g.rotation)
}

pub fn frame_from_quaternion(q: &[f64; 4]) -> Frame {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let t_u = Vec3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y + w * z),
        2.0 * (x * z - w * y),
    );
    let t_v = Vec3::new(
        2.0 * (x * y - w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z + w * x),
    );
    let normal = t_u.cross(&t_v);
    Frame { t_u, t_v, normal }
}

/// Pulls frame adjoints back to the raw quaternion. The result lies in the
/// tangent of the unit sphere at the normalized quaternion.
pub fn frame_backward(q: &[f64; 4], d_tu: Vec3, d_tv: Vec3, d_n: Vec3) -> [f64; 4] {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    let frame = frame_from_quaternion(q);

    // normal = t_u x t_v, so fold the normal adjoint into the columns.
    let g_tu = d_tu + frame.t_v.cross(&d_n);
    let g_tv = d_tv + d_n.cross(&frame.t_u);

    // Column derivatives of the (unit-quaternion) rotation matrix.
    let dtu = [
        Vec3::new(0.0, 2.0 * z, -2.0 * y),  // d/dw
        Vec3::new(0.0, 2.0 * y, 2.0 * z),   // d/dx
        Vec3::new(-4.0 * y, 2.0 * x, -2.0 * w), // d/dy
        Vec3::new(-4.0 * z, 2.0 * w, 2.0 * x),  // d/dz
    ];
    let dtv = [
        Vec3::new(-2.0 * z, 0.0, 2.0 * x),
        Vec3::new(2.0 * y, -4.0 * x, 2.0 * w),
        Vec3::new(2.0 * x, 0.0, 2.0 * z),
        Vec3::new(-2.0 * w, -4.0 * z, 2.0 * y),
    ];

    let mut g_hat = [0.0; 4];
    for k in 0..4 {
        g_hat[k] = g_tu.dot(&dtu[k]) + g_tv.dot(&dtv[k]);
    }

    // Chain through the normalization: project onto the tangent space and
    // divide by the raw norm.
    let qn = [w, x, y, z];
    let dot: f64 = (0..4).map(|k| qn[k] * g_hat[k]).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (g_hat[k] - qn[k] * dot) / norm;
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vec3 {
        self.origin + t * self.dir
    }
}

/// One ray-splat intersection.
#[derive(Clone, Copy, Debug)]
pub struct SplatHit {
    /// Distance along the ray, world units.
    pub t: f64,
    /// Sigma-normalized local coordinates (U, V).
    pub uv: Vec2,
    /// exp(-(U^2+V^2)/2).
    pub density: f64,
}

/// Exact ray-plane intersection with UV density evaluation. `None` is a
/// regular outcome: parallel ray, behind the near plane, or outside the
/// cutoff disk.
pub fn intersect_splat(ray: &Ray, g: &GaussianSurfel) -> Option<SplatHit> {
    let frame = g.frame();
    let scale = g.scale();
    intersect_prepared(ray, &g.center, &frame, &scale)
}

pub(crate) fn intersect_prepared(
    ray: &Ray,
    center: &Vec3,
    frame: &Frame,
    scale: &Vec2,
) -> Option<SplatHit> {
    let denom = ray.dir.dot(&frame.normal);
    if denom.abs() < PARALLEL_EPS {
        return None;
    }
    let t = (center - ray.origin).dot(&frame.normal) / denom;
    if t <= NEAR_PLANE {
        return None;
    }
    let delta = ray.point_at(t) - center;
    let u = delta.dot(&frame.t_u) / scale.x;
    let v = delta.dot(&frame.t_v) / scale.y;
    let r2 = u * u + v * v;
    if r2 > DENSITY_CUTOFF * DENSITY_CUTOFF {
        return None;
    }
    Some(SplatHit {
        t,
        uv: Vec2::new(u, v),
        density: (-0.5 * r2).exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn surfel(rotation: [f64; 4]) -> GaussianSurfel {
        GaussianSurfel {
            center: Vec3::new(0.0, 0.0, 0.0),
            rotation,
            log_scale: Vec2::new(0.0, 0.0),
            color: Vec3::new(1.0, 1.0, 1.0),
            opacity_logit: 0.0,
            class: 0,
        }
    }

    fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
        loop {
            let q: [f64; 4] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 0.1 {
                return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
            }
        }
    }

    #[test]
    fn identity_frame_is_axes() {
        let f = surfel([1.0, 0.0, 0.0, 0.0]).frame();
        assert_relative_eq!(f.t_u, Vec3::x(), epsilon = 1e-15);
        assert_relative_eq!(f.t_v, Vec3::y(), epsilon = 1e-15);
        assert_relative_eq!(f.normal, Vec3::z(), epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let f = surfel([h, 0.0, 0.0, h]).frame();
        assert_relative_eq!(f.t_u, Vec3::y(), epsilon = 1e-12);
        assert_relative_eq!(f.t_v, -Vec3::x(), epsilon = 1e-12);
        assert_relative_eq!(f.normal, Vec3::z(), epsilon = 1e-12);
    }

    #[test]
    fn frame_matches_rotation_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let q = random_quat(&mut rng);
            let f = frame_from_quaternion(&q);
            let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                q[0], q[1], q[2], q[3],
            ));
            let m = uq.to_rotation_matrix();
            assert_relative_eq!(f.t_u, m.matrix().column(0).into_owned(), epsilon = 1e-12);
            assert_relative_eq!(f.t_v, m.matrix().column(1).into_owned(), epsilon = 1e-12);
            assert_relative_eq!(f.normal, m.matrix().column(2).into_owned(), epsilon = 1e-12);
        }
    }

    #[test]
    fn frame_orthonormal_over_many_quaternions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10_000 {
            let q = random_quat(&mut rng);
            let f = frame_from_quaternion(&q);
            assert!(f.t_u.dot(&f.t_v).abs() < 1e-9);
            assert!((f.t_u.norm() - 1.0).abs() < 1e-9);
            assert!((f.normal.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;
        for _ in 0..50 {
            let q = random_quat(&mut rng);
            // Random linear functional of the frame vectors.
            let a = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let b = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let c = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let eval = |q: &[f64; 4]| {
                let f = frame_from_quaternion(q);
                a.dot(&f.t_u) + b.dot(&f.t_v) + c.dot(&f.normal)
            };
            let grad = frame_backward(&q, a, b, c);
            for k in 0..4 {
                let mut qp = q;
                qp[k] += h;
                let mut qm = q;
                qm[k] -= h;
                let fd = (eval(&qp) - eval(&qm)) / (2.0 * h);
                assert!(
                    (grad[k] - fd).abs() < 1e-7 * grad[k].abs().max(fd.abs()).max(1.0),
                    "component {k}: analytic {} vs fd {}",
                    grad[k],
                    fd
                );
            }
        }
    }

    #[test]
    fn head_on_center_hit() {
        let g = surfel([1.0, 0.0, 0.0, 0.0]);
        let ray = Ray {
            origin: Vec3::new(0.0, 0.0, 5.0),
            dir: -Vec3::z(),
        };
        let hit = intersect_splat(&ray, &g).unwrap();
        assert_relative_eq!(hit.t, 5.0, epsilon = 1e-12);
        assert_relative_eq!(hit.uv.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(hit.uv.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(hit.density, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn parallel_ray_misses() {
        let g = surfel([1.0, 0.0, 0.0, 0.0]);
        let ray = Ray {
            origin: Vec3::new(0.0, 0.0, 1.0),
            dir: Vec3::x(),
        };
        assert!(intersect_splat(&ray, &g).is_none());
    }

    #[test]
    fn intersection_matches_linear_solve_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut checked = 0;
        for _ in 0..500 {
            let g = GaussianSurfel {
                center: Vec3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ),
                rotation: random_quat(&mut rng),
                log_scale: Vec2::new(rng.gen_range(-1.5..0.5), rng.gen_range(-1.5..0.5)),
                color: Vec3::zeros(),
                opacity_logit: 0.0,
                class: 0,
            };
            let origin = Vec3::new(
                rng.gen_range(-6.0..6.0),
                rng.gen_range(-6.0..6.0),
                rng.gen_range(-6.0..6.0),
            );
            let dir = (g.center
                + Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                - origin)
                .normalize();
            let ray = Ray { origin, dir };
            let Some(hit) = intersect_splat(&ray, &g) else {
                continue;
            };
            checked += 1;
            // Solve o + t d = p + U s_u t_u + V s_v t_v for (t, U, V).
            let f = g.frame();
            let s = g.scale();
            let m = nalgebra::Matrix3::from_columns(&[dir, -s.x * f.t_u, -s.y * f.t_v]);
            let rhs = g.center - origin;
            let sol = m.lu().solve(&rhs).expect("well-posed hit");
            assert_relative_eq!(hit.t, sol[0], epsilon = 1e-9);
            assert_relative_eq!(hit.uv.x, sol[1], epsilon = 1e-9);
            assert_relative_eq!(hit.uv.y, sol[2], epsilon = 1e-9);
        }
        assert!(checked > 100, "too few hits exercised: {checked}");
    }

    #[test]
    fn uv_halves_when_scale_doubles() {
        let mut g = surfel([1.0, 0.0, 0.0, 0.0]);
        let ray = Ray {
            origin: Vec3::new(0.4, 0.3, 5.0),
            dir: -Vec3::z(),
        };
        let h1 = intersect_splat(&ray, &g).unwrap();
        g.log_scale.x += std::f64::consts::LN_2;
        let h2 = intersect_splat(&ray, &g).unwrap();
        assert_relative_eq!(h2.uv.x, 0.5 * h1.uv.x, epsilon = 1e-12);
        assert_relative_eq!(h2.uv.y, h1.uv.y, epsilon = 1e-12);
    }
}
