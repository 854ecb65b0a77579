//! Per-class visibility voxel grids built from backprojected semantic
//! renders, the density-adaptive voxel size, and the occupancy loss on
//! surfel-surface samples that land in unseen space.

use std::collections::{BTreeSet, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image2::EMPTY_CLASS;
use crate::raster::{ParamGrads, RenderOutput};
use crate::seeding;
use crate::semantics::BACKPROJECT_ALPHA_MIN;
use crate::surfel::{frame_backward, GaussianSurfel, DENSITY_CUTOFF};
use crate::{Vec2, Vec3};

/// How gradients of the occupancy loss reach the surfel parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyGradient {
    /// Sample world positions are detached; the density is re-expressed as a
    /// function of the surfel parameters at each fixed point, so position,
    /// rotation and scale receive gradient alongside opacity.
    Full,
    /// Only the opacity logit receives gradient; the density factor is a
    /// constant. Kept for the ablation.
    AlphaOnly,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GridBuildMeta {
    pub k: usize,
    pub d_k: f64,
    pub rho: f64,
}

/// Sparse per-class occupancy grid. Immutable after construction.
#[derive(Clone, Debug)]
pub struct ClassVoxelGrid {
    pub class: u32,
    pub voxel_size: f64,
    pub origin: Vec3,
    occupied: HashSet<[i32; 3]>,
    /// `occupied` dilated by one voxel in every direction; membership is
    /// exactly `d_occ > 0`.
    supported: HashSet<[i32; 3]>,
    pub meta: Option<GridBuildMeta>,
}

impl ClassVoxelGrid {
    pub fn new(class: u32, voxel_size: f64, origin: Vec3, occupied: HashSet<[i32; 3]>) -> Self {
        let mut supported = HashSet::with_capacity(occupied.len() * 4);
        for key in &occupied {
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        supported.insert([key[0] + dx, key[1] + dy, key[2] + dz]);
                    }
                }
            }
        }
        ClassVoxelGrid {
            class,
            voxel_size,
            origin,
            occupied,
            supported,
            meta: None,
        }
    }

    #[inline]
    pub fn voxel_of(&self, x: &Vec3) -> [i32; 3] {
        [
            ((x.x - self.origin.x) / self.voxel_size).floor() as i32,
            ((x.y - self.origin.y) / self.voxel_size).floor() as i32,
            ((x.z - self.origin.z) / self.voxel_size).floor() as i32,
        ]
    }

    pub fn is_occupied(&self, key: &[i32; 3]) -> bool {
        self.occupied.contains(key)
    }

    /// True iff the 3x3x3 neighborhood of the voxel containing `x` holds at
    /// least one occupied voxel.
    #[inline]
    pub fn is_supported(&self, x: &Vec3) -> bool {
        self.supported.contains(&self.voxel_of(x))
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.len()
    }

    /// Occupied keys in lexicographic order; the canonical serialization and
    /// fingerprint order.
    pub fn sorted_keys(&self) -> Vec<[i32; 3]> {
        let mut keys: Vec<[i32; 3]> = self.occupied.iter().copied().collect();
        keys.sort_unstable();
        keys
    }

    /// Stable content fingerprint for immutability checks.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.occupied.len() * 12 + 32);
        bytes.extend_from_slice(&self.class.to_le_bytes());
        bytes.extend_from_slice(&self.voxel_size.to_le_bytes());
        for c in [self.origin.x, self.origin.y, self.origin.z] {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
        for key in self.sorted_keys() {
            for c in key {
                bytes.extend_from_slice(&c.to_le_bytes());
            }
        }
        seeding::fnv1a(&bytes)
    }
}

/// Number of occupied voxels in the 3x3x3 block centered on the voxel
/// containing `x`; ranges 0..=27.
pub fn d_occ(x: &Vec3, grid: &ClassVoxelGrid) -> u32 {
    let v = grid.voxel_of(x);
    let mut count = 0;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if grid.is_occupied(&[v[0] + dx, v[1] + dy, v[2] + dz]) {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Backprojects every alpha-passing pixel of every view at its rendered
/// depth and buckets the points by the semantic channel value.
pub fn build_class_pointclouds(
    renders: &[RenderOutput],
    cams: &[Camera],
    num_classes: u32,
) -> Result<Vec<Vec<Vec3>>> {
    if renders.len() != cams.len() {
        return Err(Error::config("render and camera counts differ"));
    }
    let mut clouds = vec![Vec::new(); num_classes as usize];
    for (out, cam) in renders.iter().zip(cams) {
        for y in 0..out.alpha.height() {
            for x in 0..out.alpha.width() {
                if *out.alpha.get(x, y) < BACKPROJECT_ALPHA_MIN {
                    continue;
                }
                let class = *out.semantic.get(x, y);
                if class == EMPTY_CLASS {
                    continue;
                }
                if class >= num_classes {
                    return Err(Error::config(format!(
                        "semantic class {class} out of range {num_classes}"
                    )));
                }
                let ray = cam.generate_ray(Vec2::new(x as f64 + 0.5, y as f64 + 0.5));
                clouds[class as usize].push(ray.point_at(*out.depth.get(x, y)));
            }
        }
    }
    Ok(clouds)
}

/// Mean distance to the k-th nearest neighbor, brute force per query.
/// k is clamped to |P|-1. With `query_cap`, queries are a seeded uniform
/// subsample; pass `None` to use every point as a query.
pub fn knn_mean_distance(
    points: &[Vec3],
    k: usize,
    query_cap: Option<usize>,
    seed: u64,
) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::DegenerateCloud(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let k_eff = k.min(points.len() - 1);

    let query_idx: Vec<usize> = match query_cap {
        Some(cap) if points.len() > cap => {
            use rand::seq::index::sample;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seeding::derive(seed, 0x6b6e6e));
            let mut idx: Vec<usize> = sample(&mut rng, points.len(), cap).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..points.len()).collect(),
    };

    let dists: Vec<f64> = query_idx
        .par_iter()
        .map(|&qi| {
            let q = points[qi];
            let mut d2: Vec<f64> = Vec::with_capacity(points.len() - 1);
            for (j, p) in points.iter().enumerate() {
                if j != qi {
                    d2.push((p - q).norm_squared());
                }
            }
            let (_, kth, _) = d2.select_nth_unstable_by(k_eff - 1, f64::total_cmp);
            kth.sqrt()
        })
        .collect();

    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

/// Voxel side from the target occupancy `k` and the measured mean k-NN
/// distance: density rho = k / ((4/3) pi d_k^3), side s = cbrt(k / rho).
pub fn adaptive_voxel_size(d_k: f64, k: usize) -> Result<f64> {
    if !(d_k > 0.0) || !d_k.is_finite() {
        return Err(Error::config(format!("d_k must be positive, got {d_k}")));
    }
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let rho = k as f64 / (4.0 / 3.0 * std::f64::consts::PI * d_k.powi(3));
    Ok((k as f64 / rho).cbrt())
}

/// Voxelizes all class point clouds on a shared origin (the component-wise
/// minimum over every point). Voxels touched by two or more classes are
/// removed from every grid.
pub fn voxelize(class_points: &[Vec<Vec3>], voxel_size: f64) -> Result<Vec<ClassVoxelGrid>> {
    if !(voxel_size > 0.0) {
        return Err(Error::config("voxel size must be positive"));
    }
    let mut origin = Vec3::from_element(f64::INFINITY);
    for cloud in class_points {
        for p in cloud {
            origin.x = origin.x.min(p.x);
            origin.y = origin.y.min(p.y);
            origin.z = origin.z.min(p.z);
        }
    }
    if !origin.x.is_finite() {
        origin = Vec3::zeros();
    }

    let key_of = |p: &Vec3| -> [i32; 3] {
        [
            ((p.x - origin.x) / voxel_size).floor() as i32,
            ((p.y - origin.y) / voxel_size).floor() as i32,
            ((p.z - origin.z) / voxel_size).floor() as i32,
        ]
    };

    // Which single class touched a voxel; None marks a collision.
    let mut census: HashMap<[i32; 3], Option<u32>> = HashMap::new();
    for (class, cloud) in class_points.iter().enumerate() {
        for p in cloud {
            census
                .entry(key_of(p))
                .and_modify(|e| {
                    if *e != Some(class as u32) {
                        *e = None;
                    }
                })
                .or_insert(Some(class as u32));
        }
    }

    let grids = (0..class_points.len())
        .map(|class| {
            let occupied: HashSet<[i32; 3]> = census
                .iter()
                .filter(|(_, owner)| **owner == Some(class as u32))
                .map(|(key, _)| *key)
                .collect();
            ClassVoxelGrid::new(class as u32, voxel_size, origin, occupied)
        })
        .collect();
    Ok(grids)
}

/// One surfel-surface sample.
#[derive(Clone, Copy, Debug)]
pub struct UvSample {
    pub uv: Vec2,
    pub world: Vec3,
    /// exp(-(U^2+V^2)/2).
    pub density: f64,
}

/// Z samples stratified over the 3-sigma UV disk: radii stratify the squared
/// radius with a shared offset, angles follow a golden-ratio sequence. With
/// zero offsets the first sample sits at the disk center.
pub fn sample_uv_with_offsets(
    g: &GaussianSurfel,
    z: usize,
    offset_u: f64,
    offset_theta: f64,
) -> Vec<UvSample> {
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    let frame = g.frame();
    let scale = g.scale();
    (0..z)
        .map(|j| {
            let u01 = (j as f64 + offset_u) / z as f64;
            let r = DENSITY_CUTOFF * u01.sqrt();
            let theta = std::f64::consts::TAU * ((j as f64 * GOLDEN + offset_theta).fract());
            let uv = Vec2::new(r * theta.cos(), r * theta.sin());
            let world = g.center + scale.x * uv.x * frame.t_u + scale.y * uv.y * frame.t_v;
            UvSample {
                uv,
                world,
                density: (-0.5 * r * r).exp(),
            }
        })
        .collect()
}

/// Seeded sampling: the seed fixes the stratification offsets.
pub fn sample_uv(g: &GaussianSurfel, z: usize, seed: u64) -> Vec<UvSample> {
    let offset_u = seeding::to_unit(seeding::derive(seed, 1));
    let offset_theta = seeding::to_unit(seeding::derive(seed, 2));
    sample_uv_with_offsets(g, z, offset_u, offset_theta)
}

pub struct OccupancyEval {
    pub value: f64,
    pub grads: ParamGrads,
    /// Surfel classes that had no grid; all their samples count as unseen.
    pub missing_grid_classes: BTreeSet<u32>,
}

/// Penalty on unseen surfel mass: mean over surfels and samples of
/// `alpha_i * density_i * [d_occ = 0]`, normalized by N*Z. The indicator
/// carries no gradient; opacity always does, and under the `Full` path so do
/// position, rotation and scale through the density at the detached sample
/// position.
pub fn occupancy_loss(
    scene: &[GaussianSurfel],
    grids: &[ClassVoxelGrid],
    z: usize,
    seed: u64,
    path: OccupancyGradient,
) -> Result<OccupancyEval> {
    if z == 0 {
        return Err(Error::config("Z must be at least 1"));
    }
    let n = scene.len();
    let mut grads = ParamGrads::zeros(n);
    if n == 0 {
        return Ok(OccupancyEval {
            value: 0.0,
            grads,
            missing_grid_classes: BTreeSet::new(),
        });
    }
    let max_class = scene.iter().map(|g| g.class).max().unwrap();
    let mut by_class: Vec<Option<&ClassVoxelGrid>> = vec![None; max_class as usize + 1];
    for grid in grids {
        if (grid.class as usize) < by_class.len() {
            by_class[grid.class as usize] = Some(grid);
        }
    }

    let norm = 1.0 / (n as f64 * z as f64);
    struct SurfelTerm {
        loss: f64,
        missing: Option<u32>,
    }
    let terms: Vec<SurfelTerm> = scene
        .par_iter()
        .zip(grads_slices(&mut grads))
        .enumerate()
        .map(|(i, (g, mut slot))| {
            let grid = by_class[g.class as usize];
            let alpha = g.opacity();
            let d_alpha_d_logit = alpha * (1.0 - alpha);
            let samples = sample_uv(g, z, seeding::derive(seed, i as u64));
            let mut loss = 0.0;
            for s in &samples {
                let unseen = match grid {
                    Some(grid) => !grid.is_supported(&s.world),
                    None => true,
                };
                if !unseen {
                    continue;
                }
                loss += alpha * s.density * norm;
                *slot.opacity_logit += s.density * d_alpha_d_logit * norm;
                if path == OccupancyGradient::Full {
                    accumulate_density_grads(g, s, alpha * norm, &mut slot);
                }
            }
            SurfelTerm {
                loss,
                missing: if grid.is_none() { Some(g.class) } else { None },
            }
        })
        .collect();

    let value = terms.iter().map(|t| t.loss).sum();
    let missing_grid_classes = terms.iter().filter_map(|t| t.missing).collect();
    Ok(OccupancyEval {
        value,
        grads,
        missing_grid_classes,
    })
}

/// Disjoint per-surfel views into the gradient arrays so the loss can fill
/// them in parallel.
struct GradSlot<'a> {
    center: &'a mut Vec3,
    rotation: &'a mut [f64; 4],
    log_scale: &'a mut Vec2,
    opacity_logit: &'a mut f64,
}

fn grads_slices(grads: &mut ParamGrads) -> impl IndexedParallelIterator<Item = GradSlot<'_>> {
    grads
        .center
        .par_iter_mut()
        .zip(grads.rotation.par_iter_mut())
        .zip(grads.log_scale.par_iter_mut())
        .zip(grads.opacity_logit.par_iter_mut())
        .map(|(((center, rotation), log_scale), opacity_logit)| GradSlot {
            center,
            rotation,
            log_scale,
            opacity_logit,
        })
}

/// Gradient of `coeff * exp(-(U'^2+V'^2)/2)` where (U', V') are the surfel
/// coordinates of the fixed world point `s.world`. At the current parameters
/// they equal `s.uv` exactly.
fn accumulate_density_grads(g: &GaussianSurfel, s: &UvSample, coeff: f64, slot: &mut GradSlot) {
    let d_g = coeff;
    let d_u = -s.density * s.uv.x * d_g;
    let d_v = -s.density * s.uv.y * d_g;
    if d_u == 0.0 && d_v == 0.0 {
        return;
    }
    let frame = g.frame();
    let scale = g.scale();
    let delta = s.world - g.center;

    *slot.center += d_u * (-frame.t_u / scale.x) + d_v * (-frame.t_v / scale.y);
    slot.log_scale.x += -s.uv.x * d_u;
    slot.log_scale.y += -s.uv.y * d_v;
    let d_tu = (d_u / scale.x) * delta;
    let d_tv = (d_v / scale.y) * delta;
    let dq = frame_backward(&g.rotation, d_tu, d_tv, Vec3::zeros());
    for k in 0..4 {
        slot.rotation[k] += dq[k];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surfel::logit;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_from(keys: &[[i32; 3]], class: u32, s: f64) -> ClassVoxelGrid {
        ClassVoxelGrid::new(class, s, Vec3::zeros(), keys.iter().copied().collect())
    }

    #[test]
    fn pair_distance() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)];
        let d = knn_mean_distance(&pts, 1, None, 0).unwrap();
        assert_relative_eq!(d, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lattice_nearest_neighbor_is_spacing() {
        let h = 0.37;
        let mut pts = Vec::new();
        for x in 0..10 {
            for y in 0..10 {
                for z in 0..10 {
                    pts.push(Vec3::new(x as f64 * h, y as f64 * h, z as f64 * h));
                }
            }
        }
        let d = knn_mean_distance(&pts, 1, None, 0).unwrap();
        assert_relative_eq!(d, h, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_cloud_is_an_error() {
        assert!(matches!(
            knn_mean_distance(&[Vec3::zeros()], 5, None, 0),
            Err(Error::DegenerateCloud(_))
        ));
    }

    #[test]
    fn subsampled_queries_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..5000)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let a = knn_mean_distance(&pts, 20, Some(512), 7).unwrap();
        let b = knn_mean_distance(&pts, 20, Some(512), 7).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn voxel_size_is_fixed_multiple_of_dk() {
        let expect = (4.0 * std::f64::consts::PI / 3.0).cbrt();
        for (d_k, k) in [(1.0, 1usize), (0.37, 2000), (12.5, 17)] {
            let s = adaptive_voxel_size(d_k, k).unwrap();
            assert_relative_eq!(s / d_k, expect, epsilon = 1e-12);
        }
        assert_relative_eq!(
            adaptive_voxel_size(1.0, 5).unwrap(),
            1.61199,
            epsilon = 1e-5
        );
        assert!(adaptive_voxel_size(0.0, 5).is_err());
        assert!(adaptive_voxel_size(-1.0, 5).is_err());
    }

    #[test]
    fn single_point_occupies_one_voxel() {
        let grids = voxelize(&[vec![Vec3::new(0.2, 0.2, 0.2)]], 1.0).unwrap();
        assert_eq!(grids[0].occupied_count(), 1);
    }

    #[test]
    fn collision_voxels_are_emptied_everywhere() {
        let grids = voxelize(
            &[
                vec![Vec3::new(0.2, 0.2, 0.2), Vec3::new(5.0, 0.0, 0.0)],
                vec![Vec3::new(0.4, 0.4, 0.4)],
            ],
            1.0,
        )
        .unwrap();
        // The shared voxel is empty in both; the lone class-0 voxel survives.
        assert_eq!(grids[0].occupied_count(), 1);
        assert_eq!(grids[1].occupied_count(), 0);
    }

    #[test]
    fn voxel_census_matches_floor_division_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = 0.23;
        let clouds: Vec<Vec<Vec3>> = (0..3)
            .map(|_| {
                (0..400)
                    .map(|_| {
                        Vec3::new(
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-2.0..2.0),
                        )
                    })
                    .collect()
            })
            .collect();
        let grids = voxelize(&clouds, s).unwrap();
        let origin = grids[0].origin;
        let mut census: HashMap<[i32; 3], HashSet<u32>> = HashMap::new();
        for (c, cloud) in clouds.iter().enumerate() {
            for p in cloud {
                let key = [
                    ((p.x - origin.x) / s).floor() as i32,
                    ((p.y - origin.y) / s).floor() as i32,
                    ((p.z - origin.z) / s).floor() as i32,
                ];
                census.entry(key).or_default().insert(c as u32);
            }
        }
        for (key, owners) in &census {
            for grid in &grids {
                let expect = owners.len() == 1 && owners.contains(&grid.class);
                assert_eq!(grid.is_occupied(key), expect);
            }
        }
        let total_expected: usize = census.values().filter(|o| o.len() == 1).count();
        let total: usize = grids.iter().map(|g| g.occupied_count()).sum();
        assert_eq!(total, total_expected);
    }

    #[test]
    fn d_occ_saturates_and_vanishes() {
        let mut keys = Vec::new();
        for x in -1..=1 {
            for y in -1..=1 {
                for z in -1..=1 {
                    keys.push([x, y, z]);
                }
            }
        }
        let full = grid_from(&keys, 0, 1.0);
        assert_eq!(d_occ(&Vec3::new(0.5, 0.5, 0.5), &full), 27);
        let empty = grid_from(&[], 0, 1.0);
        assert_eq!(d_occ(&Vec3::new(0.5, 0.5, 0.5), &empty), 0);
    }

    #[test]
    fn d_occ_matches_brute_force_scan_and_supported_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let keys: Vec<[i32; 3]> = (0..300)
            .map(|_| {
                [
                    rng.gen_range(-6..6),
                    rng.gen_range(-6..6),
                    rng.gen_range(-6..6),
                ]
            })
            .collect();
        let grid = grid_from(&keys, 0, 0.5);
        for _ in 0..10_000 {
            let x = Vec3::new(
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
            );
            let v = grid.voxel_of(&x);
            let mut brute = 0;
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if grid.is_occupied(&[v[0] + dx, v[1] + dy, v[2] + dz]) {
                            brute += 1;
                        }
                    }
                }
            }
            assert_eq!(d_occ(&x, &grid), brute);
            assert_eq!(grid.is_supported(&x), brute > 0);
        }
    }

    fn test_surfel() -> GaussianSurfel {
        GaussianSurfel {
            center: Vec3::new(0.3, -0.2, 0.7),
            rotation: [0.9, 0.1, -0.3, 0.2],
            log_scale: Vec2::new(-0.5, -0.8),
            color: Vec3::new(0.5, 0.5, 0.5),
            opacity_logit: logit(0.8),
            class: 0,
        }
    }

    #[test]
    fn first_sample_at_origin_without_offsets() {
        let g = test_surfel();
        let samples = sample_uv_with_offsets(&g, 1, 0.0, 0.0);
        assert_eq!(samples.len(), 1);
        assert_relative_eq!(samples[0].density, 1.0, epsilon = 1e-12);
        assert!((samples[0].world - g.center).norm() < 1e-12);
    }

    #[test]
    fn samples_stay_on_cutoff_disk() {
        let g = test_surfel();
        for seed in 0..20 {
            for s in sample_uv(&g, 64, seed) {
                assert!(s.uv.norm() <= DENSITY_CUTOFF + 1e-12);
                assert_relative_eq!(
                    s.density,
                    (-0.5 * s.uv.norm_squared()).exp(),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn mean_density_matches_disk_integral() {
        // E[exp(-r^2/2)] over the uniform disk of radius 3.
        let expect = (1.0 - (-4.5f64).exp()) * 2.0 / 9.0;
        let g = test_surfel();
        let samples = sample_uv(&g, 100_000, 99);
        let mean: f64 = samples.iter().map(|s| s.density).sum::<f64>() / samples.len() as f64;
        assert!((mean - expect).abs() < 1e-3, "mean {mean} vs {expect}");
    }

    #[test]
    fn fully_supported_scene_has_zero_loss() {
        let g = test_surfel();
        // One giant voxel containing the whole disk.
        let grid = ClassVoxelGrid::new(0, 100.0, Vec3::from_element(-50.0), {
            let mut s = HashSet::new();
            s.insert([0, 0, 0]);
            s
        });
        let eval = occupancy_loss(&[g], &[grid], 32, 1, OccupancyGradient::Full).unwrap();
        assert_eq!(eval.value, 0.0);
        assert_eq!(eval.grads.opacity_logit[0], 0.0);
        assert_eq!(eval.grads.center[0], Vec3::zeros());
    }

    #[test]
    fn unseen_surfel_matches_hand_summation() {
        let g = test_surfel();
        let empty = grid_from(&[], 0, 1.0);
        let z = 16;
        let seed = 4;
        let eval = occupancy_loss(
            std::slice::from_ref(&g),
            &[empty],
            z,
            seed,
            OccupancyGradient::AlphaOnly,
        )
        .unwrap();
        let samples = sample_uv(&g, z, seeding::derive(seed, 0));
        let expect: f64 = samples
            .iter()
            .map(|s| g.opacity() * s.density / z as f64)
            .sum();
        assert_relative_eq!(eval.value, expect, epsilon = 1e-12);
        assert!(eval.value > 0.0);
    }

    #[test]
    fn missing_grid_counts_all_samples_unseen() {
        let mut g = test_surfel();
        g.class = 3;
        let eval = occupancy_loss(&[g], &[], 8, 0, OccupancyGradient::AlphaOnly).unwrap();
        assert!(eval.value > 0.0);
        assert!(eval.missing_grid_classes.contains(&3));
    }

    #[test]
    fn opacity_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let mut g = test_surfel();
            g.opacity_logit = rng.gen_range(-2.0..2.0);
            g.center.x += rng.gen_range(-0.5..0.5);
            // Half-space grid so a nontrivial subset of samples is unseen.
            let keys: Vec<[i32; 3]> = (-10..10)
                .flat_map(|x| (-10..0).flat_map(move |y| (-10..10).map(move |z| [x, y, z])))
                .collect();
            let grid = grid_from(&keys, 0, 0.3);
            let z = 24;
            let seed = 100 + trial;
            let eval = occupancy_loss(
                std::slice::from_ref(&g),
                std::slice::from_ref(&grid),
                z,
                seed,
                OccupancyGradient::AlphaOnly,
            )
            .unwrap();
            let h = 1e-5;
            let mut gp = g.clone();
            gp.opacity_logit += h;
            let mut gm = g.clone();
            gm.opacity_logit -= h;
            let lp = occupancy_loss(
                std::slice::from_ref(&gp),
                std::slice::from_ref(&grid),
                z,
                seed,
                OccupancyGradient::AlphaOnly,
            )
            .unwrap()
            .value;
            let lm = occupancy_loss(
                std::slice::from_ref(&gm),
                std::slice::from_ref(&grid),
                z,
                seed,
                OccupancyGradient::AlphaOnly,
            )
            .unwrap()
            .value;
            let fd = (lp - lm) / (2.0 * h);
            let analytic = eval.grads.opacity_logit[0];
            if fd.abs() > 1e-12 {
                assert!(
                    (analytic - fd).abs() <= 1e-5 * analytic.abs().max(fd.abs()),
                    "trial {trial}: {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn removing_voxels_never_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let g = test_surfel();
            let mut keys: Vec<[i32; 3]> = (0..60)
                .map(|_| {
                    [
                        rng.gen_range(-3..3),
                        rng.gen_range(-3..3),
                        rng.gen_range(-3..3),
                    ]
                })
                .collect();
            let full = grid_from(&keys, 0, 0.4);
            let l_full = occupancy_loss(
                std::slice::from_ref(&g),
                std::slice::from_ref(&full),
                16,
                3,
                OccupancyGradient::AlphaOnly,
            )
            .unwrap()
            .value;
            keys.truncate(keys.len() / 2);
            let half = grid_from(&keys, 0, 0.4);
            let l_half = occupancy_loss(
                std::slice::from_ref(&g),
                std::slice::from_ref(&half),
                16,
                3,
                OccupancyGradient::AlphaOnly,
            )
            .unwrap()
            .value;
            assert!(l_half >= l_full - 1e-15);
        }
    }

    #[test]
    fn contact_interface_neighbors_keep_samples_valid() {
        // Two abutting boxes of different classes: the interface voxel
        // column collides and is emptied, but samples there stay supported
        // by same-class neighbors.
        let s = 1.0;
        let mut a = Vec::new();
        let mut b = Vec::new();
        for y in 0..3 {
            for z in 0..3 {
                for x in 0..3 {
                    a.push(Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5));
                    b.push(Vec3::new(x as f64 + 4.5, y as f64 + 0.5, z as f64 + 0.5));
                }
                // Both classes drop a point in the interface voxel; the grid
                // origin is 0.5, so x in [3.5, 4.5) is one voxel column.
                a.push(Vec3::new(3.6, y as f64 + 0.5, z as f64 + 0.5));
                b.push(Vec3::new(3.9, y as f64 + 0.5, z as f64 + 0.5));
            }
        }
        let grids = voxelize(&[a, b], s).unwrap();
        let interface = Vec3::new(3.7, 1.5, 1.5);
        let key = grids[0].voxel_of(&interface);
        assert!(!grids[0].is_occupied(&key));
        assert!(!grids[1].is_occupied(&key));
        assert!(d_occ(&interface, &grids[0]) > 0);
        assert!(d_occ(&interface, &grids[1]) > 0);
        assert!(grids[0].is_supported(&interface));
        assert!(grids[1].is_supported(&interface));
    }

    #[test]
    fn grid_fingerprint_is_stable() {
        let g1 = grid_from(&[[0, 1, 2], [3, 4, 5]], 1, 0.5);
        let g2 = grid_from(&[[3, 4, 5], [0, 1, 2]], 1, 0.5);
        assert_eq!(g1.fingerprint(), g2.fingerprint());
        let g3 = grid_from(&[[0, 1, 2]], 1, 0.5);
        assert_ne!(g1.fingerprint(), g3.fingerprint());
    }
}
