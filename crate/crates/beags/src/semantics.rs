//! Multiview mask refinement by depth-based reprojection and majority
//! voting, plus contribution-weighted per-surfel class assignment.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image2::{ClassImage, ScalarImage};
use crate::raster::{render, RenderOptions, RenderOutput};
use crate::surfel::GaussianSurfel;
use crate::{Vec2, Vec3};

/// Pixels below this accumulated alpha are not lifted to 3D.
pub const BACKPROJECT_ALPHA_MIN: f64 = 0.5;

/// Relative occlusion tolerance for the reprojection z-test.
pub const OCCLUSION_TAU: f64 = 0.01;

/// Mask pixels lifted to labeled world points.
#[derive(Clone, Debug)]
pub struct LabeledPointCloud {
    pub points: Vec<(Vec3, u32)>,
    pub source_view: usize,
}

/// Per-view vote stacks and the refined masks derived from them.
pub struct SemanticMaskSet {
    pub originals: Vec<ClassImage>,
    pub votes: Vec<VoteStack>,
    pub refined: Vec<ClassImage>,
    pub num_classes: u32,
}

/// H x W x L vote counts for one view.
pub struct VoteStack {
    width: u32,
    height: u32,
    classes: u32,
    counts: Vec<u32>,
}

impl VoteStack {
    fn new(width: u32, height: u32, classes: u32) -> Self {
        VoteStack {
            width,
            height,
            classes,
            counts: vec![0; (width * height * classes) as usize],
        }
    }

    #[inline]
    fn idx(&self, x: u32, y: u32) -> usize {
        ((y * self.width + x) * self.classes) as usize
    }

    pub fn pixel_counts(&self, x: u32, y: u32) -> &[u32] {
        let i = self.idx(x, y);
        &self.counts[i..i + self.classes as usize]
    }

    pub fn total_votes(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }
}

/// Lifts every sufficiently opaque pixel of a view to a labeled world point
/// at the rendered depth along its pixel ray.
pub fn backproject_mask(
    cam: &Camera,
    depth: &ScalarImage,
    mask: &ClassImage,
    alpha: &ScalarImage,
    source_view: usize,
) -> Result<LabeledPointCloud> {
    if !depth.same_size(mask) || !depth.same_size(alpha) {
        return Err(Error::config("backproject_mask inputs differ in size"));
    }
    let mut points = Vec::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if *alpha.get(x, y) < BACKPROJECT_ALPHA_MIN {
                continue;
            }
            let ray = cam.generate_ray(Vec2::new(x as f64 + 0.5, y as f64 + 0.5));
            points.push((ray.point_at(*depth.get(x, y)), *mask.get(x, y)));
        }
    }
    Ok(LabeledPointCloud {
        points,
        source_view,
    })
}

/// Projects every labeled point into every view and takes the per-pixel
/// majority label. A point votes in a view only if it passes the relative
/// depth test against that view's rendered depth (distance along the ray, the
/// same convention `backproject_mask` lifts with). Zero-vote pixels keep the
/// original label; ties go to the original label when it is among the tied
/// classes, otherwise to the lowest class id.
pub fn reproject_masks(
    clouds: &[LabeledPointCloud],
    cams: &[Camera],
    depths: &[ScalarImage],
    originals: &[ClassImage],
    num_classes: u32,
) -> Result<SemanticMaskSet> {
    if cams.len() != depths.len() || cams.len() != originals.len() {
        return Err(Error::config("reproject_masks inputs differ in view count"));
    }
    let votes: Vec<VoteStack> = cams
        .par_iter()
        .enumerate()
        .map(|(v, cam)| {
            let depth = &depths[v];
            let mut stack = VoteStack::new(cam.width, cam.height, num_classes);
            let center = cam.center();
            for cloud in clouds {
                for &(point, label) in &cloud.points {
                    let Some((pixel, _z)) = cam.project_point(&point) else {
                        continue;
                    };
                    if pixel.x < 0.0 || pixel.y < 0.0 {
                        continue;
                    }
                    let (px, py) = (pixel.x.floor() as u32, pixel.y.floor() as u32);
                    if px >= cam.width || py >= cam.height {
                        continue;
                    }
                    let t_point = (point - center).norm();
                    let d = *depth.get(px, py);
                    if (t_point - d).abs() <= OCCLUSION_TAU * d {
                        let i = stack.idx(px, py) + label as usize;
                        stack.counts[i] += 1;
                    }
                }
            }
            stack
        })
        .collect();

    let refined: Vec<ClassImage> = votes
        .iter()
        .zip(originals)
        .map(|(stack, original)| refine_view(stack, original))
        .collect();

    Ok(SemanticMaskSet {
        originals: originals.to_vec(),
        votes,
        refined,
        num_classes,
    })
}

fn refine_view(stack: &VoteStack, original: &ClassImage) -> ClassImage {
    let mut out = original.clone();
    for y in 0..stack.height {
        for x in 0..stack.width {
            let counts = stack.pixel_counts(x, y);
            let max = counts.iter().copied().max().unwrap_or(0);
            if max == 0 {
                continue;
            }
            let orig = *original.get(x, y);
            let winner = if (orig as usize) < counts.len() && counts[orig as usize] == max {
                orig
            } else {
                counts.iter().position(|&c| c == max).unwrap() as u32
            };
            out.set(x, y, winner);
        }
    }
    out
}

/// Normalized per-pixel vote distributions, one scalar image per class.
/// Pixels without votes get the uniform distribution.
pub fn label_probability_maps(stack: &VoteStack) -> Vec<ScalarImage> {
    let l = stack.classes as usize;
    let mut maps = vec![ScalarImage::zeros(stack.width, stack.height); l];
    for y in 0..stack.height {
        for x in 0..stack.width {
            let counts = stack.pixel_counts(x, y);
            let total: u32 = counts.iter().sum();
            for (c, map) in maps.iter_mut().enumerate() {
                let p = if total == 0 {
                    1.0 / l as f64
                } else {
                    counts[c] as f64 / total as f64
                };
                map.set(x, y, p);
            }
        }
    }
    maps
}

/// Contribution-weighted class counters for one scene; the outcome of the
/// FlashSplat-style initialization.
pub struct ClassAssignment {
    /// n x L accumulated blend weight per class.
    pub counters: Vec<Vec<f64>>,
    pub classes: Vec<u32>,
}

/// Accumulates, over all views and pixels, each contributing surfel's blend
/// weight under the refined mask label at that pixel, then assigns the argmax
/// class. Surfels that never contribute get class 0; ties go to the lowest
/// class id. Views are consumed in ascending view-id order regardless of the
/// caller's ordering.
pub fn assign_classes_from_records(
    scene: &mut [GaussianSurfel],
    views: &[(usize, &RenderOutput, &ClassImage)],
    num_classes: u32,
) -> Result<ClassAssignment> {
    let l = num_classes as usize;
    let mut counters = vec![vec![0.0f64; l]; scene.len()];
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by_key(|&i| views[i].0);
    for &i in &order {
        let (_, out, mask) = views[i];
        let Some(records) = out.contributions.as_ref() else {
            return Err(Error::config(
                "assign_classes requires renders with contribution records",
            ));
        };
        if !mask.same_size(records) {
            return Err(Error::config("mask and render sizes differ"));
        }
        for (x, y, recs) in records.enumerate() {
            let label = *mask.get(x, y) as usize;
            if label >= l {
                return Err(Error::config(format!(
                    "mask label {label} out of range (num_classes {l})"
                )));
            }
            for rec in recs {
                counters[rec.surfel as usize][label] += rec.weight;
            }
        }
    }

    let classes: Vec<u32> = counters
        .iter()
        .map(|row| {
            let mut best = 0u32;
            let mut best_w = 0.0;
            for (c, &w) in row.iter().enumerate() {
                if w > best_w {
                    best_w = w;
                    best = c as u32;
                }
            }
            best
        })
        .collect();
    for (g, &c) in scene.iter_mut().zip(classes.iter()) {
        g.class = c;
    }
    Ok(ClassAssignment { counters, classes })
}

/// Convenience wrapper that renders each view with records enabled.
pub fn assign_classes(
    scene: &mut [GaussianSurfel],
    cams: &[Camera],
    refined: &[ClassImage],
    num_classes: u32,
) -> Result<ClassAssignment> {
    if cams.len() != refined.len() {
        return Err(Error::config("camera and mask counts differ"));
    }
    let opts = RenderOptions {
        supervision: None,
        record_contributions: true,
    };
    let outputs: Vec<RenderOutput> = cams
        .iter()
        .map(|cam| render(scene, cam, &opts))
        .collect::<Result<_>>()?;
    let views: Vec<(usize, &RenderOutput, &ClassImage)> = outputs
        .iter()
        .enumerate()
        .map(|(i, out)| (i, out, &refined[i]))
        .collect();
    assign_classes_from_records(scene, &views, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image2::EMPTY_CLASS;
    use crate::surfel::logit;
    use crate::Vec2 as V2;

    fn plane_scene(z: f64, class: u32) -> Vec<GaussianSurfel> {
        let mut scene = Vec::new();
        for i in -6..=6 {
            for j in -6..=6 {
                scene.push(GaussianSurfel {
                    center: Vec3::new(i as f64 * 0.3, j as f64 * 0.3, z),
                    rotation: [1.0, 0.0, 0.0, 0.0],
                    log_scale: V2::new(0.3f64.ln(), 0.3f64.ln()),
                    color: Vec3::new(0.5, 0.5, 0.5),
                    opacity_logit: logit(0.99),
                    class,
                });
            }
        }
        scene
    }

    fn down_cam() -> Camera {
        Camera::look_at(
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::zeros(),
            Vec3::y(),
            55.0,
            32,
            32,
        )
    }

    fn semantic_as_mask(out: &RenderOutput) -> ClassImage {
        out.semantic.map(|&c| if c == EMPTY_CLASS { 0 } else { c })
    }

    #[test]
    fn fronto_parallel_plane_lifts_to_constant_depth() {
        let scene = plane_scene(0.0, 1);
        let cam = down_cam();
        let out = render(&scene, &cam, &RenderOptions::default()).unwrap();
        let mask = semantic_as_mask(&out);
        let cloud = backproject_mask(&cam, &out.depth, &mask, &out.alpha, 0).unwrap();
        assert!(!cloud.points.is_empty());
        for (p, label) in &cloud.points {
            let zc = cam.to_camera(p).z;
            assert!((zc - 2.0).abs() < 1e-6, "camera depth {zc}");
            assert_eq!(*label, 1);
        }
    }

    #[test]
    fn zero_alpha_gives_empty_cloud() {
        let cam = down_cam();
        let depth = ScalarImage::zeros(32, 32);
        let alpha = ScalarImage::zeros(32, 32);
        let mask = ClassImage::filled(32, 32, 0);
        let cloud = backproject_mask(&cam, &depth, &mask, &alpha, 0).unwrap();
        assert!(cloud.points.is_empty());
    }

    #[test]
    fn backprojected_points_reproject_to_their_pixel() {
        let scene = plane_scene(0.0, 1);
        let cam = down_cam();
        let out = render(&scene, &cam, &RenderOptions::default()).unwrap();
        let mask = semantic_as_mask(&out);
        let cloud = backproject_mask(&cam, &out.depth, &mask, &out.alpha, 0).unwrap();
        let mut idx = 0usize;
        for y in 0..32 {
            for x in 0..32 {
                if *out.alpha.get(x, y) < BACKPROJECT_ALPHA_MIN {
                    continue;
                }
                let (p, _) = cloud.points[idx];
                idx += 1;
                let (pixel, _) = cam.project_point(&p).unwrap();
                assert!((pixel - V2::new(x as f64 + 0.5, y as f64 + 0.5)).norm() < 1e-6);
            }
        }
        assert_eq!(idx, cloud.points.len());
    }

    #[test]
    fn consistent_views_are_a_fixed_point() {
        let scene = plane_scene(0.0, 1);
        let cams = vec![
            Camera::look_at(Vec3::new(0.0, 0.0, 2.0), Vec3::zeros(), Vec3::y(), 55.0, 32, 32),
            Camera::look_at(Vec3::new(0.8, 0.3, 2.0), Vec3::zeros(), Vec3::y(), 55.0, 32, 32),
            Camera::look_at(Vec3::new(-0.5, -0.6, 2.0), Vec3::zeros(), Vec3::y(), 55.0, 32, 32),
        ];
        let outs: Vec<_> = cams
            .iter()
            .map(|c| render(&scene, c, &RenderOptions::default()).unwrap())
            .collect();
        let masks: Vec<ClassImage> = outs.iter().map(semantic_as_mask).collect();
        let depths: Vec<_> = outs.iter().map(|o| o.depth.clone()).collect();
        let clouds: Vec<_> = (0..3)
            .map(|v| backproject_mask(&cams[v], &depths[v], &masks[v], &outs[v].alpha, v).unwrap())
            .collect();
        let set = reproject_masks(&clouds, &cams, &depths, &masks, 2).unwrap();
        for v in 0..3 {
            let diff = set.refined[v]
                .data()
                .iter()
                .zip(masks[v].data())
                .filter(|(a, b)| a != b)
                .count();
            assert!(diff <= masks[v].data().len() / 1000, "view {v}: {diff} diffs");
        }
    }

    #[test]
    fn corrupted_patch_is_outvoted() {
        let scene = plane_scene(0.0, 1);
        let cams = vec![
            Camera::look_at(Vec3::new(0.0, 0.0, 2.0), Vec3::zeros(), Vec3::y(), 55.0, 32, 32),
            Camera::look_at(Vec3::new(0.4, 0.2, 2.0), Vec3::zeros(), Vec3::y(), 55.0, 32, 32),
            Camera::look_at(Vec3::new(-0.3, -0.4, 2.0), Vec3::zeros(), Vec3::y(), 55.0, 32, 32),
        ];
        let outs: Vec<_> = cams
            .iter()
            .map(|c| render(&scene, c, &RenderOptions::default()).unwrap())
            .collect();
        let mut masks: Vec<ClassImage> = outs.iter().map(semantic_as_mask).collect();
        let mut corrupted_pixels = Vec::new();
        for y in 12..18 {
            for x in 12..18 {
                if *masks[0].get(x, y) == 1 {
                    masks[0].set(x, y, 2);
                    corrupted_pixels.push((x, y));
                }
            }
        }
        assert!(!corrupted_pixels.is_empty());
        let depths: Vec<_> = outs.iter().map(|o| o.depth.clone()).collect();
        let clouds: Vec<_> = (0..3)
            .map(|v| backproject_mask(&cams[v], &depths[v], &masks[v], &outs[v].alpha, v).unwrap())
            .collect();
        let set = reproject_masks(&clouds, &cams, &depths, &masks, 3).unwrap();
        // Each corrupted pixel gets one wrong self-vote and two correct ones.
        let fixed = corrupted_pixels
            .iter()
            .filter(|&&(x, y)| *set.refined[0].get(x, y) == 1)
            .count();
        assert!(
            fixed * 10 >= corrupted_pixels.len() * 9,
            "only {}/{} corrected",
            fixed,
            corrupted_pixels.len()
        );
    }

    #[test]
    fn occluded_points_cast_no_votes() {
        // An opaque near plane hides everything at z = -1 from this view.
        let scene = plane_scene(0.0, 1);
        let cam = down_cam();
        let out = render(&scene, &cam, &RenderOptions::default()).unwrap();
        let mask = semantic_as_mask(&out);
        let mut far = Vec::new();
        for i in -5..=5 {
            for j in -5..=5 {
                far.push((Vec3::new(i as f64 * 0.2, j as f64 * 0.2, -1.0), 2u32));
            }
        }
        let cloud = LabeledPointCloud {
            points: far,
            source_view: 1,
        };
        let set = reproject_masks(
            &[cloud],
            std::slice::from_ref(&cam),
            std::slice::from_ref(&out.depth),
            std::slice::from_ref(&mask),
            3,
        )
        .unwrap();
        assert_eq!(set.votes[0].total_votes(), 0);
    }

    #[test]
    fn probability_maps_normalize_votes() {
        let mut stack = VoteStack::new(2, 1, 3);
        let i = stack.idx(0, 0);
        stack.counts[i + 1] = 2;
        stack.counts[i + 2] = 1;
        let maps = label_probability_maps(&stack);
        assert!((maps[1].get(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((maps[2].get(0, 0) - 1.0 / 3.0).abs() < 1e-12);
        for map in &maps {
            assert!((map.get(1, 0) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unanimous_pixel_is_one_hot() {
        let mut stack = VoteStack::new(1, 1, 4);
        stack.counts[2] = 5;
        let maps = label_probability_maps(&stack);
        assert_eq!(*maps[2].get(0, 0), 1.0);
        assert_eq!(*maps[0].get(0, 0), 0.0);
    }

    #[test]
    fn assignment_prefers_weighted_majority() {
        let cam = down_cam();
        let mut scene = vec![GaussianSurfel {
            center: Vec3::new(0.25, 0.0, 0.0),
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: V2::new(0.0, 0.0),
            color: Vec3::new(0.5, 0.5, 0.5),
            opacity_logit: logit(0.9),
            class: 0,
        }];
        // Left strip of the mask is class 1, the rest class 2; the surfel
        // center sits on the class-2 side so most weight lands there.
        let mut mask = ClassImage::filled(32, 32, 2);
        for y in 0..32 {
            for x in 0..10 {
                mask.set(x, y, 1);
            }
        }
        let assignment = assign_classes(
            &mut scene,
            std::slice::from_ref(&cam),
            std::slice::from_ref(&mask),
            3,
        )
        .unwrap();
        assert_eq!(scene[0].class, 2);
        // Oracle: brute-force per-pixel weight tally.
        let out = render(
            &scene,
            &cam,
            &RenderOptions {
                supervision: None,
                record_contributions: true,
            },
        )
        .unwrap();
        let mut tally = [0.0f64; 3];
        for (x, y, recs) in out.contributions.as_ref().unwrap().enumerate() {
            for r in recs {
                tally[*mask.get(x, y) as usize] += r.weight;
            }
        }
        for c in 0..3 {
            assert!((assignment.counters[0][c] - tally[c]).abs() < 1e-12);
        }
        assert!(tally[2] > tally[1]);
    }

    #[test]
    fn never_rendered_surfel_gets_background() {
        let cam = down_cam();
        // Behind the camera; contributes nowhere.
        let mut scene = vec![GaussianSurfel {
            center: Vec3::new(0.0, 0.0, 10.0),
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: V2::new(0.0, 0.0),
            color: Vec3::zeros(),
            opacity_logit: 0.0,
            class: 5,
        }];
        let mask = ClassImage::filled(32, 32, 2);
        assign_classes(
            &mut scene,
            std::slice::from_ref(&cam),
            std::slice::from_ref(&mask),
            6,
        )
        .unwrap();
        assert_eq!(scene[0].class, 0);
    }
}
