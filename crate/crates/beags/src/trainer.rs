//! Two-phase optimization: RGB pretraining, then refinement combining the
//! photometric, boundary and occupancy terms with a first-order adaptive
//! optimizer and deterministic view scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image2::{ClassImage, ColorImage};
use crate::metrics::psnr;
use crate::occupancy::{
    adaptive_voxel_size, build_class_pointclouds, knn_mean_distance, occupancy_loss, voxelize,
    ClassVoxelGrid, GridBuildMeta, OccupancyGradient,
};
use crate::raster::{
    render, rgb_boundary_loss_grads, ParamGrads, RenderOptions, RenderOutput,
};
use crate::seeding;
use crate::semantics::{
    assign_classes_from_records, backproject_mask, reproject_masks, SemanticMaskSet,
};
use crate::surfel::GaussianSurfel;
use crate::Vec3;

pub const KNN_QUERY_CAP: usize = 2048;

/// Per-attribute-group learning rates. The position rate is multiplied by
/// the scene extent at trainer start.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

/// Loss weights, sampling counts and schedule lengths. Defaults follow the
/// shipping configuration: lambda_bound 0.5, lambda_occ 10, Z = 20, k = 2000.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_bound: f64,
    pub lambda_occ: f64,
    /// Depth-distortion weight of the backbone; fixed to 0 here.
    pub lambda_depth: f64,
    /// Normal-consistency weight of the backbone; fixed to 0 here.
    pub lambda_norm: f64,
    /// Surface samples per surfel for the occupancy term.
    pub z_samples: usize,
    /// Neighbor count for the adaptive voxel size.
    pub knn_k: usize,
    pub refine_iters: usize,
    pub pretrain_iters: usize,
    pub seed: u64,
    pub occupancy_gradient: OccupancyGradient,
    pub learning_rates: LearningRates,
    /// Alpha binarization threshold for extracted masks.
    pub alpha_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_bound: 0.5,
            lambda_occ: 10.0,
            lambda_depth: 0.0,
            lambda_norm: 0.0,
            z_samples: 20,
            knn_k: 2000,
            refine_iters: 3000,
            pretrain_iters: 5000,
            seed: 0,
            occupancy_gradient: OccupancyGradient::Full,
            learning_rates: LearningRates::default(),
            alpha_threshold: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_bound", self.lambda_bound),
            ("lambda_occ", self.lambda_occ),
            ("lambda_depth", self.lambda_depth),
            ("lambda_norm", self.lambda_norm),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.z_samples == 0 {
            return Err(Error::config("z_samples must be at least 1"));
        }
        if self.knn_k == 0 {
            return Err(Error::config("knn_k must be at least 1"));
        }
        if !(self.alpha_threshold > 0.0 && self.alpha_threshold < 1.0) {
            return Err(Error::config("alpha_threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One training or held-out view.
#[derive(Clone)]
pub struct TrainView {
    pub cam: Camera,
    pub image: ColorImage,
    /// Input class mask; required for refinement views.
    pub mask: Option<ClassImage>,
}

#[derive(Clone)]
pub struct Dataset {
    pub train: Vec<TrainView>,
    pub test: Vec<TrainView>,
    pub num_classes: u32,
}

impl Dataset {
    pub fn train_cams(&self) -> Vec<Camera> {
        self.train.iter().map(|v| v.cam.clone()).collect()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error and its adjoint image.
pub fn rgb_loss(rendered: &ColorImage, gt: &ColorImage) -> Result<(f64, ColorImage)> {
    if !rendered.same_size(gt) {
        return Err(Error::config("rgb_loss image sizes differ"));
    }
    let norm = 1.0 / (rendered.width() as f64 * rendered.height() as f64 * 3.0);
    let mut total = 0.0;
    let mut adjoint = ColorImage::black(rendered.width(), rendered.height());
    for (i, (r, g)) in rendered.data().iter().zip(gt.data()).enumerate() {
        let diff = r - g;
        total += (diff.x.abs() + diff.y.abs() + diff.z.abs()) * norm;
        adjoint.data_mut()[i] = Vec3::new(sign(diff.x), sign(diff.y), sign(diff.z)) * norm;
    }
    Ok((total, adjoint))
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rgb: f64,
    pub bound: f64,
    pub occ: f64,
}

/// Renders one view, evaluates `L = L_rgb + lb * L_bound + lo * L_occ` and
/// accumulates all gradients per surfel. During pretraining pass no
/// supervision and no grids with both weights zero; the regularizers are
/// then inactive.
pub fn total_loss(
    scene: &[GaussianSurfel],
    cam: &Camera,
    gt: &ColorImage,
    supervision: Option<&ClassImage>,
    grids: Option<&[ClassVoxelGrid]>,
    cfg: &LossConfig,
    occ_seed: u64,
) -> Result<(LossBreakdown, ParamGrads)> {
    if grids.is_none() && cfg.lambda_occ > 0.0 {
        return Err(Error::config(
            "occupancy weight is positive but no voxel grids were supplied",
        ));
    }
    let fused = rgb_boundary_loss_grads(scene, cam, gt, supervision, cfg.lambda_bound)?;
    let (rgb, bound) = (fused.rgb, fused.bound);
    let mut grads = fused.grads;

    let mut occ = 0.0;
    if let Some(grids) = grids {
        if cfg.lambda_occ > 0.0 {
            let eval = occupancy_loss(
                scene,
                grids,
                cfg.z_samples,
                occ_seed,
                cfg.occupancy_gradient,
            )?;
            occ = eval.value;
            grads.add_scaled(&eval.grads, cfg.lambda_occ);
        }
    }

    let total = rgb + cfg.lambda_bound * bound + cfg.lambda_occ * occ;
    if !total.is_finite() {
        return Err(Error::numerical(format!(
            "loss is not finite: rgb {rgb}, bound {bound}, occ {occ}"
        )));
    }
    Ok((
        LossBreakdown {
            total,
            rgb,
            bound,
            occ,
        },
        grads,
    ))
}

/// Adaptive-moment optimizer state over all surfel parameters.
pub struct OptimizerState {
    m: ParamGrads,
    v: ParamGrads,
    step: u64,
    pub skipped_updates: u64,
    rates: LearningRates,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

impl OptimizerState {
    /// `scene_extent` scales the position rate; use the bounding-box diagonal
    /// of the initial surfel centers.
    pub fn new(n: usize, mut rates: LearningRates, scene_extent: f64) -> Self {
        rates.position *= scene_extent;
        OptimizerState {
            m: ParamGrads::zeros(n),
            v: ParamGrads::zeros(n),
            step: 0,
            skipped_updates: 0,
            rates,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

pub fn scene_extent(scene: &[GaussianSurfel]) -> f64 {
    let mut lo = Vec3::from_element(f64::INFINITY);
    let mut hi = Vec3::from_element(f64::NEG_INFINITY);
    for g in scene {
        lo = lo.inf(&g.center);
        hi = hi.sup(&g.center);
    }
    let d = (hi - lo).norm();
    if d.is_finite() && d > 0.0 {
        d
    } else {
        1.0
    }
}

/// One bias-corrected adaptive-moment update. Parameters with a non-finite
/// gradient are skipped (moments untouched) and counted. Quaternions are
/// renormalized afterwards; class ids never change.
pub fn optimizer_step(
    scene: &mut [GaussianSurfel],
    grads: &ParamGrads,
    state: &mut OptimizerState,
) {
    assert_eq!(scene.len(), grads.len());
    state.step += 1;
    let bias1 = 1.0 - BETA1.powi(state.step as i32);
    let bias2 = 1.0 - BETA2.powi(state.step as i32);

    let mut skipped = 0u64;
    let mut update = |param: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64| {
        if !g.is_finite() {
            skipped += 1;
            return;
        }
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *param -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    };

    for i in 0..scene.len() {
        let g = &mut scene[i];
        for k in 0..3 {
            update(
                &mut g.center[k],
                grads.center[i][k],
                &mut state.m.center[i][k],
                &mut state.v.center[i][k],
                state.rates.position,
            );
        }
        for k in 0..4 {
            update(
                &mut g.rotation[k],
                grads.rotation[i][k],
                &mut state.m.rotation[i][k],
                &mut state.v.rotation[i][k],
                state.rates.rotation,
            );
        }
        for k in 0..2 {
            update(
                &mut g.log_scale[k],
                grads.log_scale[i][k],
                &mut state.m.log_scale[i][k],
                &mut state.v.log_scale[i][k],
                state.rates.log_scale,
            );
        }
        for k in 0..3 {
            update(
                &mut g.color[k],
                grads.color[i][k],
                &mut state.m.color[i][k],
                &mut state.v.color[i][k],
                state.rates.color,
            );
        }
        update(
            &mut g.opacity_logit,
            grads.opacity_logit[i],
            &mut state.m.opacity_logit[i],
            &mut state.v.opacity_logit[i],
            state.rates.opacity,
        );
        g.normalize_rotation();
    }
    state.skipped_updates += skipped;
}

/// Seeded shuffled cycling over training views.
struct ViewSchedule {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl ViewSchedule {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = ViewSchedule {
            order: (0..n).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let v = self.order[self.cursor];
        self.cursor += 1;
        v
    }
}

pub fn mean_test_psnr(scene: &[GaussianSurfel], views: &[TrainView]) -> Result<f64> {
    if views.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sum = 0.0;
    for view in views {
        let out = render(scene, &view.cam, &RenderOptions::default())?;
        sum += psnr(&out.color, &view.image)?;
    }
    Ok(sum / views.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub iterations: usize,
    /// (iteration, held-out PSNR) every 100 iterations.
    pub psnr_history: Vec<(usize, f64)>,
    pub final_rgb_loss: f64,
    pub skipped_updates: u64,
}

/// RGB-only optimization over seeded shuffled training views.
pub fn pretrain(
    scene: &mut Vec<GaussianSurfel>,
    dataset: &Dataset,
    cfg: &LossConfig,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::config("pretrain requires at least one training view"));
    }
    let mut state = OptimizerState::new(scene.len(), cfg.learning_rates, scene_extent(scene));
    let mut schedule = ViewSchedule::new(dataset.train.len(), seeding::derive(cfg.seed, 0x707265));
    let rgb_only = LossConfig {
        lambda_bound: 0.0,
        lambda_occ: 0.0,
        ..cfg.clone()
    };
    let mut history = Vec::new();
    let mut last_rgb = 0.0;
    for it in 0..cfg.pretrain_iters {
        let view = &dataset.train[schedule.next()];
        let (loss, grads) = total_loss(scene, &view.cam, &view.image, None, None, &rgb_only, 0)?;
        last_rgb = loss.rgb;
        optimizer_step(scene, &grads, &mut state);
        if (it + 1) % 100 == 0 {
            history.push((it + 1, mean_test_psnr(scene, &dataset.test)?));
        }
    }
    Ok(PretrainReport {
        iterations: cfg.pretrain_iters,
        psnr_history: history,
        final_rgb_loss: last_rgb,
        skipped_updates: state.skipped_updates,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefineReport {
    pub iterations: usize,
    pub psnr_before: f64,
    pub psnr_after: f64,
    pub bound_before: f64,
    pub bound_after: f64,
    pub unseen_before: f64,
    pub unseen_after: f64,
    pub voxel_size: f64,
    pub knn_d_k: f64,
    pub grid_fingerprints: Vec<u64>,
    pub missing_grid_warnings: Vec<u32>,
    pub skipped_updates: u64,
}

/// Everything the refinement pipeline produced besides the updated scene.
pub struct RefineArtifacts {
    pub report: RefineReport,
    pub grids: Vec<ClassVoxelGrid>,
    pub masks: SemanticMaskSet,
}

/// The full refinement pipeline, in order: render training views, refine
/// masks by reprojection, assign classes from contribution records,
/// backproject class point clouds, size and build the voxel grids once, then
/// optimize the combined loss.
pub fn refine(
    scene: &mut Vec<GaussianSurfel>,
    dataset: &Dataset,
    cfg: &LossConfig,
) -> Result<RefineArtifacts> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::config("refine requires at least one training view"));
    }
    let originals: Vec<ClassImage> = dataset
        .train
        .iter()
        .map(|v| {
            v.mask
                .clone()
                .ok_or_else(|| Error::config("refine requires a mask per training view"))
        })
        .collect::<Result<_>>()?;
    let cams = dataset.train_cams();
    let num_classes = dataset.num_classes;

    // Phase 1: render every training view once with records.
    let opts = RenderOptions {
        supervision: None,
        record_contributions: true,
    };
    let renders: Vec<RenderOutput> = cams
        .iter()
        .map(|cam| render(scene, cam, &opts))
        .collect::<Result<_>>()?;
    let depths: Vec<_> = renders.iter().map(|r| r.depth.clone()).collect();

    // Phase 2: multiview mask refinement.
    let clouds: Vec<_> = (0..cams.len())
        .map(|v| backproject_mask(&cams[v], &depths[v], &originals[v], &renders[v].alpha, v))
        .collect::<Result<_>>()?;
    let masks = reproject_masks(&clouds, &cams, &depths, &originals, num_classes)?;

    // Phase 3: contribution-weighted class assignment from the records.
    let views: Vec<(usize, &RenderOutput, &ClassImage)> = renders
        .iter()
        .enumerate()
        .map(|(i, out)| (i, out, &masks.refined[i]))
        .collect();
    assign_classes_from_records(scene, &views, num_classes)?;

    // Phase 4: semantic renders under the new classes feed the class point
    // clouds and the voxel grids; built once, read-only afterwards.
    let sem_renders: Vec<RenderOutput> = cams
        .iter()
        .map(|cam| render(scene, cam, &RenderOptions::default()))
        .collect::<Result<_>>()?;
    let class_points = build_class_pointclouds(&sem_renders, &cams, num_classes)?;
    let all_points: Vec<Vec3> = class_points.iter().flatten().copied().collect();
    let d_k = knn_mean_distance(
        &all_points,
        cfg.knn_k,
        Some(KNN_QUERY_CAP),
        seeding::derive(cfg.seed, 0x6b6e6e),
    )?;
    let voxel_size = adaptive_voxel_size(d_k, cfg.knn_k)?;
    let mut grids = voxelize(&class_points, voxel_size)?;
    let k_eff = cfg.knn_k.min(all_points.len().saturating_sub(1));
    let meta = GridBuildMeta {
        k: k_eff,
        d_k,
        rho: k_eff as f64 / (4.0 / 3.0 * std::f64::consts::PI * d_k.powi(3)),
    };
    for grid in &mut grids {
        grid.meta = Some(meta);
    }
    let grid_fingerprints: Vec<u64> = grids.iter().map(|g| g.fingerprint()).collect();

    // Diagnostics before optimization; the unseen-mass seed stays fixed so
    // before/after values are comparable.
    let unseen_seed = seeding::derive(cfg.seed, 0x756e7365);
    let psnr_before = mean_test_psnr(scene, &dataset.test)?;
    let occ_eval = occupancy_loss(
        scene,
        &grids,
        cfg.z_samples,
        unseen_seed,
        OccupancyGradient::AlphaOnly,
    )?;
    let unseen_before = occ_eval.value;
    let missing_grid_warnings: Vec<u32> = occ_eval.missing_grid_classes.iter().copied().collect();
    let bound_before = mean_bound(scene, dataset, &masks.refined)?;

    // Phase 5: optimization.
    let mut state = OptimizerState::new(scene.len(), cfg.learning_rates, scene_extent(scene));
    let mut schedule = ViewSchedule::new(dataset.train.len(), seeding::derive(cfg.seed, 0x726566));
    for it in 0..cfg.refine_iters {
        let vi = schedule.next();
        let view = &dataset.train[vi];
        let occ_seed = seeding::derive(cfg.seed, 0x6f6363 ^ it as u64);
        let (_loss, grads) = total_loss(
            scene,
            &view.cam,
            &view.image,
            Some(&masks.refined[vi]),
            Some(&grids),
            cfg,
            occ_seed,
        )?;
        optimizer_step(scene, &grads, &mut state);
    }

    for (grid, fp) in grids.iter().zip(&grid_fingerprints) {
        debug_assert_eq!(grid.fingerprint(), *fp, "voxel grid mutated during refinement");
    }

    let psnr_after = mean_test_psnr(scene, &dataset.test)?;
    let unseen_after = occupancy_loss(
        scene,
        &grids,
        cfg.z_samples,
        unseen_seed,
        OccupancyGradient::AlphaOnly,
    )?
    .value;
    let bound_after = mean_bound(scene, dataset, &masks.refined)?;

    let report = RefineReport {
        iterations: cfg.refine_iters,
        psnr_before,
        psnr_after,
        bound_before,
        bound_after,
        unseen_before,
        unseen_after,
        voxel_size,
        knn_d_k: d_k,
        grid_fingerprints,
        missing_grid_warnings,
        skipped_updates: state.skipped_updates,
    };
    Ok(RefineArtifacts {
        report,
        grids,
        masks,
    })
}

/// Mean boundary loss over all supervised training views.
fn mean_bound(scene: &[GaussianSurfel], dataset: &Dataset, refined: &[ClassImage]) -> Result<f64> {
    let mut sum = 0.0;
    for (view, mask) in dataset.train.iter().zip(refined) {
        let out = render(
            scene,
            &view.cam,
            &RenderOptions {
                supervision: Some(mask),
                record_contributions: false,
            },
        )?;
        let pixels = (view.cam.width * view.cam.height) as f64;
        sum += out.boundary.data().iter().sum::<f64>() / pixels;
    }
    Ok(sum / dataset.train.len().max(1) as f64)
}
