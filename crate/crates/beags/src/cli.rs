//! Pipeline command line: gen | pretrain | refine | render | extract | eval
//! | sweep. Every run writes the resolved configuration next to its outputs
//! and is byte-reproducible for a fixed seed at any thread count.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image2::{ClassImage, EMPTY_CLASS};
use crate::io;
use crate::metrics::{
    eval_extracted, eval_rendered, format_report_table, GtMasks, MetricReport,
};
use crate::raster::{render, render_class_subset, RenderOptions};
use crate::scenegen::{self, SceneSpec};
use crate::seeding;
use crate::semantics::label_probability_maps;
use crate::trainer::{self, Dataset, LossConfig, TrainView};

#[derive(Parser)]
#[command(
    name = "beags",
    about = "Boundary- and occupancy-aware Gaussian surfel scene segmentation",
    version
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON file with loss-config overrides (partial files allowed).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 forces serial execution.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Generate a benchmark dataset from a scene-spec JSON file.
    Gen {
        /// Scene spec JSON; omit to use the built-in benchmark.
        spec: Option<PathBuf>,
        /// Also write masks corrupted at this fraction.
        #[arg(long)]
        corrupt: Option<f64>,
    },
    /// RGB pretraining on a generated dataset.
    Pretrain {
        dataset: PathBuf,
        /// Initial scene; defaults to <dataset>/scene_init.beags.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Mask reprojection, class assignment, voxel grids, then refinement.
    Refine {
        dataset: PathBuf,
        /// Pretrained scene checkpoint.
        #[arg(long)]
        scene: PathBuf,
        /// Use corrupted masks (<dataset>/masks_corrupted) as input.
        #[arg(long)]
        corrupted_masks: bool,
        /// Skip writing per-class label probability maps.
        #[arg(long)]
        no_probmaps: bool,
    },
    /// Render color/semantic PNGs and raw depth/alpha/boundary channels.
    Render {
        scene: PathBuf,
        cameras: PathBuf,
        /// Optional directory of class masks for the boundary channel.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Per-class subset renders.
    Extract {
        scene: PathBuf,
        cameras: PathBuf,
        /// Class id; omit to extract every class present.
        #[arg(long)]
        class: Option<u32>,
    },
    /// Extracted + rendered metrics against dataset ground truth.
    Eval {
        scene: PathBuf,
        dataset: PathBuf,
    },
    /// Refine/eval grid over k and Z, one CSV row per run.
    Sweep {
        dataset: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',', default_values_t = vec![250, 500, 1000, 2000, 3000, 4000, 5000])]
        ks: Vec<usize>,
        /// Comma-separated Z values.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 5, 10, 20, 50])]
        zs: Vec<usize>,
    },
}

#[derive(Serialize)]
struct EffectiveConfig<'a> {
    subcommand: String,
    loss: &'a LossConfig,
    seed: u64,
    threads: usize,
    inputs: Vec<String>,
    out: String,
}

/// Entry point used by the `beags` binary; returns the process exit code.
/// 0 success, 1 usage, 2 data/parse, 3 numerical failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Keep clap's rendering (help/version print to stdout and are
            // not failures) but fold all usage errors into exit code 1.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { 0 } else { 1 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => 3,
                _ => 2,
            }
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let threads = cli.common.threads.unwrap_or(0);
    if threads > 0 {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let mut cfg: LossConfig = match &cli.common.config {
        Some(path) => io::load_json(path)?,
        None => LossConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = cli.common.out.clone();
    std::fs::create_dir_all(&out)?;

    let (name, inputs) = describe(&cli.command);
    io::save_json(
        &out.join("effective_config.json"),
        &EffectiveConfig {
            subcommand: name,
            loss: &cfg,
            seed: cfg.seed,
            threads,
            inputs,
            out: out.display().to_string(),
        },
    )?;

    match cli.command {
        Command::Gen { spec, corrupt } => cmd_gen(&out, &cfg, spec.as_deref(), corrupt),
        Command::Pretrain { dataset, init } => cmd_pretrain(&out, &cfg, &dataset, init.as_deref()),
        Command::Refine {
            dataset,
            scene,
            corrupted_masks,
            no_probmaps,
        } => cmd_refine(&out, &cfg, &dataset, &scene, corrupted_masks, !no_probmaps),
        Command::Render {
            scene,
            cameras,
            masks,
        } => cmd_render(&out, &scene, &cameras, masks.as_deref()),
        Command::Extract {
            scene,
            cameras,
            class,
        } => cmd_extract(&out, &cfg, &scene, &cameras, class),
        Command::Eval { scene, dataset } => cmd_eval(&out, &cfg, &scene, &dataset),
        Command::Sweep {
            dataset,
            scene,
            ks,
            zs,
        } => cmd_sweep(&out, &cfg, &dataset, &scene, &ks, &zs),
    }
}

fn describe(cmd: &Command) -> (String, Vec<String>) {
    let p = |p: &Path| p.display().to_string();
    match cmd {
        Command::Gen { spec, .. } => (
            "gen".into(),
            spec.iter().map(|s| p(s)).collect(),
        ),
        Command::Pretrain { dataset, init } => (
            "pretrain".into(),
            std::iter::once(p(dataset))
                .chain(init.iter().map(|i| p(i)))
                .collect(),
        ),
        Command::Refine { dataset, scene, .. } => ("refine".into(), vec![p(dataset), p(scene)]),
        Command::Render { scene, cameras, .. } => ("render".into(), vec![p(scene), p(cameras)]),
        Command::Extract { scene, cameras, .. } => ("extract".into(), vec![p(scene), p(cameras)]),
        Command::Eval { scene, dataset } => ("eval".into(), vec![p(scene), p(dataset)]),
        Command::Sweep { dataset, scene, .. } => ("sweep".into(), vec![p(dataset), p(scene)]),
    }
}

fn view_name(prefix: &str, i: usize) -> String {
    format!("{prefix}_{i:03}.png")
}

fn cmd_gen(out: &Path, cfg: &LossConfig, spec: Option<&Path>, corrupt: Option<f64>) -> Result<()> {
    let spec: SceneSpec = match spec {
        Some(path) => io::load_json(path)?,
        None => scenegen::default_benchmark(cfg.seed),
    };
    let bench = scenegen::build_benchmark(&spec, cfg.alpha_threshold)?;
    io::save_json(&out.join("scene_spec.json"), &spec)?;
    io::save_scene(&out.join("scene_oracle.beags"), &bench.oracle_scene)?;
    io::save_scene(&out.join("scene_init.beags"), &bench.init_scene)?;
    io::save_json(&out.join("oracle_table.json"), &bench.table)?;
    io::save_cameras(&out.join("cameras_train.json"), &bench.train_cams)?;
    io::save_cameras(&out.join("cameras_test.json"), &bench.test_cams)?;

    let images = out.join("images");
    let masks = out.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    for (i, cam) in bench.train_cams.iter().enumerate() {
        let rendered = render(&bench.oracle_scene, cam, &RenderOptions::default())?;
        io::save_color_png(&images.join(view_name("train", i)), &rendered.color)?;
        io::save_class_png(&masks.join(view_name("train", i)), &bench.train_masks[i])?;
    }
    for (i, cam) in bench.test_cams.iter().enumerate() {
        let rendered = render(&bench.oracle_scene, cam, &RenderOptions::default())?;
        io::save_color_png(&images.join(view_name("test", i)), &rendered.color)?;
    }

    let gt = out.join("gt");
    std::fs::create_dir_all(gt.join("rendered"))?;
    for (i, mask) in bench.gt_test.rendered.iter().enumerate() {
        io::save_class_png(&gt.join("rendered").join(view_name("test", i)), mask)?;
    }
    for (ci, views) in bench.gt_test.extracted.iter().enumerate() {
        let class = ci as u32 + 1;
        let dir = gt.join("extracted").join(format!("class_{class}"));
        std::fs::create_dir_all(&dir)?;
        for (i, mask) in views.iter().enumerate() {
            io::save_bool_png(&dir.join(view_name("test", i)), mask, class)?;
        }
    }
    // Oracle rendered masks of the training views; reprojection experiments
    // score against these.
    let gt_train = gt.join("rendered_train");
    std::fs::create_dir_all(&gt_train)?;
    for (i, mask) in bench.gt_train.rendered.iter().enumerate() {
        io::save_class_png(&gt_train.join(view_name("train", i)), mask)?;
    }

    if let Some(fraction) = corrupt {
        let corrupted = scenegen::corrupt_masks(
            &bench.train_masks,
            fraction,
            seeding::derive(spec.seed, 0x636f72),
        )?;
        let dir = out.join("masks_corrupted");
        std::fs::create_dir_all(&dir)?;
        for (i, mask) in corrupted.iter().enumerate() {
            io::save_class_png(&dir.join(view_name("train", i)), mask)?;
        }
    }
    println!(
        "gen: {} surfels ({} spikes), {} train / {} test views -> {}",
        bench.oracle_scene.len(),
        bench.table.spike.iter().filter(|s| **s).count(),
        bench.train_cams.len(),
        bench.test_cams.len(),
        out.display()
    );
    Ok(())
}

/// Loads a generated dataset directory. `mask_dir` picks the training mask
/// variant (clean or corrupted).
pub fn load_dataset(dir: &Path, mask_dir: &str) -> Result<Dataset> {
    let train_cams = io::load_cameras(&dir.join("cameras_train.json"))?;
    let test_cams = io::load_cameras(&dir.join("cameras_test.json"))?;
    let mut num_classes = 1;
    let mut train = Vec::new();
    for (i, cam) in train_cams.into_iter().enumerate() {
        let image = io::load_color_png(&dir.join("images").join(view_name("train", i)))?;
        let mask_path = dir.join(mask_dir).join(view_name("train", i));
        let mask = if mask_path.exists() {
            let m = io::load_class_png(&mask_path)?;
            num_classes = num_classes.max(m.data().iter().copied().max().unwrap_or(0) + 1);
            Some(m)
        } else {
            None
        };
        train.push(TrainView { cam, image, mask });
    }
    let mut test = Vec::new();
    for (i, cam) in test_cams.into_iter().enumerate() {
        let image = io::load_color_png(&dir.join("images").join(view_name("test", i)))?;
        test.push(TrainView {
            cam,
            image,
            mask: None,
        });
    }
    if train.is_empty() {
        return Err(Error::data(format!(
            "no training views found in {}",
            dir.display()
        )));
    }
    Ok(Dataset {
        train,
        test,
        num_classes,
    })
}

fn cmd_pretrain(out: &Path, cfg: &LossConfig, dataset: &Path, init: Option<&Path>) -> Result<()> {
    let data = load_dataset(dataset, "masks")?;
    let init_path = init
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dataset.join("scene_init.beags"));
    let mut scene = io::load_scene(&init_path)?;
    let report = trainer::pretrain(&mut scene, &data, cfg)?;
    io::save_scene(&out.join("scene_pretrained.beags"), &scene)?;
    io::save_json(&out.join("pretrain_report.json"), &report)?;
    println!(
        "pretrain: {} iterations, final rgb loss {:.5}, held-out psnr {:.2} dB",
        report.iterations,
        report.final_rgb_loss,
        report.psnr_history.last().map(|p| p.1).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_refine(
    out: &Path,
    cfg: &LossConfig,
    dataset: &Path,
    scene_path: &Path,
    corrupted_masks: bool,
    probmaps: bool,
) -> Result<()> {
    let mask_dir = if corrupted_masks {
        "masks_corrupted"
    } else {
        "masks"
    };
    let data = load_dataset(dataset, mask_dir)?;
    if data.train.iter().any(|v| v.mask.is_none()) {
        return Err(Error::config(format!(
            "refine needs masks under {}/{}",
            dataset.display(),
            mask_dir
        )));
    }
    let mut scene = io::load_scene(scene_path)?;
    let artifacts = trainer::refine(&mut scene, &data, cfg)?;
    io::save_scene(&out.join("scene_refined.beags"), &scene)?;
    io::save_json(&out.join("refine_report.json"), &artifacts.report)?;
    for grid in &artifacts.grids {
        io::save_grid(&out.join(format!("grid_class_{}.beav", grid.class)), grid)?;
    }
    let refined_dir = out.join("masks_refined");
    std::fs::create_dir_all(&refined_dir)?;
    for (i, mask) in artifacts.masks.refined.iter().enumerate() {
        io::save_class_png(&refined_dir.join(view_name("train", i)), mask)?;
    }
    if probmaps {
        let dir = out.join("probmaps");
        std::fs::create_dir_all(&dir)?;
        for (v, stack) in artifacts.masks.votes.iter().enumerate() {
            for (class, map) in label_probability_maps(stack).iter().enumerate() {
                let gray = map.map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u32);
                io::save_class_png(
                    &dir.join(format!("view_{v:03}_class_{class}.png")),
                    &gray,
                )?;
            }
        }
    }
    println!(
        "refine: psnr {:.2} -> {:.2} dB, bound {:.5} -> {:.5}, unseen {:.6} -> {:.6}",
        artifacts.report.psnr_before,
        artifacts.report.psnr_after,
        artifacts.report.bound_before,
        artifacts.report.bound_after,
        artifacts.report.unseen_before,
        artifacts.report.unseen_after
    );
    Ok(())
}

fn load_mask_dir(dir: &Path, count: usize, prefix: &str) -> Result<Vec<ClassImage>> {
    (0..count)
        .map(|i| io::load_class_png(&dir.join(view_name(prefix, i))))
        .collect()
}

fn cmd_render(out: &Path, scene: &Path, cameras: &Path, masks: Option<&Path>) -> Result<()> {
    let scene = io::load_scene(scene)?;
    let cams = io::load_cameras(cameras)?;
    let masks = match masks {
        Some(dir) => Some(load_mask_dir(dir, cams.len(), "train")?),
        None => None,
    };
    for (i, cam) in cams.iter().enumerate() {
        let supervision = masks.as_ref().map(|m| &m[i]);
        let opts = RenderOptions {
            supervision,
            record_contributions: false,
        };
        let rendered = render(&scene, cam, &opts)?;
        io::save_color_png(&out.join(format!("render_{i:03}.png")), &rendered.color)?;
        let semantic = rendered
            .semantic
            .map(|&c| if c == EMPTY_CLASS { 0 } else { c });
        io::save_class_png(&out.join(format!("semantic_{i:03}.png")), &semantic)?;
        io::save_raw_channel(&out.join(format!("depth_{i:03}.beaf")), &rendered.depth)?;
        io::save_raw_channel(&out.join(format!("alpha_{i:03}.beaf")), &rendered.alpha)?;
        io::save_raw_channel(&out.join(format!("boundary_{i:03}.beaf")), &rendered.boundary)?;
    }
    println!("render: {} views -> {}", cams.len(), out.display());
    Ok(())
}

fn cmd_extract(
    out: &Path,
    cfg: &LossConfig,
    scene: &Path,
    cameras: &Path,
    class: Option<u32>,
) -> Result<()> {
    let scene = io::load_scene(scene)?;
    let cams = io::load_cameras(cameras)?;
    let classes: Vec<u32> = match class {
        Some(c) => vec![c],
        None => {
            let mut cs: Vec<u32> = scene.iter().map(|g| g.class).filter(|&c| c > 0).collect();
            cs.sort_unstable();
            cs.dedup();
            cs
        }
    };
    for &c in &classes {
        let dir = out.join(format!("class_{c}"));
        std::fs::create_dir_all(&dir)?;
        for (i, cam) in cams.iter().enumerate() {
            let rendered = render_class_subset(&scene, cam, c, &RenderOptions::default())?;
            io::save_color_png(&dir.join(format!("color_{i:03}.png")), &rendered.color)?;
            io::save_raw_channel(&dir.join(format!("alpha_{i:03}.beaf")), &rendered.alpha)?;
            let mask = rendered.alpha.map(|&a| a >= cfg.alpha_threshold);
            io::save_bool_png(&dir.join(format!("mask_{i:03}.png")), &mask, c)?;
        }
    }
    println!(
        "extract: classes {:?}, {} views -> {}",
        classes,
        cams.len(),
        out.display()
    );
    Ok(())
}

/// Loads the evaluation ground truth a `gen` run wrote.
pub fn load_gt_masks(dataset: &Path, views: usize, num_classes: u32) -> Result<GtMasks> {
    let gt = dataset.join("gt");
    let mut per_class = Vec::new();
    for class in 1..num_classes {
        let dir = gt.join("extracted").join(format!("class_{class}"));
        let mut masks = Vec::new();
        for i in 0..views {
            let path = dir.join(view_name("test", i));
            masks.push(if path.exists() {
                Some(io::load_bool_png(&path)?)
            } else {
                None
            });
        }
        per_class.push(masks);
    }
    Ok(GtMasks { per_class })
}

pub fn load_gt_rendered(dataset: &Path, views: usize, num_classes: u32) -> Result<GtMasks> {
    let dir = dataset.join("gt").join("rendered");
    let mut rendered = Vec::new();
    for i in 0..views {
        rendered.push(io::load_class_png(&dir.join(view_name("test", i)))?);
    }
    let per_class = (1..num_classes)
        .map(|class| {
            rendered
                .iter()
                .map(|m| Some(m.map(|&c| c == class)))
                .collect()
        })
        .collect();
    Ok(GtMasks { per_class })
}

fn dataset_num_classes(dataset: &Path) -> Result<u32> {
    let spec: SceneSpec = io::load_json(&dataset.join("scene_spec.json"))?;
    Ok(spec.num_classes())
}

fn cmd_eval(out: &Path, cfg: &LossConfig, scene_path: &Path, dataset: &Path) -> Result<()> {
    let scene = io::load_scene(scene_path)?;
    let test_cams = io::load_cameras(&dataset.join("cameras_test.json"))?;
    let num_classes = dataset_num_classes(dataset)?;
    let gt_ex = load_gt_masks(dataset, test_cams.len(), num_classes)?;
    let gt_re = load_gt_rendered(dataset, test_cams.len(), num_classes)?;
    let report = MetricReport {
        scene: scene_path.display().to_string(),
        extracted: eval_extracted(&scene, &test_cams, &gt_ex, cfg.alpha_threshold)?,
        rendered: eval_rendered(&scene, &test_cams, &gt_re)?,
        psnr_before: None,
        psnr_after: None,
        unseen_before: None,
        unseen_after: None,
    };
    io::save_json(&out.join("metric_report.json"), &report)?;
    let table = format_report_table(&report);
    std::fs::write(out.join("metric_report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    parameter: String,
    value: usize,
    psnr: f64,
    extracted_iou: f64,
    extracted_biou: f64,
}

fn cmd_sweep(
    out: &Path,
    cfg: &LossConfig,
    dataset: &Path,
    scene_path: &Path,
    ks: &[usize],
    zs: &[usize],
) -> Result<()> {
    let data = load_dataset(dataset, "masks")?;
    let base_scene = io::load_scene(scene_path)?;
    let test_cams: Vec<_> = data.test.iter().map(|v| v.cam.clone()).collect();
    let num_classes = dataset_num_classes(dataset)?;
    let gt_ex = load_gt_masks(dataset, test_cams.len(), num_classes)?;

    let mut rows: Vec<SweepRow> = Vec::new();
    let mut run = |parameter: &str, value: usize, cfg: LossConfig| -> Result<()> {
        let mut scene = base_scene.clone();
        trainer::refine(&mut scene, &data, &cfg)?;
        let scores = eval_extracted(&scene, &test_cams, &gt_ex, cfg.alpha_threshold)?;
        let psnr = trainer::mean_test_psnr(&scene, &data.test)?;
        rows.push(SweepRow {
            parameter: parameter.to_string(),
            value,
            psnr,
            extracted_iou: scores.mean_iou,
            extracted_biou: scores.mean_biou,
        });
        println!(
            "sweep {parameter}={value}: psnr {psnr:.2}, iou {:.4}, biou {:.4}",
            scores.mean_iou, scores.mean_biou
        );
        Ok(())
    };

    for &k in ks {
        run("k", k, LossConfig { knn_k: k, ..cfg.clone() })?;
    }
    for &z in zs {
        run("Z", z, LossConfig { z_samples: z, ..cfg.clone() })?;
    }

    let mut csv = String::from("parameter,value,psnr,extracted_iou,extracted_biou\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.parameter, row.value, row.psnr, row.extracted_iou, row.extracted_biou
        ));
    }
    std::fs::write(out.join("sweep.csv"), csv)?;
    io::save_json(&out.join("sweep.json"), &rows)?;
    Ok(())
}
