//! File formats: scene text files, camera JSON, PNG channels, raw float
//! channel dumps ("BEAF") and voxel grid caches ("BEAV").
//!
//! The scene file stores the surfel parameters exactly as the optimizer
//! holds them (log-scales in the `su sv` columns and the opacity logit in
//! `alpha`), printed with shortest round-trip formatting, so save/load is
//! the identity at the bit level.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::camera::{Camera, CameraJson};
use crate::error::{Error, Result};
use crate::image2::{BoolImage, ClassImage, ColorImage, ScalarImage};
use crate::occupancy::ClassVoxelGrid;
use crate::surfel::GaussianSurfel;
use crate::{Vec2, Vec3};

const SCENE_HEADER: &str = "BEAGS 1";
const RAW_MAGIC: &[u8; 4] = b"BEAF";
const GRID_MAGIC: &[u8; 4] = b"BEAV";

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

pub fn save_scene(path: &Path, scene: &[GaussianSurfel]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SCENE_HEADER}")?;
    for g in scene {
        writeln!(
            w,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            g.center.x,
            g.center.y,
            g.center.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.log_scale.x,
            g.log_scale.y,
            g.color.x,
            g.color.y,
            g.color.z,
            g.opacity_logit,
            g.class
        )?;
    }
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Vec<GaussianSurfel>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(parse_err(path, 1, "empty file")),
    };
    if header.trim() != SCENE_HEADER {
        return Err(parse_err(
            path,
            1,
            format!("expected header '{SCENE_HEADER}', got '{}'", header.trim()),
        ));
    }
    let mut scene = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 14 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 14 fields, got {}", fields.len()),
            ));
        }
        let mut nums = [0.0f64; 13];
        for (i, f) in fields[..13].iter().enumerate() {
            nums[i] = f
                .parse()
                .map_err(|e| parse_err(path, lineno, format!("field {}: {e}", i + 1)))?;
        }
        let class: u32 = fields[13]
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("class field: {e}")))?;
        scene.push(GaussianSurfel {
            center: Vec3::new(nums[0], nums[1], nums[2]),
            rotation: [nums[3], nums[4], nums[5], nums[6]],
            log_scale: Vec2::new(nums[7], nums[8]),
            color: Vec3::new(nums[9], nums[10], nums[11]),
            opacity_logit: nums[12],
            class,
        });
    }
    Ok(scene)
}

pub fn save_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    let json: Vec<CameraJson> = cams.iter().map(CameraJson::from).collect();
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, &json)?;
    Ok(())
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let r = BufReader::new(File::open(path)?);
    let json: Vec<CameraJson> = serde_json::from_reader(r)?;
    json.into_iter().map(Camera::try_from).collect()
}

pub fn save_color_png(path: &Path, img: &ColorImage) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width(), img.height());
    for (x, y, c) in img.enumerate() {
        let to8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        buf.put_pixel(x, y, image::Rgb([to8(c.x), to8(c.y), to8(c.z)]));
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_color_png(path: &Path) -> Result<ColorImage> {
    let img = image::open(path)?.into_rgb8();
    let mut out = ColorImage::black(img.width(), img.height());
    for (x, y, p) in img.enumerate_pixels() {
        out.set(
            x,
            y,
            Vec3::new(
                p[0] as f64 / 255.0,
                p[1] as f64 / 255.0,
                p[2] as f64 / 255.0,
            ),
        );
    }
    Ok(out)
}

/// Class masks as 8-bit grayscale where the pixel value is the class id.
pub fn save_class_png(path: &Path, mask: &ClassImage) -> Result<()> {
    let mut buf = image::GrayImage::new(mask.width(), mask.height());
    for (x, y, &c) in mask.enumerate() {
        if c != crate::image2::EMPTY_CLASS && c > 255 {
            return Err(Error::data(format!("class id {c} exceeds 8-bit mask range")));
        }
        let v = if c == crate::image2::EMPTY_CLASS { 0 } else { c as u8 };
        buf.put_pixel(x, y, image::Luma([v]));
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_class_png(path: &Path) -> Result<ClassImage> {
    let img = image::open(path)?.into_luma8();
    let mut out = ClassImage::filled(img.width(), img.height(), 0);
    for (x, y, p) in img.enumerate_pixels() {
        out.set(x, y, p[0] as u32);
    }
    Ok(out)
}

/// Binary masks use 0 for background and the class id elsewhere.
pub fn save_bool_png(path: &Path, mask: &BoolImage, class: u32) -> Result<()> {
    save_class_png(path, &mask.map(|&b| if b { class } else { 0 }))
}

pub fn load_bool_png(path: &Path) -> Result<BoolImage> {
    Ok(load_class_png(path)?.map(|&c| c != 0))
}

/// Raw float channel: magic "BEAF", u32 width, u32 height (little endian),
/// then row-major f32s.
pub fn save_raw_channel(path: &Path, img: &ScalarImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RAW_MAGIC)?;
    w.write_u32::<LittleEndian>(img.width())?;
    w.write_u32::<LittleEndian>(img.height())?;
    for &v in img.data() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

pub fn load_raw_channel(path: &Path) -> Result<ScalarImage> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RAW_MAGIC {
        return Err(parse_err(path, 1, "bad magic, expected BEAF"));
    }
    let w = r.read_u32::<LittleEndian>()?;
    let h = r.read_u32::<LittleEndian>()?;
    let mut data = Vec::with_capacity((w * h) as usize);
    for _ in 0..w * h {
        data.push(r.read_f32::<LittleEndian>()? as f64);
    }
    Ok(ScalarImage::from_vec(w, h, data))
}

/// Voxel grid cache: magic "BEAV", u32 class id, f64 voxel size, f64[3]
/// origin, u64 count, then count sorted i32[3] keys. Little endian.
pub fn save_grid(path: &Path, grid: &ClassVoxelGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GRID_MAGIC)?;
    w.write_u32::<LittleEndian>(grid.class)?;
    w.write_f64::<LittleEndian>(grid.voxel_size)?;
    for c in [grid.origin.x, grid.origin.y, grid.origin.z] {
        w.write_f64::<LittleEndian>(c)?;
    }
    let keys = grid.sorted_keys();
    w.write_u64::<LittleEndian>(keys.len() as u64)?;
    for key in keys {
        for c in key {
            w.write_i32::<LittleEndian>(c)?;
        }
    }
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<ClassVoxelGrid> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GRID_MAGIC {
        return Err(parse_err(path, 1, "bad magic, expected BEAV"));
    }
    let class = r.read_u32::<LittleEndian>()?;
    let voxel_size = r.read_f64::<LittleEndian>()?;
    let origin = Vec3::new(
        r.read_f64::<LittleEndian>()?,
        r.read_f64::<LittleEndian>()?,
        r.read_f64::<LittleEndian>()?,
    );
    let count = r.read_u64::<LittleEndian>()?;
    let mut occupied = HashSet::with_capacity(count as usize);
    for _ in 0..count {
        let key = [
            r.read_i32::<LittleEndian>()?,
            r.read_i32::<LittleEndian>()?,
            r.read_i32::<LittleEndian>()?,
        ];
        occupied.insert(key);
    }
    Ok(ClassVoxelGrid::new(class, voxel_size, origin, occupied))
}

pub fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}
