//! On-disk formats: the "RAGS" tensor container, the scene directory
//! layout, and a CSV exporter for 2-D slices.
//!
//! Container layout, little-endian throughout:
//!
//! ```text
//! magic  b"RAGS"      4 bytes
//! version u16         currently 1
//! rank    u16         1..=4
//! dims    u32 * rank
//! payload f32 * prod(dims), row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::radar::RadarCloud;
use crate::scene::{Box3D, Scene, SceneSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RAGS";
pub const VERSION: u16 = 1;

pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    if tensor.rank() == 0 || tensor.rank() > 4 {
        return Err(Error::DimensionMismatch(format!(
            "container supports rank 1..=4, got {}",
            tensor.rank()
        )));
    }
    let mut buf = Vec::with_capacity(8 + 4 * tensor.rank() + 4 * tensor.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensor.rank() as u16).to_le_bytes());
    for &d in tensor.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let need = |expected: usize| -> Error {
        Error::TruncatedFile {
            expected: expected as u64,
            actual: bytes.len() as u64,
        }
    };
    if bytes.len() < 8 {
        return Err(need(8));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::Parse(format!("container rank {rank} out of range")));
    }
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(need(header));
    }
    let mut dims = Vec::with_capacity(rank);
    for r in 0..rank {
        let off = 8 + 4 * r;
        dims.push(u32::from_le_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]) as usize);
    }
    let count: usize = dims.iter().product();
    let expected = header + 4 * count;
    if bytes.len() != expected {
        return Err(need(expected));
    }
    let mut data = Vec::with_capacity(count);
    for k in 0..count {
        let off = header + 4 * k;
        let v = f32::from_le_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]);
        data.push(v as f64);
    }
    Tensor::from_vec(&dims, data)
}

/// Human-readable portion of an on-disk scene.
#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    seed: u64,
    spec: SceneSpec,
    camera: CameraModel,
    boxes: Vec<Box3D>,
    radar: RadarCloud,
}

pub const SCENE_MANIFEST: &str = "scene.toml";
const GT_DEPTH: &str = "gt_depth.rags";
const GT_SEG: &str = "gt_seg.rags";
const GT_OCCUPANCY: &str = "gt_occupancy.rags";

/// Write a scene as a directory: structured text for boxes/camera/radar,
/// tensor containers for the rasters.
pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir)?;
    let file = SceneFile {
        seed: scene.seed,
        spec: scene.spec.clone(),
        camera: scene.camera.clone(),
        boxes: scene.boxes.clone(),
        radar: scene.radar.clone(),
    };
    let text = toml::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join(SCENE_MANIFEST), text)?;
    save_tensor(&dir.join(GT_DEPTH), &scene.gt_depth)?;
    save_tensor(&dir.join(GT_SEG), &scene.gt_seg)?;
    save_tensor(&dir.join(GT_OCCUPANCY), &scene.gt_occupancy)?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let manifest = dir.join(SCENE_MANIFEST);
    let mut text = String::new();
    fs::File::open(&manifest)?.read_to_string(&mut text)?;
    let file: SceneFile = toml::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {}", manifest.display(), e)))?;
    Ok(Scene {
        seed: file.seed,
        spec: file.spec,
        camera: file.camera,
        boxes: file.boxes,
        radar: file.radar,
        gt_depth: load_tensor(&dir.join(GT_DEPTH))?,
        gt_seg: load_tensor(&dir.join(GT_SEG))?,
        gt_occupancy: load_tensor(&dir.join(GT_OCCUPANCY))?,
    })
}

/// Export a 2-D slice as CSV. Rank-2 tensors export directly; rank-3 tensors
/// export the given channel.
pub fn write_csv_slice(path: &Path, tensor: &Tensor, channel: usize) -> Result<()> {
    let mut out = String::new();
    match tensor.rank() {
        2 => {
            let (rows, cols) = (tensor.dims()[0], tensor.dims()[1]);
            for i in 0..rows {
                let line: Vec<String> = (0..cols).map(|j| tensor.at2(i, j).to_string()).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
        }
        3 => {
            let (rows, cols, ch) = (tensor.dims()[0], tensor.dims()[1], tensor.dims()[2]);
            if channel >= ch {
                return Err(Error::DimensionMismatch(format!(
                    "channel {channel} out of range for {ch} channels"
                )));
            }
            for i in 0..rows {
                let line: Vec<String> = (0..cols)
                    .map(|j| tensor.at3(i, j, channel).to_string())
                    .collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
        }
        r => {
            return Err(Error::DimensionMismatch(format!(
                "csv export supports rank 2 or 3, got {r}"
            )))
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Paths of every `.rags` file under `dir`, sorted for stable reporting.
pub fn list_rags_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "rags") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
