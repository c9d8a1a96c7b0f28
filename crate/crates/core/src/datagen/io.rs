//! Dataset store: `scene_<id>/cam_<c>/{ambient,olat_<k>}.pfm` plus `scene_<id>/meta.json`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::olat::{CameraCapture, OlatScene};
use super::render::{LightProjection, Scene};
use crate::error::io_err;
use crate::image::Image;
use crate::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

/// Little-endian RGB portable float map, rows stored bottom to top.
pub fn write_pfm<W: Write>(w: &mut W, img: &Image) -> std::io::Result<()> {
    let (width, height) = img.dims();
    write!(w, "PF\n{width} {height}\n-1.0\n")?;
    let mut buf = Vec::with_capacity(width * height * 12);
    for y in (0..height).rev() {
        for v in &img.data()[y * width * 3..(y + 1) * width * 3] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn read_pfm<R: Read>(r: R, path: &Path) -> Result<Image> {
    let fmt = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
        line.clear();
        r.read_line(&mut line).map_err(io_err(path))?;
        Ok(line.trim().to_string())
    };
    let magic = next_line(&mut r)?;
    match magic.as_str() {
        "PF" => {}
        "P6" | "P5" | "P3" => return Err(fmt("8-bit image payload where a float map is declared".into())),
        other => return Err(fmt(format!("not an RGB float map (header {other:?})"))),
    }
    let dims = next_line(&mut r)?;
    let parsed: Vec<usize> = dims.split_whitespace().filter_map(|s| s.parse().ok()).collect();
    let [width, height] = parsed[..] else {
        return Err(fmt(format!("bad dimensions line {dims:?}")));
    };
    let scale: f64 = next_line(&mut r)?.parse().map_err(|_| fmt("bad scale line".into()))?;
    if scale >= 0.0 {
        return Err(fmt("big-endian float maps are not supported".into()));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io_err(path))?;
    let expected = width * height * 12;
    if payload.len() == width * height * 3 {
        return Err(fmt("8-bit image payload where a float map is declared".into()));
    }
    if payload.len() != expected {
        return Err(fmt(format!("truncated payload: {} bytes, expected {expected}", payload.len())));
    }
    let mut data = vec![0.0f32; width * height * 3];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let (row, rest) = (i / (width * 3), i % (width * 3));
        data[(height - 1 - row) * width * 3 + rest] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
    }
    Image::new(width, height, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub version: u32,
    pub id: String,
    pub exposure: f64,
    pub scene: Scene,
    /// `projections[camera][light]`.
    pub projections: Vec<Vec<LightProjection>>,
}

fn scene_dir(root: &Path, id: &str) -> PathBuf {
    root.join(format!("scene_{id}"))
}

pub fn write_scene(root: &Path, olat: &OlatScene) -> Result<()> {
    let dir = scene_dir(root, &olat.id);
    for (c, cap) in olat.captures.iter().enumerate() {
        let cam_dir = dir.join(format!("cam_{c}"));
        fs::create_dir_all(&cam_dir).map_err(io_err(&cam_dir))?;
        let write = |name: String, img: &Image| -> Result<()> {
            let path = cam_dir.join(name);
            let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
            write_pfm(&mut f, img).and_then(|_| f.flush()).map_err(io_err(&path))
        };
        write("ambient.pfm".into(), &cap.ambient)?;
        for (k, img) in cap.olat.iter().enumerate() {
            write(format!("olat_{k}.pfm"), img)?;
        }
    }
    let meta = SceneMeta {
        version: DATASET_VERSION,
        id: olat.id.clone(),
        exposure: olat.exposure,
        scene: olat.scene.clone(),
        projections: olat.projections.clone(),
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(io_err(&path))
}

pub fn read_scene(dir: &Path) -> Result<OlatScene> {
    let path = dir.join("meta.json");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let meta: SceneMeta =
        serde_json::from_slice(&bytes).map_err(|e| Error::Format { path: path.clone(), reason: e.to_string() })?;
    if meta.version != DATASET_VERSION {
        return Err(Error::Version { found: meta.version, expected: DATASET_VERSION });
    }
    let n_light = meta.scene.lights.len();
    let mut captures = Vec::with_capacity(meta.scene.cameras.len());
    for c in 0..meta.scene.cameras.len() {
        let cam_dir = dir.join(format!("cam_{c}"));
        let load = |name: String, what: String| -> Result<Image> {
            let path = cam_dir.join(&name);
            let file = fs::File::open(&path).map_err(|_| Error::Missing {
                scene: meta.id.clone(),
                camera: c,
                what,
                path: path.clone(),
            })?;
            read_pfm(file, &path)
        };
        let ambient = load("ambient.pfm".into(), "ambient".into())?;
        let olat = (0..n_light)
            .map(|k| load(format!("olat_{k}.pfm"), format!("light {k}")))
            .collect::<Result<Vec<_>>>()?;
        captures.push(CameraCapture { ambient, olat });
    }
    Ok(OlatScene { id: meta.id, scene: meta.scene, exposure: meta.exposure, captures, projections: meta.projections })
}

pub fn write_dataset(root: &Path, scenes: &[OlatScene]) -> Result<()> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    scenes.iter().try_for_each(|s| write_scene(root, s))
}

/// Reads every `scene_*` directory under `root`, sorted by name.
pub fn read_dataset(root: &Path) -> Result<Vec<OlatScene>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("scene_")))
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_scene(d)).collect()
}
