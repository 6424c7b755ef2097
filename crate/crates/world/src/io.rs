//! JSON-lines episode files with PPM frames and PGM instance masks alongside.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::episode::{Episode, EpisodeFrame, FrameAnnotation, InstanceAnnotation, Subset};
use crate::error::{Result, WorldError};
use crate::scene::CANVAS;

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    noun: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    relevant: bool,
    mask_file: String,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    episode: String,
    seed: u64,
    subset: Subset,
    layout: Option<usize>,
    t: usize,
    task: String,
    action: [f64; 7],
    proprio: [f64; 4],
    frame_file: String,
    instances: Vec<InstanceRecord>,
}

fn sidecar_err(path: &Path, e: impl std::fmt::Display) -> WorldError {
    WorldError::Sidecar {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn frame_file(name: &str, t: usize) -> String {
    format!("{name}/frame_{t:03}.ppm")
}

fn mask_file(name: &str, t: usize, id: &str) -> String {
    format!("{name}/mask_{t:03}_{id}.pgm")
}

/// Writes `<dir>/<name>.jsonl` plus its `<dir>/<name>/` sidecars; returns the JSONL path.
pub fn save_episode(dir: &Path, ep: &Episode) -> Result<PathBuf> {
    fs::create_dir_all(dir.join(&ep.name))?;
    let path = dir.join(format!("{}.jsonl", ep.name));
    let mut out = BufWriter::new(fs::File::create(&path)?);
    for f in &ep.frames {
        let ann = &f.ann;
        let ff = frame_file(&ep.name, ann.t);
        write_ppm(&dir.join(&ff), CANVAS, CANVAS, f.rgb.clone())?;
        let mut instances = Vec::with_capacity(ann.instances.len());
        for inst in &ann.instances {
            let mf = mask_file(&ep.name, ann.t, &inst.id);
            let bytes = inst.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
            write_pgm(&dir.join(&mf), CANVAS, CANVAS, bytes)?;
            instances.push(InstanceRecord {
                id: inst.id.clone(),
                noun: inst.noun.clone(),
                bbox: inst.bbox,
                relevant: inst.relevant,
                mask_file: mf,
            });
        }
        let rec = FrameRecord {
            episode: ep.name.clone(),
            seed: ep.seed,
            subset: ep.subset,
            layout: ep.layout,
            t: ann.t,
            task: ann.task.clone(),
            action: ann.action,
            proprio: ann.proprio,
            frame_file: ff,
            instances,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(path)
}

fn read_rgb(path: &Path) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| sidecar_err(path, e))?;
    if img.width() as usize != CANVAS || img.height() as usize != CANVAS {
        return Err(sidecar_err(path, format!("expected {CANVAS}x{CANVAS}, found {}x{}", img.width(), img.height())));
    }
    Ok(img.into_rgb8().into_raw())
}

fn read_mask(path: &Path) -> Result<Vec<bool>> {
    let img = image::open(path).map_err(|e| sidecar_err(path, e))?;
    if img.width() as usize != CANVAS || img.height() as usize != CANVAS {
        return Err(sidecar_err(path, "mask extent mismatch"));
    }
    Ok(img.into_luma8().into_raw().into_iter().map(|b| b >= 128).collect())
}

/// Parses one episode file; malformed lines are reported with their 1-based line number.
pub fn load_episode(path: &Path) -> Result<Episode> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(fs::File::open(path)?);
    let mut ep: Option<Episode> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| WorldError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let instances = rec
            .instances
            .into_iter()
            .map(|r| {
                Ok(InstanceAnnotation {
                    mask: read_mask(&dir.join(&r.mask_file))?,
                    id: r.id,
                    noun: r.noun,
                    bbox: r.bbox,
                    relevant: r.relevant,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let frame = EpisodeFrame {
            rgb: read_rgb(&dir.join(&rec.frame_file))?,
            ann: FrameAnnotation {
                t: rec.t,
                task: rec.task.clone(),
                action: rec.action,
                proprio: rec.proprio,
                instances,
            },
        };
        let ep = ep.get_or_insert_with(|| Episode {
            name: rec.episode.clone(),
            seed: rec.seed,
            subset: rec.subset,
            layout: rec.layout,
            task: rec.task.clone(),
            frames: Vec::new(),
        });
        if rec.episode != ep.name || rec.task != ep.task {
            return Err(WorldError::Parse {
                line: line_no,
                msg: "episode name or task changes within one file".into(),
            });
        }
        ep.frames.push(frame);
    }
    ep.ok_or_else(|| WorldError::Parse {
        line: 0,
        msg: format!("{} contains no frames", path.display()),
    })
}

/// Every `*.jsonl` file directly under `dir`, sorted by name.
pub fn episode_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_dir(dir: &Path) -> Result<Vec<Episode>> {
    episode_files(dir)?.iter().map(|p| load_episode(p)).collect()
}

/// Binary PNM (`P5`/`P6`); the format `image` picks from the extension is PAM.
fn write_pnm(path: &Path, width: usize, height: usize, bytes: &[u8], subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let channels = if subtype == PnmSubtype::Pixmap(SampleEncoding::Binary) { 3 } else { 1 };
    if bytes.len() != width * height * channels {
        return Err(sidecar_err(path, "buffer does not match extents"));
    }
    let f = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(f)
        .with_subtype(subtype)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|e| sidecar_err(path, e))
}

/// Binary (P5) greyscale image of `width × height` bytes.
pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    write_pnm(path, width, height, &bytes, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    write_pnm(path, width, height, &bytes, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}
