use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ExtendedColorType, ImageReader};
use ndarray::{Array2, Array3};

use super::{
    Chapter, ChapterEntry, DatasetManifest, FrameRecord, LabelMask, RgbImage, SemanticRecord,
    Split, N_SEMANTIC,
};
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.json";
const LABELS: &str = "labels.csv";

pub fn chapter_dir(root: &Path, chapter_id: &str) -> PathBuf {
    root.join(chapter_id)
}

fn image_path(root: &Path, chapter_id: &str, kind: &str, index: u32) -> PathBuf {
    chapter_dir(root, chapter_id).join(format!("{kind}_{index:05}.png"))
}

/// Floats are written with 17 significant digits so they round-trip exactly.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_manifest(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn save_png(path: &Path, data: &[u8], w: usize, h: usize, ty: ExtendedColorType) -> Result<()> {
    image::save_buffer(path, data, w as u32, h as u32, ty).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: format!("png write failed: {e}"),
    })
}

/// Writes every frame image and `labels.csv` for one chapter.
pub fn write_chapter(root: &Path, chapter: &Chapter) -> Result<()> {
    let dir = chapter_dir(root, &chapter.chapter_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let labels = dir.join(LABELS);
    let mut wr = csv::Writer::from_path(&labels)?;
    let mut header: Vec<String> = [
        "frame_index",
        "timestamp_ms",
        "angle_deg",
        "speed_kmh",
        "zone_tags",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..N_SEMANTIC).map(|i| format!("sem_{i:02}")));
    header.extend((0..N_SEMANTIC).map(|i| format!("miss_{i:02}")));
    wr.write_record(&header)?;
    for f in &chapter.frames {
        let (h, w) = (f.height(), f.width());
        let front = f.front_image.as_standard_layout();
        save_png(
            &image_path(root, &chapter.chapter_id, "front", f.frame_index),
            front.as_slice().unwrap(),
            w,
            h,
            ExtendedColorType::Rgb8,
        )?;
        if let Some(map) = &f.map_image {
            let map = map.as_standard_layout();
            save_png(
                &image_path(root, &chapter.chapter_id, "map", f.frame_index),
                map.as_slice().unwrap(),
                map.shape()[1],
                map.shape()[0],
                ExtendedColorType::Rgb8,
            )?;
        }
        let seg = f.seg_mask.as_standard_layout();
        save_png(
            &image_path(root, &chapter.chapter_id, "seg", f.frame_index),
            seg.as_slice().unwrap(),
            w,
            h,
            ExtendedColorType::L8,
        )?;
        let mut row = vec![
            f.frame_index.to_string(),
            f.timestamp_ms.to_string(),
            fmt_f64(f.angle_deg),
            fmt_f64(f.speed_kmh),
            f.zone_tags.iter().cloned().collect::<Vec<_>>().join("|"),
        ];
        row.extend(f.semantic.values.iter().map(|v| fmt_f64(*v)));
        row.extend(f.semantic.missing.iter().map(|m| {
            if *m {
                "1".to_string()
            } else {
                "0".to_string()
            }
        }));
        wr.write_record(&row)?;
    }
    wr.flush().map_err(|e| Error::io(&labels, e))?;
    Ok(())
}

fn count_images(dir: &Path, kind: &str) -> Result<usize> {
    let prefix = format!("{kind}_");
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name();
        let name = name.to_string_lossy();
        if name.starts_with(&prefix) && name.ends_with(".png") {
            n += 1;
        }
    }
    Ok(n)
}

/// Reads and validates `<root>/manifest.json` against the chapter directories.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Load {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.clone(),
        reason: format!("corrupt manifest: {e}"),
    })?;
    manifest.root_path = root.to_path_buf();
    manifest.validate()?;
    for c in &manifest.chapters {
        let dir = chapter_dir(root, &c.chapter_id);
        if !dir.is_dir() {
            return Err(Error::Integrity {
                path: dir,
                reason: "chapter directory missing".into(),
            });
        }
        for kind in ["front", "seg"] {
            let n = count_images(&dir, kind)?;
            if n != c.frame_count {
                return Err(Error::Integrity {
                    path: dir.clone(),
                    reason: format!(
                        "manifest lists {} frames but {n} {kind} images are present",
                        c.frame_count
                    ),
                });
            }
        }
        let maps = count_images(&dir, "map")?;
        if maps != 0 && maps != c.frame_count {
            return Err(Error::Integrity {
                path: dir.clone(),
                reason: format!("{maps} map images for {} frames", c.frame_count),
            });
        }
        if !dir.join(LABELS).is_file() {
            return Err(Error::Integrity {
                path: dir.join(LABELS),
                reason: "labels missing".into(),
            });
        }
    }
    Ok(manifest)
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .decode()
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).unwrap())
}

fn load_mask(path: &Path) -> Result<LabelMask> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .decode()
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).unwrap())
}

fn parse<T: std::str::FromStr>(path: &Path, field: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Load {
        path: path.to_path_buf(),
        reason: format!("cannot parse {field} from {s:?}"),
    })
}

/// Loads one chapter's frames and labels.
pub fn load_chapter(manifest: &DatasetManifest, entry: &ChapterEntry) -> Result<Chapter> {
    let root = &manifest.root_path;
    let labels = chapter_dir(root, &entry.chapter_id).join(LABELS);
    let mut rd = csv::Reader::from_path(&labels).map_err(|e| Error::Load {
        path: labels.clone(),
        reason: e.to_string(),
    })?;
    let folder = DatasetManifest::folder_index(&entry.route_id);
    let mut frames = Vec::with_capacity(entry.frame_count);
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() != 5 + 2 * N_SEMANTIC {
            return Err(Error::Load {
                path: labels.clone(),
                reason: format!("expected {} columns, got {}", 5 + 2 * N_SEMANTIC, rec.len()),
            });
        }
        let frame_index: u32 = parse(&labels, "frame_index", &rec[0])?;
        let values = (0..N_SEMANTIC)
            .map(|i| parse::<f64>(&labels, "semantic", &rec[5 + i]))
            .collect::<Result<Vec<_>>>()?;
        let missing = (0..N_SEMANTIC)
            .map(|i| Ok(&rec[5 + N_SEMANTIC + i] == "1"))
            .collect::<Result<Vec<_>>>()?;
        let zone_tags: BTreeSet<String> = rec[4]
            .split('|')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let map_path = image_path(root, &entry.chapter_id, "map", frame_index);
        let map_image = if map_path.is_file() {
            Some(load_rgb(&map_path)?)
        } else {
            None
        };
        frames.push(FrameRecord {
            chapter_id: entry.chapter_id.clone(),
            frame_index,
            timestamp_ms: parse(&labels, "timestamp_ms", &rec[1])?,
            front_image: load_rgb(&image_path(root, &entry.chapter_id, "front", frame_index))?,
            map_image,
            seg_mask: load_mask(&image_path(root, &entry.chapter_id, "seg", frame_index))?,
            semantic: SemanticRecord::new(values, missing)?.with_folder(folder),
            angle_deg: parse(&labels, "angle_deg", &rec[2])?,
            speed_kmh: parse(&labels, "speed_kmh", &rec[3])?,
            zone_tags,
        });
    }
    if frames.len() != entry.frame_count {
        return Err(Error::Integrity {
            path: labels,
            reason: format!(
                "manifest lists {} frames, labels have {}",
                entry.frame_count,
                frames.len()
            ),
        });
    }
    let chapter = Chapter {
        chapter_id: entry.chapter_id.clone(),
        route_id: entry.route_id.clone(),
        split: entry.split,
        frame_stride: manifest.frame_stride,
        frames,
    };
    chapter.validate().map_err(|e| Error::Integrity {
        path: chapter_dir(root, &entry.chapter_id),
        reason: e.to_string(),
    })?;
    Ok(chapter)
}

/// Loads every chapter assigned to `split`, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Chapter>> {
    manifest
        .chapters_in(split)
        .map(|e| load_chapter(manifest, e))
        .collect()
}
