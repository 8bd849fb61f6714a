//! Image-directory and built-in dataset ingestion.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use esma_core::dataset::{smooth_covers, LabeledDataset, PrototypeImageTask};
use esma_core::toy_lab::{make_toy_dataset, ToyTask};

/// Share of unreadable files above which ingestion aborts.
pub const MAX_SKIP_FRACTION: f64 = 0.05;

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub source: String,
    pub target_size: usize,
    /// Class names in label order.
    pub classes: Vec<String>,
    pub files: Vec<PathBuf>,
    pub skipped: Vec<SkippedFile>,
    pub content_hash: String,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    v.sort();
    Ok(v)
}

fn decode(path: &Path, size: usize) -> anyhow::Result<Vec<f64>> {
    let img = image::open(path)?.to_rgb8();
    let img = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
    let plane = size * size;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Reads images into a `[3, size, size]` dataset in lexicographic path order.
/// Subdirectories are classes; a flat directory is one class.
pub fn ingest_directory(dir: &Path, size: usize) -> anyhow::Result<(LabeledDataset, IngestManifest)> {
    if size == 0 {
        bail!("target size must be positive");
    }
    let entries = sorted_entries(dir)?;
    let subdirs: Vec<PathBuf> = entries.iter().filter(|p| p.is_dir()).cloned().collect();
    let mut groups: Vec<(String, Vec<PathBuf>)> = Vec::new();
    if subdirs.is_empty() {
        groups.push(("0".into(), entries.into_iter().filter(|p| is_image(p)).collect()));
    } else {
        for d in subdirs {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            groups.push((name, sorted_entries(&d)?.into_iter().filter(|p| is_image(p)).collect()));
        }
    }
    let total: usize = groups.iter().map(|g| g.1.len()).sum();
    if total == 0 {
        bail!("no images found in {}", dir.display());
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut files = Vec::new();
    let mut skipped = Vec::new();
    for (label, (_, paths)) in groups.iter().enumerate() {
        for p in paths {
            match decode(p, size) {
                Ok(px) => {
                    data.extend(px);
                    labels.push(label);
                    files.push(p.clone());
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", p.display());
                    skipped.push(SkippedFile {
                        path: p.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    if skipped.len() as f64 > MAX_SKIP_FRACTION * total as f64 {
        bail!("{} of {total} images could not be decoded (limit {:.0}%)", skipped.len(), MAX_SKIP_FRACTION * 100.0);
    }
    let ds = LabeledDataset::new(vec![3, size, size], data, labels, groups.len())?;
    let manifest = IngestManifest {
        source: dir.display().to_string(),
        target_size: size,
        classes: groups.into_iter().map(|g| g.0).collect(),
        files,
        skipped,
        content_hash: ds.content_hash(),
    };
    Ok((ds, manifest))
}

/// Built-in generators: `prototype` (10-class textures), `covers` (smooth
/// watermark covers) and `toy` (two-Gaussian points).
pub fn ingest_builtin(tag: &str, size: usize, count: usize, seed: u64) -> anyhow::Result<(LabeledDataset, IngestManifest)> {
    let ds = match tag {
        "prototype" => PrototypeImageTask {
            size,
            seed,
            ..PrototypeImageTask::default()
        }
        .generate(count, "train")?,
        "covers" => smooth_covers(count, 3, size, seed)?,
        "toy" => make_toy_dataset(&ToyTask {
            n_samples: count,
            seed,
            ..ToyTask::default()
        })?,
        other => bail!("unknown built-in dataset `{other}` (available: prototype, covers, toy)"),
    };
    let manifest = IngestManifest {
        source: format!("builtin:{tag}"),
        target_size: size,
        classes: (0..ds.num_classes()).map(|k| k.to_string()).collect(),
        files: Vec::new(),
        skipped: Vec::new(),
        content_hash: ds.content_hash(),
    };
    Ok((ds, manifest))
}
