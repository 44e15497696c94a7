use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::benchmark::SceneCorpus;
use crate::detection::{BoundingBox, DetectionDataset, DetectionSample};
use crate::enhancer::{mask_cache_path, FaceMask};
use crate::error::{Error, Result};
use crate::face::FaceDataset;
use crate::image::ImageTensor;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    /// `(source, reason)` for every entry that could not be used.
    pub skipped: Vec<(String, String)>,
    /// Identities with fewer than two images; the closed-set protocol
    /// leaves them out.
    pub flagged: Vec<String>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn source_name(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// `(identity, path relative to root)` from a headerless `path,identity`
/// manifest; a `path,identity` header line is tolerated.
fn read_face_manifest(manifest: &Path) -> Result<Vec<(String, String)>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(manifest)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Parse {
                location: format!("{}:{}", manifest.display(), line + 1),
                message: format!("expected `path,identity`, got {} fields", rec.len()),
            });
        }
        if line == 0 && &rec[0] == "path" && &rec[1] == "identity" {
            continue;
        }
        out.push((rec[1].to_string(), rec[0].to_string()));
    }
    Ok(out)
}

/// Loads aligned face crops from identity-named subdirectories of `source`,
/// or from a `path,identity` manifest whose paths are relative to the
/// manifest's directory. Unreadable images and images whose size differs
/// from the first one are skipped and reported.
pub fn ingest_face_dataset(source: impl AsRef<Path>) -> Result<(FaceDataset, IngestReport)> {
    let source = source.as_ref();
    let (root, entries) = if source.is_dir() {
        let mut entries = Vec::new();
        for dir in sorted_entries(source)? {
            if !dir.is_dir() {
                continue;
            }
            let name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
            for file in sorted_entries(&dir)? {
                if file.is_file() && is_image(&file) {
                    entries.push((name.clone(), source_name(source, &file)));
                }
            }
        }
        (source.to_path_buf(), entries)
    } else {
        let root = source.parent().unwrap_or(Path::new(".")).to_path_buf();
        (root, read_face_manifest(source)?)
    };
    let mut report = IngestReport::default();
    let mut shape = None;
    let mut samples = Vec::with_capacity(entries.len());
    for (identity, rel) in entries {
        let image = match ImageTensor::load(root.join(&rel)) {
            Ok(img) => img.into_values().squeeze(0)?,
            Err(e) => {
                report.skipped.push((rel, e.to_string()));
                continue;
            }
        };
        let dims = image.dims3()?;
        if *shape.get_or_insert(dims) != dims {
            report
                .skipped
                .push((rel, format!("size {dims:?} differs from {:?}", shape.unwrap())));
            continue;
        }
        samples.push((identity, image, rel));
    }
    samples.sort_by(|a, b| (&a.0, &a.2).cmp(&(&b.0, &b.2)));
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (id, _, _) in &samples {
        *counts.entry(id.as_str()).or_default() += 1;
    }
    report.flagged = counts
        .iter()
        .filter(|(_, &c)| c < 2)
        .map(|(id, _)| id.to_string())
        .collect();
    for (src, why) in &report.skipped {
        log::warn!("skipped {src}: {why}");
    }
    if !report.flagged.is_empty() {
        log::warn!("identities with fewer than 2 images: {:?}", report.flagged);
    }
    let dataset = FaceDataset::from_named(samples)?;
    Ok((dataset, report))
}

/// Loads a headerless `path,cx,cy,w,h[,cx,cy,w,h...]` manifest with boxes
/// normalized to the image size; paths are relative to the manifest's
/// directory. A cached `<stem>.mask.png` next to an image becomes its face
/// mask, otherwise the mask is all ones.
pub fn ingest_detection_manifest(manifest: impl AsRef<Path>) -> Result<(SceneCorpus, IngestReport)> {
    let manifest = manifest.as_ref();
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(manifest)?;
    let mut report = IngestReport::default();
    let mut samples = Vec::new();
    let mut masks = Vec::new();
    let mut shape = None;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let location = || format!("{}:{}", manifest.display(), line + 1);
        if rec.is_empty() || (rec.len() - 1) % 4 != 0 {
            return Err(Error::Parse {
                location: location(),
                message: "expected a path followed by groups of cx,cy,w,h".into(),
            });
        }
        let values: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>().map_err(|e| Error::Parse {
                    location: location(),
                    message: format!("`{v}`: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        let boxes = values
            .chunks(4)
            .map(|c| BoundingBox::new(c[0], c[1], c[2], c[3]))
            .collect::<Result<Vec<_>>>()?;
        let rel = rec[0].to_string();
        let path = root.join(&rel);
        let image = match ImageTensor::load(&path) {
            Ok(img) => img.into_values().squeeze(0)?,
            Err(e) => {
                report.skipped.push((rel, e.to_string()));
                continue;
            }
        };
        let dims = image.dims3()?;
        if *shape.get_or_insert(dims) != dims {
            report.skipped.push((rel, format!("size {dims:?} differs from {:?}", shape.unwrap())));
            continue;
        }
        let cached = mask_cache_path(&path);
        let mask = if cached.exists() {
            let m = FaceMask::load_png(&cached)?;
            if (m.height(), m.width()) != (dims.1, dims.2) {
                return Err(Error::Contract(format!(
                    "{}: mask size differs from the image",
                    cached.display()
                )));
            }
            m
        } else {
            FaceMask::ones(dims.1, dims.2)
        };
        samples.push(DetectionSample {
            image,
            boxes,
            source: rel,
        });
        masks.push(mask);
    }
    for (src, why) in &report.skipped {
        log::warn!("skipped {src}: {why}");
    }
    Ok((
        SceneCorpus {
            detection: DetectionDataset::new(samples)?,
            masks,
        },
        report,
    ))
}
