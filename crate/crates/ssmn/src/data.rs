//! Dataset on-disk formats and per-pair input preparation.
//!
//! Manifest: JSON-lines, one record per image, coordinates written with six
//! fractional digits. Pair lists: TSV of (source_id, target_id). Rasters:
//! binary PGM referenced by relative path from the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Result, SsmnError};
use crate::imaging::{binarize, distance_transform, extract_patch, GrayImage};

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PartPoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

impl PartPoint {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(SsmnError::Data("part with empty name".into()));
        }
        if !(0.0..=1.0).contains(&self.x) || !(0.0..=1.0).contains(&self.y) {
            return Err(SsmnError::Data(format!(
                "part '{}' at ({}, {}) outside [0,1]^2",
                self.name, self.x, self.y
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub category: String,
    pub split: String,
    pub raster_path: String,
    pub parts: Vec<PartPoint>,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.category.is_empty() {
            return Err(SsmnError::Data("image with empty id or category".into()));
        }
        if !matches!(self.split.as_str(), "train" | "val" | "test") {
            return Err(SsmnError::Data(format!(
                "image {}: unknown split '{}'",
                self.id, self.split
            )));
        }
        if self.parts.len() < 2 {
            return Err(SsmnError::Data(format!(
                "image {}: needs at least 2 parts",
                self.id
            )));
        }
        let mut names = BTreeSet::new();
        for p in &self.parts {
            p.validate()?;
            if !names.insert(p.name.as_str()) {
                return Err(SsmnError::Data(format!(
                    "image {}: duplicate part name '{}'",
                    self.id, p.name
                )));
            }
        }
        Ok(())
    }
}

fn json_escape(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

/// One manifest line; floats fixed to six fractional digits so that
/// write -> read -> write is byte-stable.
pub fn manifest_line(rec: &ImageRecord) -> String {
    let parts: Vec<String> = rec
        .parts
        .iter()
        .map(|p| {
            format!(
                "{{\"name\":{},\"x\":{:.6},\"y\":{:.6}}}",
                json_escape(&p.name),
                p.x,
                p.y
            )
        })
        .collect();
    format!(
        "{{\"id\":{},\"category\":{},\"split\":{},\"raster_path\":{},\"parts\":[{}]}}",
        json_escape(&rec.id),
        json_escape(&rec.category),
        json_escape(&rec.split),
        json_escape(&rec.raster_path),
        parts.join(",")
    )
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for rec in records {
        writeln!(f, "{}", manifest_line(rec))?;
    }
    Ok(())
}

pub fn parse_manifest_line(line: &str) -> Result<ImageRecord> {
    let rec: ImageRecord = serde_json::from_str(line)?;
    rec.validate()?;
    Ok(rec)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_manifest_line(&line)
            .map_err(|e| SsmnError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if !ids.insert(rec.id.clone()) {
            return Err(SsmnError::Data(format!("duplicate image id '{}'", rec.id)));
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(SsmnError::Data(format!("empty manifest {}", path.display())));
    }
    Ok(out)
}

/// Pair list TSV: one `source_id<TAB>target_id` per line.
pub fn write_pairs(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (s, t) in pairs {
        writeln!(f, "{s}\t{t}")?;
    }
    Ok(())
}

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        match (it.next(), it.next(), it.next()) {
            (Some(s), Some(t), None) if !s.is_empty() && !t.is_empty() => {
                out.push((s.to_string(), t.to_string()))
            }
            _ => {
                return Err(SsmnError::Data(format!(
                    "pair list line {}: expected 'source<TAB>target', got '{line}'",
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    parse_pairs(&std::fs::read_to_string(path)?)
}

/// Loaded dataset with split-disjointness enforced.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub images: BTreeMap<String, ImageRecord>,
    /// split -> ordered (source_id, target_id) pairs
    pub pairs: BTreeMap<String, Vec<(String, String)>>,
}

impl Dataset {
    /// Load manifest + per-split pair lists from a dataset directory and
    /// verify that no category appears in two splits and that pairs stay
    /// within one category of one split.
    pub fn load(root: &Path) -> Result<Dataset> {
        let records = read_manifest(&root.join("manifest.jsonl"))?;
        let mut by_split: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for rec in &records {
            by_split
                .entry(rec.split.as_str())
                .or_default()
                .insert(rec.category.as_str());
        }
        let splits: Vec<&&str> = by_split.keys().collect();
        for i in 0..splits.len() {
            for j in (i + 1)..splits.len() {
                if let Some(cat) = by_split[*splits[i]].intersection(&by_split[*splits[j]]).next()
                {
                    return Err(SsmnError::Data(format!(
                        "category '{cat}' leaks across splits '{}' and '{}'",
                        splits[i], splits[j]
                    )));
                }
            }
        }
        let images: BTreeMap<String, ImageRecord> =
            records.into_iter().map(|r| (r.id.clone(), r)).collect();
        let mut pairs = BTreeMap::new();
        for split in ["train", "val", "test"] {
            let path = root.join(format!("pairs_{split}.tsv"));
            if !path.exists() {
                continue;
            }
            let list = read_pairs(&path)?;
            for (s, t) in &list {
                let (src, tgt) = match (images.get(s), images.get(t)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        return Err(SsmnError::Data(format!(
                            "pair ({s}, {t}) references unknown image id"
                        )))
                    }
                };
                if src.split != split || tgt.split != split || src.category != tgt.category {
                    return Err(SsmnError::Data(format!(
                        "pair ({s}, {t}) crosses split or category boundaries"
                    )));
                }
                if s == t {
                    return Err(SsmnError::Data(format!("self-pair ({s}, {t})")));
                }
            }
            pairs.insert(split.to_string(), list);
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            images,
            pairs,
        })
    }

    pub fn raster_path(&self, rec: &ImageRecord) -> PathBuf {
        self.root.join(&rec.raster_path)
    }

    /// Occurrence counts of part names over training images.
    pub fn train_name_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for rec in self.images.values() {
            if rec.split == "train" {
                for p in &rec.parts {
                    *counts.entry(p.name.clone()).or_insert(0) += 1;
                }
            }
        }
        counts
    }
}

/// Patch preprocessing parameters.
#[derive(Debug, Clone)]
pub struct PatchParams {
    pub rho: f64,
    pub out_size: usize,
    pub ink_threshold: f64,
    pub use_dt: bool,
}

impl Default for PatchParams {
    fn default() -> Self {
        PatchParams {
            rho: 0.2,
            out_size: 32,
            ink_threshold: 0.98,
            use_dt: true,
        }
    }
}

/// One image's network-ready inputs: per-part patches, locations, names.
#[derive(Debug, Clone)]
pub struct ImageParts {
    pub patches: Vec<Vec<f64>>,
    pub locs: Vec<(f64, f64)>,
    pub names: Vec<String>,
}

impl ImageParts {
    /// Binarize, distance-transform (optional), and crop one patch per part.
    pub fn prepare(img: &GrayImage, parts: &[PartPoint], pp: &PatchParams) -> Result<ImageParts> {
        let source = if pp.use_dt {
            let mask = binarize(img, pp.ink_threshold)?;
            distance_transform(&mask, img.width, img.height)?
        } else {
            img.clone()
        };
        let mut patches = Vec::with_capacity(parts.len());
        let mut locs = Vec::with_capacity(parts.len());
        let mut names = Vec::with_capacity(parts.len());
        for p in parts {
            p.validate()?;
            patches.push(extract_patch(&source, p.x, p.y, pp.rho, pp.out_size)?);
            locs.push((p.x, p.y));
            names.push(p.name.clone());
        }
        Ok(ImageParts {
            patches,
            locs,
            names,
        })
    }
}

/// Gold matching from source to target by part name: `gold[t]` is the source
/// index carrying the same name as target part t.
pub fn gold_by_name(src: &[PartPoint], tgt: &[PartPoint]) -> Result<Vec<usize>> {
    let index: BTreeMap<&str, usize> = src
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.as_str(), i))
        .collect();
    tgt.iter()
        .map(|p| {
            index.get(p.name.as_str()).copied().ok_or_else(|| {
                SsmnError::Data(format!("target part '{}' missing in source", p.name))
            })
        })
        .collect()
}
