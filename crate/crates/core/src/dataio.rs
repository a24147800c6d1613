//! On-disk formats: the RFD1 feature dataset, detection-style ground truth
//! JSON, and JSON reports.
//!
//! An RFD1 directory holds:
//!
//! - `manifest.json`
//! - `proposals.jsonl`, one record per line, features replaced by `row`
//! - `features_view1.bin`, `features_view2.bin`: row-major little-endian f32

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{AreaGroup, BBox, FeatureDataset, GroundTruthSet, GtObject, ImageId, ProposalRecord};
use crate::error::{NcdlError, Result};

pub const FORMAT_VERSION: &str = "RFD1";
pub const BYTE_ORDER: &str = "little-endian";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROPOSALS_FILE: &str = "proposals.jsonl";
pub const VIEW1_FILE: &str = "features_view1.bin";
pub const VIEW2_FILE: &str = "features_view2.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFiles {
    pub view1: String,
    pub view2: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub feature_dim: usize,
    pub num_proposals: usize,
    pub num_images: usize,
    pub known_class_names: Vec<String>,
    pub byte_order: String,
    pub feature_files: FeatureFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProposalLine {
    row: usize,
    #[serde(flatten)]
    record: ProposalRecord,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| NcdlError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| NcdlError::json(path, e))?;
    w.write_all(b"\n").map_err(|e| NcdlError::io(path, e))?;
    w.flush().map_err(|e| NcdlError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| NcdlError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| NcdlError::json(path, e))
}

/// Writes rows as JSON lines.
pub fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| NcdlError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| NcdlError::json(path, e))?;
        w.write_all(b"\n").map_err(|e| NcdlError::io(path, e))?;
    }
    w.flush().map_err(|e| NcdlError::io(path, e))
}

fn write_f32_matrix(m: &Array2<f32>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| NcdlError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &v in m.iter() {
        w.write_all(&v.to_le_bytes()).map_err(|e| NcdlError::io(path, e))?;
    }
    w.flush().map_err(|e| NcdlError::io(path, e))
}

fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let expected = (rows * cols * 4) as u64;
    let found = fs::metadata(path).map_err(|e| NcdlError::io(path, e))?.len();
    if found != expected {
        return Err(NcdlError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let mut bytes = Vec::with_capacity(expected as usize);
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| NcdlError::io(path, e))?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked against file size"))
}

/// Writes `ds` as an RFD1 directory, creating it if needed.
pub fn write_dataset(ds: &FeatureDataset, dir: &Path) -> Result<()> {
    if ds.view1.dim() != ds.view2.dim() {
        return Err(NcdlError::Shape(format!(
            "view shapes differ: {:?} vs {:?}",
            ds.view1.dim(),
            ds.view2.dim()
        )));
    }
    if ds.view1.nrows() != ds.proposals.len() {
        return Err(NcdlError::Shape(format!(
            "{} feature rows for {} proposals",
            ds.view1.nrows(),
            ds.proposals.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| NcdlError::io(dir, e))?;

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION.into(),
        feature_dim: ds.feature_dim(),
        num_proposals: ds.len(),
        num_images: ds.images().len(),
        known_class_names: ds.known_class_names.clone(),
        byte_order: BYTE_ORDER.into(),
        feature_files: FeatureFiles {
            view1: VIEW1_FILE.into(),
            view2: VIEW2_FILE.into(),
        },
    };
    write_json(&manifest, &dir.join(MANIFEST_FILE))?;

    let lines: Vec<ProposalLine> = ds
        .proposals
        .iter()
        .enumerate()
        .map(|(row, record)| ProposalLine {
            row,
            record: record.clone(),
        })
        .collect();
    write_jsonl(&lines, &dir.join(PROPOSALS_FILE))?;

    // as_standard_layout guards against transposed views being written column-major
    write_f32_matrix(&ds.view1.as_standard_layout().to_owned(), &dir.join(VIEW1_FILE))?;
    write_f32_matrix(&ds.view2.as_standard_layout().to_owned(), &dir.join(VIEW2_FILE))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(NcdlError::UnsupportedVersion {
            found: manifest.format_version,
        });
    }
    if manifest.byte_order != BYTE_ORDER {
        return Err(NcdlError::Invalid(format!(
            "unsupported byte order {:?}",
            manifest.byte_order
        )));
    }
    Ok(manifest)
}

/// Loads an RFD1 directory.
pub fn read_dataset(dir: &Path) -> Result<FeatureDataset> {
    let manifest = read_manifest(dir)?;
    let n = manifest.num_proposals;
    let f = manifest.feature_dim;
    let view1 = read_f32_matrix(&dir.join(&manifest.feature_files.view1), n, f)?;
    let view2 = read_f32_matrix(&dir.join(&manifest.feature_files.view2), n, f)?;

    let path = dir.join(PROPOSALS_FILE);
    let file = File::open(&path).map_err(|e| NcdlError::io(&path, e))?;
    let mut slots: Vec<Option<ProposalRecord>> = vec![None; n];
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| NcdlError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ProposalLine = serde_json::from_str(&line).map_err(|e| NcdlError::json(&path, e))?;
        let slot = slots.get_mut(parsed.row).ok_or_else(|| {
            NcdlError::Invalid(format!(
                "{}:{}: row {} out of range for {n} proposals",
                path.display(),
                lineno + 1,
                parsed.row
            ))
        })?;
        if slot.replace(parsed.record).is_some() {
            return Err(NcdlError::Invalid(format!(
                "{}:{}: duplicate row {}",
                path.display(),
                lineno + 1,
                parsed.row
            )));
        }
    }
    let proposals = slots
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| NcdlError::Invalid(format!("{}: missing row {i}", path.display()))))
        .collect::<Result<Vec<_>>>()?;

    Ok(FeatureDataset {
        known_class_names: manifest.known_class_names,
        proposals,
        view1,
        view2,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GtImageJson {
    id: ImageId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GtAnnotationJson {
    id: u64,
    image_id: ImageId,
    bbox: [f64; 4],
    category_id: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GtCategoryJson {
    id: u64,
    name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GtFileJson {
    images: Vec<GtImageJson>,
    annotations: Vec<GtAnnotationJson>,
    categories: Vec<GtCategoryJson>,
}

/// Reads detection-annotation JSON (`images`, `annotations` with xywh
/// `bbox`, `categories`). Extra fields are ignored.
pub fn read_ground_truth(path: &Path) -> Result<GroundTruthSet> {
    let raw: GtFileJson = read_json(path)?;
    let categories: HashMap<u64, &str> = raw.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let mut images: BTreeMap<ImageId, Vec<GtObject>> = raw.images.iter().map(|im| (im.id, Vec::new())).collect();
    for ann in &raw.annotations {
        let objects = images.get_mut(&ann.image_id).ok_or(NcdlError::MissingImage {
            annotation_id: ann.id,
            image_id: ann.image_id,
        })?;
        let class_name = categories.get(&ann.category_id).ok_or_else(|| {
            NcdlError::Invalid(format!(
                "annotation {} references missing category {}",
                ann.id, ann.category_id
            ))
        })?;
        let [x, y, w, h] = ann.bbox;
        let bbox = BBox::from_xywh(x, y, w, h);
        objects.push(GtObject {
            annotation_id: ann.id,
            bbox,
            class_name: class_name.to_string(),
            area_group: AreaGroup::of_box(&bbox),
        });
    }
    Ok(GroundTruthSet {
        class_names: raw.categories.into_iter().map(|c| c.name).collect(),
        images,
    })
}

/// Inverse of [`read_ground_truth`]; category ids are 1-based positions in
/// `gt.class_names`.
pub fn write_ground_truth(gt: &GroundTruthSet, path: &Path) -> Result<()> {
    let cat_id: HashMap<&str, u64> = gt
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i as u64 + 1))
        .collect();
    let mut annotations = Vec::with_capacity(gt.num_annotations());
    for (&image_id, objects) in &gt.images {
        for o in objects {
            let category_id = *cat_id
                .get(o.class_name.as_str())
                .ok_or_else(|| NcdlError::UnknownClass(o.class_name.clone()))?;
            annotations.push(GtAnnotationJson {
                id: o.annotation_id,
                image_id,
                bbox: [o.bbox.x1, o.bbox.y1, o.bbox.width(), o.bbox.height()],
                category_id,
            });
        }
    }
    let file = GtFileJson {
        images: gt.images.keys().map(|&id| GtImageJson { id }).collect(),
        annotations,
        categories: gt
            .class_names
            .iter()
            .enumerate()
            .map(|(i, n)| GtCategoryJson {
                id: i as u64 + 1,
                name: n.clone(),
            })
            .collect(),
    };
    write_json(&file, path)
}
