//! Region representations: a precomputed visual block followed by seven
//! positional features describing the box relative to its image.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{BBox, Corpus, ImageRecord, RegionKey};
use crate::error::{Error, Result};

pub const POSITIONAL_DIM: usize = 7;

pub const POSITIONAL_NAMES: [&str; POSITIONAL_DIM] =
    ["x1_rel", "y1_rel", "x2_rel", "y2_rel", "area_rel", "dist_center", "orientation"];

/// Name of entry `i` of an assembled vector.
pub fn feature_name(i: usize, dim_visual: usize) -> String {
    match i.checked_sub(dim_visual) {
        Some(p) => POSITIONAL_NAMES[p].to_string(),
        None => format!("visual[{i}]"),
    }
}

/// Box geometry relative to the image. Field order is the order of the
/// positional block inside a [`FeatureVector`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionalFeatures {
    pub x1_rel: f64,
    pub y1_rel: f64,
    pub x2_rel: f64,
    pub y2_rel: f64,
    pub area_rel: f64,
    pub dist_center: f64,
    /// Aspect ratio W/H of the image.
    pub orientation: f64,
}

impl PositionalFeatures {
    pub fn to_array(&self) -> [f64; POSITIONAL_DIM] {
        [
            self.x1_rel,
            self.y1_rel,
            self.x2_rel,
            self.y2_rel,
            self.area_rel,
            self.dist_center,
            self.orientation,
        ]
    }
}

pub fn positional_features(bbox: &BBox, image: &ImageRecord) -> Result<PositionalFeatures> {
    let (iw, ih) = (f64::from(image.width), f64::from(image.height));
    if iw <= 0.0 || ih <= 0.0 {
        return Err(Error::ZeroAreaImage(image.image_id.clone()));
    }
    let x1_rel = bbox.x / iw;
    let y1_rel = bbox.y / ih;
    let x2_rel = bbox.x2() / iw;
    let y2_rel = bbox.y2() / ih;
    let cx = 0.5 * (x1_rel + x2_rel);
    let cy = 0.5 * (y1_rel + y2_rel);
    Ok(PositionalFeatures {
        x1_rel,
        y1_rel,
        x2_rel,
        y2_rel,
        area_rel: (bbox.w * bbox.h) / (iw * ih),
        dist_center: (cx - 0.5).hypot(cy - 0.5),
        orientation: iw / ih,
    })
}

/// A full region representation, visual block first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn assemble(visual: &[f32], pos: &PositionalFeatures, dim_visual: usize) -> Result<FeatureVector> {
    if visual.len() != dim_visual {
        return Err(Error::Dimension {
            expected: dim_visual,
            actual: visual.len(),
        });
    }
    let mut values = Vec::with_capacity(dim_visual + POSITIONAL_DIM);
    values.extend(visual.iter().map(|&v| f64::from(v)));
    values.extend_from_slice(&pos.to_array());
    Ok(FeatureVector(values))
}

/// Which block(s) of the feature vector a classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMask {
    #[default]
    Full,
    Visual,
    Positional,
}

impl FeatureMask {
    pub fn range(self, dim_visual: usize) -> Range<usize> {
        match self {
            FeatureMask::Full => 0..dim_visual + POSITIONAL_DIM,
            FeatureMask::Visual => 0..dim_visual,
            FeatureMask::Positional => dim_visual..dim_visual + POSITIONAL_DIM,
        }
    }

    pub fn dim(self, dim_visual: usize) -> usize {
        self.range(dim_visual).len()
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMask::Full => "full",
            FeatureMask::Visual => "visual",
            FeatureMask::Positional => "positional",
        }
    }
}

impl std::str::FromStr for FeatureMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FeatureMask::Full),
            "visual" | "visual_only" | "nopos" => Ok(FeatureMask::Visual),
            "positional" | "positional_only" | "pos" => Ok(FeatureMask::Positional),
            other => Err(Error::Config(format!("unknown feature mask {other:?}"))),
        }
    }
}

/// Per-dimension z-scoring, fit on training regions only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Option<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for row in rows {
            if sum.is_empty() {
                sum = vec![0.0; row.len()];
                sum_sq = vec![0.0; row.len()];
            }
            for (j, &v) in row.iter().enumerate() {
                sum[j] += v;
                sum_sq[j] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let sd = (sq / nf - m * m).max(0.0).sqrt();
                // constant dimensions pass through unscaled
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Some(Self { mean, scale })
    }

    pub fn apply(&self, values: &mut [f64]) {
        for ((v, m), s) in values.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = (*v - m) / s;
        }
    }
}

/// Visual feature rows keyed by region.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    data: Vec<f32>,
    keys: Vec<RegionKey>,
    index: HashMap<RegionKey, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    image_id: String,
    region_id: String,
    row: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dim: usize,
    count: usize,
    dtype: String,
    layout: String,
    data_file: String,
    index: Vec<IndexEntry>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            keys: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[RegionKey] {
        &self.keys
    }

    pub fn push(&mut self, key: RegionKey, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: row.len(),
            });
        }
        if self.index.contains_key(&key) {
            return Err(Error::FeatureTable(format!("duplicate index key {key}")));
        }
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn row(&self, key: &RegionKey) -> Option<&[f32]> {
        self.index
            .get(key)
            .map(|&r| &self.data[r * self.dim..(r + 1) * self.dim])
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim == expected {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected,
                actual: self.dim,
            })
        }
    }
}

pub fn load_feature_table(manifest_path: impl AsRef<Path>) -> Result<FeatureTable> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.dtype != "f32le" {
        return Err(Error::FeatureTable(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    if manifest.layout != "row-major" {
        return Err(Error::FeatureTable(format!("unsupported layout {:?}", manifest.layout)));
    }
    if manifest.dim == 0 {
        return Err(Error::FeatureTable("dim must be positive".into()));
    }

    let data_path = resolve_relative(manifest_path, &manifest.data_file);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = manifest.count * manifest.dim * 4;
    if bytes.len() < expected {
        return Err(Error::FeatureTable(format!(
            "truncated data: {} has {} bytes, expected {expected}",
            data_path.display(),
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::FeatureTable(format!(
            "dim/count mismatch: {} has {} bytes, expected {expected}",
            data_path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::FeatureTable(format!(
            "non-finite value in row {}",
            pos / manifest.dim
        )));
    }

    let mut table = FeatureTable::new(manifest.dim);
    let mut row_taken = vec![false; manifest.count];
    let mut entries = manifest.index;
    entries.sort_by_key(|e| e.row);
    for entry in entries {
        if entry.row >= manifest.count {
            return Err(Error::FeatureTable(format!(
                "index row {} out of range (count {})",
                entry.row, manifest.count
            )));
        }
        if std::mem::replace(&mut row_taken[entry.row], true) {
            return Err(Error::FeatureTable(format!("row {} indexed twice", entry.row)));
        }
        let key = RegionKey::new(entry.image_id, entry.region_id);
        let start = entry.row * manifest.dim;
        table.push(key, &values[start..start + manifest.dim])?;
    }
    Ok(table)
}

/// Writes the manifest and, next to it, the raw data file `data_file`.
pub fn save_feature_table(
    table: &FeatureTable,
    manifest_path: impl AsRef<Path>,
    data_file: &str,
) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let data_path = resolve_relative(manifest_path, data_file);
    let mut bytes = Vec::with_capacity(table.data.len() * 4);
    for v in &table.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;

    let manifest = Manifest {
        dim: table.dim,
        count: table.len(),
        dtype: "f32le".into(),
        layout: "row-major".into(),
        data_file: data_file.into(),
        index: table
            .keys
            .iter()
            .enumerate()
            .map(|(row, k)| IndexEntry {
                image_id: k.image_id.clone(),
                region_id: k.region_id.clone(),
                row,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))
}

pub(crate) fn resolve_relative(manifest_path: &Path, file: &str) -> PathBuf {
    let file = Path::new(file);
    if file.is_absolute() {
        file.to_owned()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new(""))
            .join(file)
    }
}

/// Region id under which proposal `index` of an image is stored in a
/// feature table.
pub fn proposal_region_id(index: usize) -> String {
    format!("proposal:{index}")
}

/// Joins a corpus with its feature table.
#[derive(Debug, Clone, Copy)]
pub struct RegionFeatures<'a> {
    pub corpus: &'a Corpus,
    pub table: &'a FeatureTable,
}

impl<'a> RegionFeatures<'a> {
    pub fn new(corpus: &'a Corpus, table: &'a FeatureTable) -> Self {
        Self { corpus, table }
    }

    pub fn dim_visual(&self) -> usize {
        self.table.dim()
    }

    /// Full vector of an annotated region, `None` if the region or its
    /// feature row is missing.
    pub fn region(&self, key: &RegionKey) -> Option<FeatureVector> {
        let region = self.corpus.region(key)?;
        let image = self.corpus.image(&region.image_id)?;
        let visual = self.table.row(key)?;
        let pos = positional_features(&region.bbox, image).ok()?;
        assemble(visual, &pos, self.table.dim()).ok()
    }

    /// Full vector of proposal `index` of `image_id`.
    pub fn proposal(&self, image_id: &str, index: usize, bbox: &BBox) -> Option<FeatureVector> {
        let image = self.corpus.image(image_id)?;
        let visual = self
            .table
            .row(&RegionKey::new(image_id, proposal_region_id(index)))?;
        let pos = positional_features(bbox, image).ok()?;
        assemble(visual, &pos, self.table.dim()).ok()
    }
}
