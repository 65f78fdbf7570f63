//! Feature-bag files and cohort manifests.
//!
//! A bag file is an HDF5 container with datasets `features` (N×d f32),
//! `coords` (N×2 f32) and `patch_class` (N i8), plus root attributes
//! `slide_id`, `patient_id`, `center_id` (strings) and `target` (integer).

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::h5::H5File;

pub const FEATURES: &str = "features";
pub const COORDS: &str = "coords";
pub const PATCH_CLASS: &str = "patch_class";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(i8)]
pub enum PatchClass {
    Tumor = 0,
    Normal = 1,
    Artifact = 2,
}

impl PatchClass {
    pub fn code(self) -> i8 {
        self as i8
    }

    pub fn from_code(code: i8) -> Option<Self> {
        match code {
            0 => Some(PatchClass::Tumor),
            1 => Some(PatchClass::Normal),
            2 => Some(PatchClass::Artifact),
            _ => None,
        }
    }
}

/// One slide's patch embeddings and metadata. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    slide_id: String,
    patient_id: String,
    center_id: String,
    features: Array2<f32>,
    coords: Array2<f32>,
    patch_class: Vec<PatchClass>,
    target: u8,
}

impl FeatureBag {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        center_id: impl Into<String>,
        features: Array2<f32>,
        coords: Array2<f32>,
        patch_class: Vec<PatchClass>,
        target: u8,
    ) -> Result<Self> {
        let slide_id = slide_id.into();
        let n = features.nrows();
        if coords.nrows() != n || coords.ncols() != 2 || patch_class.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "slide `{slide_id}`: features {}x{}, coords {}x{}, patch_class {}",
                n,
                features.ncols(),
                coords.nrows(),
                coords.ncols(),
                patch_class.len()
            )));
        }
        if n == 0 {
            return Err(Error::EmptyAfterFilter(slide_id));
        }
        if target > 1 {
            return Err(Error::InvalidLabel(target as i64));
        }
        Ok(Self {
            slide_id,
            patient_id: patient_id.into(),
            center_id: center_id.into(),
            features,
            coords,
            patch_class,
            target,
        })
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn center_id(&self) -> &str {
        &self.center_id
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn coords(&self) -> &Array2<f32> {
        &self.coords
    }

    pub fn patch_class(&self) -> &[PatchClass] {
        &self.patch_class
    }

    pub fn target(&self) -> u8 {
        self.target
    }

    pub fn n_instances(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Keep the rows at `rows` (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Result<FeatureBag> {
        FeatureBag::new(
            self.slide_id.clone(),
            self.patient_id.clone(),
            self.center_id.clone(),
            self.features.select(Axis(0), rows),
            self.coords.select(Axis(0), rows),
            rows.iter().map(|&r| self.patch_class[r]).collect(),
            self.target,
        )
    }

    pub fn class_counts(&self) -> BTreeMap<PatchClass, usize> {
        let mut counts = BTreeMap::new();
        for &c in &self.patch_class {
            *counts.entry(c).or_insert(0) += 1;
        }
        counts
    }
}

/// A bag as read from disk together with the number of rows dropped for
/// non-finite feature values.
#[derive(Clone, Debug)]
pub struct LoadedBag {
    pub bag: FeatureBag,
    pub removed_rows: usize,
}

pub fn read_bag(path: &Path) -> Result<LoadedBag> {
    let file = H5File::open(path)?;
    let (fshape, fdata) = file.read_f32(FEATURES)?;
    let (cshape, cdata) = file.read_f32(COORDS)?;
    let (pshape, pdata) = file.read_i8(PATCH_CLASS)?;
    let slide_id = file.read_attr_str("slide_id")?;
    let patient_id = file.read_attr_str("patient_id")?;
    let center_id = file.read_attr_str("center_id")?;
    let target = file.read_attr_i32("target")?;
    drop(file);

    if fshape.len() != 2 || cshape.len() != 2 || cshape[1] != 2 || pshape.len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "{}: features {fshape:?}, coords {cshape:?}, patch_class {pshape:?}",
            path.display()
        )));
    }
    let (n, d) = (fshape[0], fshape[1]);
    if cshape[0] != n || pshape[0] != n {
        return Err(Error::ShapeMismatch(format!(
            "{}: row counts differ (features {n}, coords {}, patch_class {})",
            path.display(),
            cshape[0],
            pshape[0]
        )));
    }
    if !(0..=1).contains(&target) {
        return Err(Error::InvalidLabel(target as i64));
    }
    let features = Array2::from_shape_vec((n, d), fdata)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let coords = Array2::from_shape_vec((n, 2), cdata)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let classes = pdata
        .iter()
        .map(|&c| {
            PatchClass::from_code(c)
                .ok_or_else(|| Error::Hdf5(format!("invalid patch_class code {c}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let keep: Vec<usize> = features
        .outer_iter()
        .enumerate()
        .filter(|(_, row)| row.iter().all(|v| v.is_finite()))
        .map(|(i, _)| i)
        .collect();
    let removed_rows = n - keep.len();
    if keep.is_empty() {
        return Err(Error::EmptyAfterFilter(slide_id));
    }
    let bag = FeatureBag::new(
        slide_id,
        patient_id,
        center_id,
        features.select(Axis(0), &keep),
        coords.select(Axis(0), &keep),
        keep.iter().map(|&i| classes[i]).collect(),
        target as u8,
    )?;
    Ok(LoadedBag { bag, removed_rows })
}

pub fn write_bag(bag: &FeatureBag, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = H5File::create(path)?;
    let n = bag.n_instances();
    let features: Vec<f32> = bag.features.iter().copied().collect();
    let coords: Vec<f32> = bag.coords.iter().copied().collect();
    let classes: Vec<i8> = bag.patch_class.iter().map(|c| c.code()).collect();
    file.write_f32(FEATURES, &[n, bag.dim()], &features)?;
    file.write_f32(COORDS, &[n, 2], &coords)?;
    file.write_i8(PATCH_CLASS, &[n], &classes)?;
    file.write_attr_str("slide_id", &bag.slide_id)?;
    file.write_attr_str("patient_id", &bag.patient_id)?;
    file.write_attr_str("center_id", &bag.center_id)?;
    file.write_attr_i32("target", bag.target as i32)?;
    Ok(())
}

/// Keep only tumor patches when `enabled`; otherwise return the bag unchanged.
pub fn filter_tumor(bag: &FeatureBag, enabled: bool) -> Result<FeatureBag> {
    if !enabled {
        return Ok(bag.clone());
    }
    let rows: Vec<usize> = bag
        .patch_class
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == PatchClass::Tumor)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyAfterFilter(bag.slide_id.clone()));
    }
    bag.select_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub slide_id: String,
    pub patient_id: String,
    pub center_id: String,
    pub target: u8,
    pub file_path: PathBuf,
    #[serde(default)]
    pub fold_id: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CohortManifest {
    rows: Vec<ManifestRow>,
}

const MANIFEST_COLUMNS: [&str; 6] = [
    "slide_id",
    "patient_id",
    "center_id",
    "target",
    "file_path",
    "fold_id",
];

#[derive(Deserialize)]
struct RawRow {
    slide_id: String,
    patient_id: String,
    center_id: String,
    target: String,
    file_path: String,
    #[serde(default)]
    fold_id: Option<String>,
}

impl CohortManifest {
    /// Validate slide-id uniqueness and per-patient label consistency.
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut targets: BTreeMap<&str, u8> = BTreeMap::new();
        for row in &rows {
            if row.target > 1 {
                return Err(Error::InvalidLabel(row.target as i64));
            }
            if !seen.insert(row.slide_id.as_str()) {
                return Err(Error::DuplicateSlide(row.slide_id.clone()));
            }
            match targets.get(row.patient_id.as_str()) {
                Some(&t) if t != row.target => {
                    return Err(Error::ConflictingTarget(row.patient_id.clone()))
                }
                _ => {
                    targets.insert(&row.patient_id, row.target);
                }
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Patient id → target, sorted by patient id.
    pub fn patient_targets(&self) -> BTreeMap<String, u8> {
        self.rows
            .iter()
            .map(|r| (r.patient_id.clone(), r.target))
            .collect()
    }

    pub fn subset<F: Fn(&ManifestRow) -> bool>(&self, keep: F) -> CohortManifest {
        CohortManifest {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(MANIFEST_COLUMNS).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.write_record([
                r.slide_id.clone(),
                r.patient_id.clone(),
                r.center_id.clone(),
                r.target.to_string(),
                r.file_path.to_string_lossy().into_owned(),
                r.fold_id.map(|f| f.to_string()).unwrap_or_default(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::ManifestParse(format!("{}: {e}", path.display()))
}

/// Parse and validate a manifest CSV. Relative `file_path`s resolve against
/// the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols != MANIFEST_COLUMNS[..5] && cols != MANIFEST_COLUMNS[..] {
        return Err(Error::ManifestParse(format!(
            "{}: expected header `slide_id,patient_id,center_id,target,file_path[,fold_id]`, got `{}`",
            path.display(),
            cols.join(",")
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (line, rec) in reader.deserialize::<RawRow>().enumerate() {
        let raw = rec.map_err(|e| csv_err(path, e))?;
        let at = |what: &str| Error::ManifestParse(format!("{}: row {}: {what}", path.display(), line + 1));
        let target: u8 = match raw.target.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(at(&format!("target `{other}` is not 0 or 1"))),
        };
        let fold_id = match raw.fold_id.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) => Some(s.parse().map_err(|_| at(&format!("fold_id `{s}` is not an integer")))?),
        };
        let mut file_path = PathBuf::from(raw.file_path.trim());
        if file_path.is_relative() {
            file_path = base.join(file_path);
        }
        if !file_path.is_file() {
            return Err(Error::io(
                &file_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "bag file listed in manifest not found"),
            ));
        }
        rows.push(ManifestRow {
            slide_id: raw.slide_id.trim().to_string(),
            patient_id: raw.patient_id.trim().to_string(),
            center_id: raw.center_id.trim().to_string(),
            target,
            file_path,
            fold_id,
        });
    }
    CohortManifest::new(rows)
}
