//! Dataset schema, on-disk format, validation and synthetic city generation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::Mat;

pub const DATASET_VERSION: u32 = 1;

/// Feature sources attached to every region. `Region` is the positional
/// (random-walk) table; the other five are the aggregated-level modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Region,
    Poi,
    Taxi,
    Landuse,
    Road,
    Remote,
}

impl Modality {
    /// Block order of the heterogeneous graph and of the first six fusion channels.
    pub const ALL: [Modality; 6] =
        [Modality::Region, Modality::Poi, Modality::Taxi, Modality::Landuse, Modality::Road, Modality::Remote];

    /// Modalities stored as dataset files.
    pub const AGGREGATED: [Modality; 5] =
        [Modality::Poi, Modality::Taxi, Modality::Landuse, Modality::Road, Modality::Remote];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Region => "region",
            Modality::Poi => "poi",
            Modality::Taxi => "taxi",
            Modality::Landuse => "landuse",
            Modality::Road => "road",
            Modality::Remote => "remote",
        }
    }

    pub fn is_count(self) -> bool {
        matches!(self, Modality::Poi | Modality::Taxi | Modality::Landuse | Modality::Road)
    }

    pub fn block(self) -> usize {
        Modality::ALL.iter().position(|&m| m == self).expect("modality in ALL")
    }

    pub fn parse(s: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: usize,
    pub centroid: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatureTable {
    pub modality: Modality,
    pub columns: Vec<String>,
    pub matrix: Mat,
}

impl ModalityFeatureTable {
    pub fn new(modality: Modality, matrix: Mat) -> Self {
        let columns = (0..matrix.ncols()).map(|j| format!("{}_{j}", modality.name())).collect();
        Self { modality, columns, matrix }
    }

    pub fn width(&self) -> usize {
        self.matrix.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreetViewSet {
    pub region_id: usize,
    /// One row per image.
    pub features: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UrbanDataset {
    pub regions: Vec<Region>,
    pub adjacency: Array2<bool>,
    /// One table per aggregated modality, in [`Modality::AGGREGATED`] order.
    pub tables: Vec<ModalityFeatureTable>,
    /// One set per region, indexed by region id.
    pub sv_sets: Vec<StreetViewSet>,
    pub d_raw_sv: usize,
    pub targets: Mat,
    pub task_names: Vec<String>,
}

impl UrbanDataset {
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn k_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn table(&self, modality: Modality) -> Option<&ModalityFeatureTable> {
        self.tables.iter().find(|t| t.modality == modality)
    }

    pub fn table_mut(&mut self, modality: Modality) -> Option<&mut ModalityFeatureTable> {
        self.tables.iter_mut().find(|t| t.modality == modality)
    }

    /// Undirected adjacency pairs `(i, j)` with `i < j`, sorted.
    pub fn adjacency_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n_regions();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.adjacency[[i, j]] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n_regions()).filter(|&j| self.adjacency[[i, j]]).collect()
    }

    pub fn total_images(&self) -> usize {
        self.sv_sets.iter().map(|s| s.features.nrows()).sum()
    }

    /// Applies a region relabeling: new region `k` is old region `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> UrbanDataset {
        let n = self.n_regions();
        assert_eq!(perm.len(), n);
        let mut inverse = vec![0; n];
        for (k, &old) in perm.iter().enumerate() {
            inverse[old] = k;
        }
        let rows = |m: &Mat| m.select(Axis(0), perm);
        let tables = self
            .tables
            .iter()
            .map(|t| {
                let mut matrix = rows(&t.matrix);
                if t.modality == Modality::Taxi {
                    matrix = matrix.select(Axis(1), perm);
                }
                ModalityFeatureTable { modality: t.modality, columns: t.columns.clone(), matrix }
            })
            .collect();
        UrbanDataset {
            regions: perm.iter().enumerate().map(|(k, &old)| Region { id: k, ..self.regions[old].clone() }).collect(),
            adjacency: Array2::from_shape_fn((n, n), |(a, b)| self.adjacency[[perm[a], perm[b]]]),
            tables,
            sv_sets: perm
                .iter()
                .enumerate()
                .map(|(k, &old)| StreetViewSet { region_id: k, features: self.sv_sets[old].features.clone() })
                .collect(),
            d_raw_sv: self.d_raw_sv,
            targets: rows(&self.targets),
            task_names: self.task_names.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("schema mismatch in {file}: {detail}")]
    SchemaMismatch { file: String, detail: String },
    #[error("{file}: street-view image references unknown region {region}")]
    DanglingReference { file: String, region: i64 },
    #[error("non-finite value in {file} at row {row}, column {col}")]
    NonFiniteValue { file: String, row: usize, col: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("dataset failed validation:\n{0}")]
    Invalid(ValidationReport),
    #[error("malformed {file}: {detail}")]
    Parse { file: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Finding {
    NonDenseIds { position: usize, id: usize },
    NonFiniteCentroid { region: usize },
    AdjacencyShape { rows: usize, cols: usize },
    AsymmetricAdjacency { i: usize, j: usize },
    SelfLoop { i: usize },
    MissingTable { modality: Modality },
    DuplicateTable { modality: Modality },
    RowCountMismatch { what: String, expected: usize, found: usize },
    WidthMismatch { what: String, expected: usize, found: usize },
    NegativeCount { modality: Modality, row: usize, col: usize },
    NonIntegerCount { modality: Modality, row: usize, col: usize },
    NonFinite { what: String, row: usize, col: usize },
    StreetViewRegionMismatch { position: usize, region: usize },
    TaskNameMismatch { names: usize, columns: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for finding in &self.findings {
            writeln!(f, "  {finding:?}")?;
        }
        Ok(())
    }
}

fn check_finite(m: &Mat, what: &str, out: &mut Vec<Finding>) {
    for ((row, col), v) in m.indexed_iter() {
        if !v.is_finite() {
            out.push(Finding::NonFinite { what: what.to_string(), row, col });
        }
    }
}

/// Lists every violated dataset invariant. Never fails.
pub fn validate_dataset(ds: &UrbanDataset) -> ValidationReport {
    let mut findings = Vec::new();
    let n = ds.n_regions();

    for (pos, r) in ds.regions.iter().enumerate() {
        if r.id != pos {
            findings.push(Finding::NonDenseIds { position: pos, id: r.id });
        }
        if !r.centroid.iter().all(|c| c.is_finite()) {
            findings.push(Finding::NonFiniteCentroid { region: pos });
        }
    }

    let (ar, ac) = ds.adjacency.dim();
    if ar != n || ac != n {
        findings.push(Finding::AdjacencyShape { rows: ar, cols: ac });
    } else {
        for i in 0..n {
            if ds.adjacency[[i, i]] {
                findings.push(Finding::SelfLoop { i });
            }
            for j in i + 1..n {
                if ds.adjacency[[i, j]] != ds.adjacency[[j, i]] {
                    findings.push(Finding::AsymmetricAdjacency { i, j });
                }
            }
        }
    }

    for m in Modality::AGGREGATED {
        let count = ds.tables.iter().filter(|t| t.modality == m).count();
        if count == 0 {
            findings.push(Finding::MissingTable { modality: m });
        } else if count > 1 {
            findings.push(Finding::DuplicateTable { modality: m });
        }
    }
    for t in &ds.tables {
        if t.matrix.nrows() != n {
            findings.push(Finding::RowCountMismatch {
                what: t.modality.name().to_string(),
                expected: n,
                found: t.matrix.nrows(),
            });
        }
        if t.modality == Modality::Taxi && t.matrix.ncols() != n {
            findings.push(Finding::WidthMismatch { what: "taxi".into(), expected: n, found: t.matrix.ncols() });
        }
        check_finite(&t.matrix, t.modality.name(), &mut findings);
        if t.modality.is_count() {
            for ((row, col), &v) in t.matrix.indexed_iter() {
                if v < 0.0 {
                    findings.push(Finding::NegativeCount { modality: t.modality, row, col });
                } else if v.is_finite() && v.fract() != 0.0 {
                    findings.push(Finding::NonIntegerCount { modality: t.modality, row, col });
                }
            }
        }
    }

    if ds.sv_sets.len() != n {
        findings.push(Finding::RowCountMismatch {
            what: "streetview sets".into(),
            expected: n,
            found: ds.sv_sets.len(),
        });
    }
    for (pos, set) in ds.sv_sets.iter().enumerate() {
        if set.region_id != pos {
            findings.push(Finding::StreetViewRegionMismatch { position: pos, region: set.region_id });
        }
        if set.features.nrows() > 0 && set.features.ncols() != ds.d_raw_sv {
            findings.push(Finding::WidthMismatch {
                what: format!("streetview region {pos}"),
                expected: ds.d_raw_sv,
                found: set.features.ncols(),
            });
        }
        check_finite(&set.features, &format!("streetview region {pos}"), &mut findings);
    }

    if ds.targets.nrows() != n {
        findings.push(Finding::RowCountMismatch { what: "targets".into(), expected: n, found: ds.targets.nrows() });
    }
    if ds.targets.ncols() != ds.task_names.len() {
        findings.push(Finding::TaskNameMismatch { names: ds.task_names.len(), columns: ds.targets.ncols() });
    }
    check_finite(&ds.targets, "targets", &mut findings);

    ValidationReport { findings }
}

// ---------------------------------------------------------------------------
// On-disk format

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_regions: usize,
    pub k_tasks: usize,
    pub d_raw_sv: usize,
    pub version: u32,
}

#[derive(Serialize, Deserialize)]
struct RegionRecord {
    id: i64,
    centroid: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    region: i64,
    feat: Vec<f64>,
}

fn table_file(m: Modality) -> String {
    format!("{}.csv", m.name())
}

fn write_csv(path: &Path, header: &[String], matrix: &Mat) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in matrix.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    DataError::Parse { file: file_label(path), detail: e.to_string() }
}

fn file_label(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes `ds` in the directory layout read by [`load_dataset`].
pub fn write_dataset(ds: &UrbanDataset, root: &Path) -> Result<(), DataError> {
    fs::create_dir_all(root)?;

    let mut f = fs::File::create(root.join("regions.jsonl"))?;
    for r in &ds.regions {
        let line = serde_json::to_string(&RegionRecord { id: r.id as i64, centroid: r.centroid })
            .expect("region record serializes");
        writeln!(f, "{line}")?;
    }

    let mut f = fs::File::create(root.join("adjacency.csv"))?;
    for (i, j) in ds.adjacency_pairs() {
        writeln!(f, "{i},{j}")?;
    }

    for t in &ds.tables {
        write_csv(&root.join(table_file(t.modality)), &t.columns, &t.matrix)?;
    }

    let mut f = std::io::BufWriter::new(fs::File::create(root.join("streetview.jsonl"))?);
    for set in &ds.sv_sets {
        for row in set.features.rows() {
            let rec = ImageRecord { region: set.region_id as i64, feat: row.to_vec() };
            writeln!(f, "{}", serde_json::to_string(&rec).expect("image record serializes"))?;
        }
    }
    f.flush()?;

    write_csv(&root.join("targets.csv"), &ds.task_names, &ds.targets)?;

    let manifest = DatasetManifest {
        n_regions: ds.n_regions(),
        k_tasks: ds.k_tasks(),
        d_raw_sv: ds.d_raw_sv,
        version: DATASET_VERSION,
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest"))?;
    Ok(())
}

fn require(root: &Path, name: &str) -> Result<PathBuf, DataError> {
    let p = root.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(DataError::MissingFile(p))
    }
}

fn read_matrix_csv(path: &Path, expected_rows: usize) -> Result<(Vec<String>, Mat), DataError> {
    let file = file_label(path);
    let mut rdr =
        csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    let width = header.len();
    let mut data = Vec::with_capacity(expected_rows * width);
    let mut rows = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != width {
            return Err(DataError::SchemaMismatch {
                file,
                detail: format!("row {row} has {} columns, header has {width}", rec.len()),
            });
        }
        for (col, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| DataError::Parse {
                file: file.clone(),
                detail: format!("row {row}, column {col}: {field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFiniteValue { file, row, col });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows != expected_rows {
        return Err(DataError::SchemaMismatch { file, detail: format!("expected {expected_rows} rows, found {rows}") });
    }
    let m = Mat::from_shape_vec((rows, width), data).expect("row-major buffer");
    Ok((header, m))
}

/// Reads and validates a dataset directory.
pub fn load_dataset(root: &Path) -> Result<UrbanDataset, DataError> {
    let manifest_path = require(root, "manifest.json")?;
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
        .map_err(|e| DataError::Parse { file: "manifest.json".into(), detail: e.to_string() })?;
    if manifest.version != DATASET_VERSION {
        return Err(DataError::SchemaMismatch {
            file: "manifest.json".into(),
            detail: format!("unsupported version {}", manifest.version),
        });
    }
    let n = manifest.n_regions;

    // Check presence of every file before parsing any of them.
    let regions_path = require(root, "regions.jsonl")?;
    let adjacency_path = require(root, "adjacency.csv")?;
    let table_paths: Vec<PathBuf> =
        Modality::AGGREGATED.iter().map(|&m| require(root, &table_file(m))).collect::<Result<_, _>>()?;
    let sv_path = require(root, "streetview.jsonl")?;
    let targets_path = require(root, "targets.csv")?;

    let mut regions = Vec::with_capacity(n);
    for (line_no, line) in BufReader::new(fs::File::open(&regions_path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RegionRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            file: "regions.jsonl".into(),
            detail: format!("line {}: {e}", line_no + 1),
        })?;
        if !rec.centroid.iter().all(|c| c.is_finite()) {
            return Err(DataError::NonFiniteValue { file: "regions.jsonl".into(), row: line_no, col: 0 });
        }
        if rec.id < 0 {
            return Err(DataError::SchemaMismatch {
                file: "regions.jsonl".into(),
                detail: format!("negative region id {}", rec.id),
            });
        }
        regions.push(Region { id: rec.id as usize, centroid: rec.centroid, boundary: None });
    }
    if regions.len() != n {
        return Err(DataError::SchemaMismatch {
            file: "regions.jsonl".into(),
            detail: format!("manifest declares {n} regions, found {}", regions.len()),
        });
    }
    regions.sort_by_key(|r| r.id);

    let mut adjacency = Array2::from_elem((n, n), false);
    for (line_no, line) in fs::read_to_string(&adjacency_path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |s: &str| s.parse::<usize>().ok().filter(|&v| v < n);
        match (parts.as_slice(), parts.first().and_then(|s| parse(s)), parts.get(1).and_then(|s| parse(s))) {
            ([_, _], Some(i), Some(j)) if i != j => {
                adjacency[[i, j]] = true;
                adjacency[[j, i]] = true;
            }
            _ => {
                return Err(DataError::SchemaMismatch {
                    file: "adjacency.csv".into(),
                    detail: format!("line {}: expected `i,j` with distinct ids < {n}, got {line:?}", line_no + 1),
                })
            }
        }
    }

    let mut tables = Vec::with_capacity(5);
    for (&m, path) in Modality::AGGREGATED.iter().zip(&table_paths) {
        let (columns, matrix) = read_matrix_csv(path, n)?;
        if m == Modality::Taxi && matrix.ncols() != n {
            return Err(DataError::SchemaMismatch {
                file: table_file(m),
                detail: format!("taxi table needs {n} columns (one per origin region), found {}", matrix.ncols()),
            });
        }
        tables.push(ModalityFeatureTable { modality: m, columns, matrix });
    }

    let d_raw = manifest.d_raw_sv;
    let mut per_region: Vec<Vec<f64>> = vec![Vec::new(); n];
    for (line_no, line) in BufReader::new(fs::File::open(&sv_path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            file: "streetview.jsonl".into(),
            detail: format!("line {}: {e}", line_no + 1),
        })?;
        if rec.region < 0 || rec.region as usize >= n {
            return Err(DataError::DanglingReference { file: "streetview.jsonl".into(), region: rec.region });
        }
        if rec.feat.len() != d_raw {
            return Err(DataError::SchemaMismatch {
                file: "streetview.jsonl".into(),
                detail: format!("line {}: feature width {} != d_raw_sv {d_raw}", line_no + 1, rec.feat.len()),
            });
        }
        if let Some(col) = rec.feat.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteValue { file: "streetview.jsonl".into(), row: line_no, col });
        }
        per_region[rec.region as usize].extend(rec.feat);
    }
    let sv_sets = per_region
        .into_iter()
        .enumerate()
        .map(|(region_id, flat)| {
            let rows = if d_raw == 0 { 0 } else { flat.len() / d_raw };
            StreetViewSet { region_id, features: Mat::from_shape_vec((rows, d_raw), flat).expect("image rows") }
        })
        .collect();

    let (task_names, targets) = read_matrix_csv(&targets_path, n)?;
    if task_names.len() != manifest.k_tasks {
        return Err(DataError::SchemaMismatch {
            file: "targets.csv".into(),
            detail: format!("manifest declares {} tasks, header has {}", manifest.k_tasks, task_names.len()),
        });
    }

    let ds = UrbanDataset { regions, adjacency, tables, sv_sets, d_raw_sv: d_raw, targets, task_names };
    let report = validate_dataset(&ds);
    if !report.is_valid() {
        return Err(DataError::Invalid(report));
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Synthetic cities

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CategoryCounts {
    pub poi: usize,
    pub landuse: usize,
    pub road: usize,
    pub remote: usize,
}

impl Default for CategoryCounts {
    fn default() -> Self {
        Self { poi: 16, landuse: 8, road: 6, remote: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_regions: usize,
    pub grid_shape: (usize, usize),
    pub category_counts: CategoryCounts,
    pub images_per_region: (usize, usize),
    /// Standard deviation of the Gaussian noise added to targets.
    pub noise_sigma: f64,
    /// Standard deviation of the noise on continuous features (remote sensing, street view).
    pub feature_noise: f64,
    pub latent_dim: usize,
    pub d_raw_sv: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_regions: 36,
            grid_shape: (6, 6),
            category_counts: CategoryCounts::default(),
            images_per_region: (4, 12),
            noise_sigma: 0.1,
            feature_noise: 2.0,
            latent_dim: 8,
            d_raw_sv: 512,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn grid(rows: usize, cols: usize, seed: u64) -> Self {
        Self { n_regions: rows * cols, grid_shape: (rows, cols), seed, ..Self::default() }
    }

    pub fn check(&self) -> Result<(), DataError> {
        let (rows, cols) = self.grid_shape;
        if rows * cols != self.n_regions {
            return Err(DataError::InvalidSpec(format!("grid {rows}x{cols} does not hold {} regions", self.n_regions)));
        }
        if self.n_regions == 0 {
            return Err(DataError::InvalidSpec("n_regions must be positive".into()));
        }
        if self.images_per_region.0 > self.images_per_region.1 {
            return Err(DataError::InvalidSpec("images_per_region min exceeds max".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::InvalidSpec("noise_sigma must be a nonnegative finite number".into()));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(DataError::InvalidSpec("feature_noise must be a nonnegative finite number".into()));
        }
        let c = &self.category_counts;
        if self.latent_dim == 0 || c.poi == 0 || c.landuse == 0 || c.road == 0 || c.remote == 0 {
            return Err(DataError::InvalidSpec("latent_dim and category counts must be positive".into()));
        }
        if self.d_raw_sv == 0 {
            return Err(DataError::InvalidSpec("d_raw_sv must be positive".into()));
        }
        Ok(())
    }
}

/// A synthetic city together with the latent region types it was drawn from.
pub struct SyntheticCity {
    pub dataset: UrbanDataset,
    /// N × latent_dim region types.
    pub latents: Mat,
    /// latent_dim × K map from latents to noise-free targets (before the per-task offset).
    pub target_map: Mat,
}

pub const DEFAULT_TASKS: [&str; 3] = ["carbon", "gdp", "population"];

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let normal = Normal::new(0.0, std.max(0.0)).expect("valid normal");
    Mat::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

fn poisson(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng).round()
}

/// Spatially smooth latent fields on the grid, standardized per dimension.
fn smooth_latents(rng: &mut ChaCha8Rng, rows: usize, cols: usize, dim: usize) -> Mat {
    let n = rows * cols;
    let width = (rows.max(cols) as f64 / 2.5).max(1.0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut t = Mat::zeros((n, dim));
    for k in 0..dim {
        for _ in 0..3 {
            let cy = rng.random_range(0.0..rows as f64);
            let cx = rng.random_range(0.0..cols as f64);
            let amp: f64 = normal.sample(rng);
            for i in 0..n {
                let (y, x) = ((i / cols) as f64 + 0.5, (i % cols) as f64 + 0.5);
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                t[[i, k]] += amp * (-d2 / (2.0 * width * width)).exp();
            }
        }
        for i in 0..n {
            t[[i, k]] += 0.15 * normal.sample(rng);
        }
        let col = t.column(k);
        let mean = col.mean().unwrap_or(0.0);
        let std = col.std(0.0).max(1e-12);
        t.column_mut(k).mapv_inplace(|v| (v - mean) / std);
    }
    t
}

/// Count table with rates `base · exp(0.6 · t A)`.
fn count_table(rng: &mut ChaCha8Rng, latents: &Mat, width: usize, base: f64) -> Mat {
    let a = gaussian_matrix(rng, latents.ncols(), width, 1.0 / (latents.ncols() as f64).sqrt());
    let logits = latents.dot(&a);
    let mut out = Mat::zeros(logits.dim());
    for ((i, j), &z) in logits.indexed_iter() {
        out[[i, j]] = poisson(rng, base * (0.6 * z.clamp(-6.0, 6.0)).exp());
    }
    out
}

/// Generates a reproducible grid city. Pure function of `spec`.
pub fn generate_synthetic_city(spec: &SynthSpec) -> Result<SyntheticCity, DataError> {
    spec.check()?;
    let (rows, cols) = spec.grid_shape;
    let n = spec.n_regions;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let regions: Vec<Region> = (0..n)
        .map(|i| {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            Region {
                id: i,
                centroid: [c + 0.5, r + 0.5],
                boundary: Some(vec![[c, r], [c + 1.0, r], [c + 1.0, r + 1.0], [c, r + 1.0]]),
            }
        })
        .collect();

    let mut adjacency = Array2::from_elem((n, n), false);
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        if c + 1 < cols {
            adjacency[[i, i + 1]] = true;
            adjacency[[i + 1, i]] = true;
        }
        if r + 1 < rows {
            adjacency[[i, i + cols]] = true;
            adjacency[[i + cols, i]] = true;
        }
    }

    let latents = smooth_latents(&mut rng, rows, cols, spec.latent_dim);
    let cc = &spec.category_counts;

    let poi = count_table(&mut rng, &latents, cc.poi, 8.0);
    let landuse = count_table(&mut rng, &latents, cc.landuse, 4.0);
    let road = count_table(&mut rng, &latents, cc.road, 5.0);

    // taxi[i, j] = trips arriving at i from j
    let mut taxi = Mat::zeros((n, n));
    for i in 0..n {
        let ti = latents.row(i);
        for j in 0..n {
            let dist = ((regions[i].centroid[0] - regions[j].centroid[0]).powi(2)
                + (regions[i].centroid[1] - regions[j].centroid[1]).powi(2))
            .sqrt();
            let affinity = ti.dot(&latents.row(j)) / spec.latent_dim as f64;
            let rate = 20.0 * (-dist / 2.0).exp() * (0.8 * affinity).exp();
            taxi[[i, j]] = poisson(&mut rng, rate);
        }
    }

    let rs_map = gaussian_matrix(&mut rng, spec.latent_dim, cc.remote, 1.0 / (spec.latent_dim as f64).sqrt());
    let remote = latents.dot(&rs_map) + gaussian_matrix(&mut rng, n, cc.remote, spec.feature_noise);

    let sv_map = gaussian_matrix(&mut rng, spec.latent_dim, spec.d_raw_sv, 1.0 / (spec.latent_dim as f64).sqrt());
    let sv_sets = (0..n)
        .map(|i| {
            let count = rng.random_range(spec.images_per_region.0..=spec.images_per_region.1);
            let base = latents.row(i).dot(&sv_map);
            let noise = gaussian_matrix(&mut rng, count, spec.d_raw_sv, spec.feature_noise);
            StreetViewSet { region_id: i, features: noise + &base }
        })
        .collect();

    let k = DEFAULT_TASKS.len();
    let target_map = gaussian_matrix(&mut rng, spec.latent_dim, k, 1.0);
    let offsets = [50.0, 100.0, 80.0];
    let mut targets = latents.dot(&target_map) * 10.0;
    for (j, off) in offsets.iter().enumerate() {
        targets.column_mut(j).mapv_inplace(|v| v + off);
    }
    if spec.noise_sigma > 0.0 {
        targets = targets + gaussian_matrix(&mut rng, n, k, spec.noise_sigma);
    }

    let tables = vec![
        ModalityFeatureTable::new(Modality::Poi, poi),
        ModalityFeatureTable::new(Modality::Taxi, taxi),
        ModalityFeatureTable::new(Modality::Landuse, landuse),
        ModalityFeatureTable::new(Modality::Road, road),
        ModalityFeatureTable::new(Modality::Remote, remote),
    ];

    let dataset = UrbanDataset {
        regions,
        adjacency,
        tables,
        sv_sets,
        d_raw_sv: spec.d_raw_sv,
        targets,
        task_names: DEFAULT_TASKS.iter().map(|s| s.to_string()).collect(),
    };
    Ok(SyntheticCity { dataset, latents, target_map: target_map * 10.0 })
}

/// SHA-256 over the dataset files of a directory (name and contents, sorted by name).
pub fn dataset_digest(root: &Path) -> Result<String, DataError> {
    use sha2::{Digest, Sha256};
    let mut names: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut wanted: Vec<String> =
        ["regions.jsonl", "adjacency.csv", "streetview.jsonl", "targets.csv", "manifest.json"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    wanted.extend(Modality::AGGREGATED.iter().map(|&m| table_file(m)));
    for name in wanted {
        let path = root.join(&name);
        if path.is_file() {
            names.insert(name, path);
        }
    }
    let mut hasher = Sha256::new();
    for (name, path) in names {
        hasher.update(name.as_bytes());
        hasher.update(fs::read(path)?);
    }
    Ok(hex::encode(hasher.finalize()))
}
