//! Manifest ingestion: directory scan, CSV reading, label encoding and the
//! identifier join between manifest rows and image files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// File extensions picked up by [`scan_images`], compared case-insensitively.
pub const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

/// One ROI sample after matching.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub patient_id: String,
    pub abnormality_id: String,
    pub image_path: PathBuf,
    pub pathology: String,
    pub label: u8,
}

/// A raw manifest line, `patient_id,abnormality_id,image_path,pathology`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub abnormality_id: String,
    pub image_path: String,
    pub pathology: String,
}

/// MALIGNANT → 1; BENIGN and BENIGN_WITHOUT_CALLBACK → 0.
pub fn encode_label(pathology: &str) -> Result<u8> {
    match pathology.trim().to_ascii_uppercase().as_str() {
        "MALIGNANT" => Ok(1),
        "BENIGN" | "BENIGN_WITHOUT_CALLBACK" => Ok(0),
        other => Err(Error::Data(format!("unknown pathology `{other}`"))),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageScan {
    /// Readable images in lexicographic path order.
    pub files: Vec<PathBuf>,
    /// One line per skipped file.
    pub irregular: Vec<String>,
}

impl ImageScan {
    pub fn count(&self) -> usize {
        self.files.len()
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else if has_image_extension(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Recursively lists image files under `root`. Empty files and files whose
/// header cannot be decoded are reported in `irregular` instead.
pub fn scan_images(root: &Path) -> Result<ImageScan> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image root is not a directory"),
        ));
    }
    let mut all = Vec::new();
    walk(root, &mut all)?;
    all.sort();
    let mut scan = ImageScan::default();
    for path in all {
        let size = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        if size == 0 {
            log::warn!("skipping empty file {}", path.display());
            scan.irregular.push(format!("{}: empty file", path.display()));
            continue;
        }
        let readable = image::ImageReader::open(&path)
            .and_then(|r| r.with_guessed_format())
            .ok()
            .and_then(|r| r.into_dimensions().ok());
        match readable {
            Some(_) => scan.files.push(path),
            None => {
                log::warn!("skipping unreadable image {}", path.display());
                scan.irregular.push(format!("{}: unreadable", path.display()));
            }
        }
    }
    Ok(scan)
}

/// Reads a manifest CSV with the documented header.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest_from(file)
}

pub fn read_manifest_from(reader: impl std::io::Read) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
    let want = ["patient_id", "abnormality_id", "image_path", "pathology"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Parse { line: 1, msg: format!("expected header `{}`", want.join(",")) });
    }
    let mut rows = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        rows.push(row.map_err(|e| csv_error(e, i + 2))?);
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_io(e, path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(fallback_line);
    Error::Parse { line, msg: e.to_string() }
}

fn csv_io(e: csv::Error, path: &Path) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// How a row and a file are reduced to the shared join identifier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKey {
    /// File name without extension.
    #[default]
    FileStem,
    /// Name of the directory holding the file (one image per directory).
    ParentDir,
}

impl MatchKey {
    pub fn identifier(self, path: &Path) -> Option<String> {
        let part = match self {
            MatchKey::FileStem => path.file_stem(),
            MatchKey::ParentDir => path.parent().and_then(Path::file_name),
        };
        part.and_then(|s| s.to_str()).map(str::to_owned)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Exclusions {
    /// Rows whose identifier matches no file.
    pub no_file: usize,
    /// Files whose identifier matches no row.
    pub no_row: usize,
    /// Rows dropped because the identifier maps to several files or rows.
    pub ambiguous: usize,
}

impl Exclusions {
    pub fn total(&self) -> usize {
        self.no_file + self.no_row + self.ambiguous
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub records: Vec<ManifestRecord>,
    pub excluded: Exclusions,
}

impl MatchOutcome {
    pub fn excluded_count(&self) -> usize {
        self.excluded.total()
    }
}

/// Inner join of manifest rows and scanned files on the identifier.
///
/// Records keep the manifest order and point at the matched file. Repeated
/// rows with the same identifier and label keep the first occurrence; a
/// repeated identifier with a different label is fatal.
pub fn match_manifest(rows: &[ManifestRow], files: &[PathBuf], key: MatchKey) -> Result<MatchOutcome> {
    let mut by_id: BTreeMap<String, Vec<&PathBuf>> = BTreeMap::new();
    for f in files {
        if let Some(id) = key.identifier(f) {
            by_id.entry(id).or_default().push(f);
        }
    }
    let mut first_row: BTreeMap<String, (usize, u8)> = BTreeMap::new();
    let mut labels = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let label = encode_label(&row.pathology)?;
        let id = key.identifier(Path::new(&row.image_path)).unwrap_or_default();
        if let Some(&(j, prev)) = first_row.get(&id) {
            if prev != label {
                return Err(Error::Data(format!(
                    "identifier `{id}` has conflicting pathology on manifest rows {} and {}",
                    j + 2,
                    i + 2
                )));
            }
        } else {
            first_row.insert(id.clone(), (i, label));
        }
        labels.push((id, label));
    }
    let mut out = MatchOutcome { records: Vec::new(), excluded: Exclusions::default() };
    for (i, (row, (id, label))) in rows.iter().zip(labels).enumerate() {
        if first_row[&id].0 != i {
            out.excluded.ambiguous += 1;
            continue;
        }
        match by_id.get(&id).map(Vec::as_slice) {
            None | Some([]) => out.excluded.no_file += 1,
            Some([file]) => out.records.push(ManifestRecord {
                patient_id: row.patient_id.clone(),
                abnormality_id: row.abnormality_id.clone(),
                image_path: (*file).clone(),
                pathology: row.pathology.clone(),
                label,
            }),
            Some(_) => out.excluded.ambiguous += 1,
        }
    }
    out.excluded.no_row = by_id.keys().filter(|id| !first_row.contains_key(*id)).map(|id| by_id[id].len()).sum();
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct CbisRow {
    patient_id: String,
    #[serde(rename = "left or right breast")]
    side: String,
    #[serde(rename = "image view")]
    view: String,
    #[serde(rename = "abnormality id")]
    abnormality: String,
    pathology: String,
    #[serde(rename = "cropped image file path")]
    cropped_path: String,
}

/// Maps a CBIS-DDSM description CSV (mass or calcification) onto manifest
/// rows. The ROI crop path is kept verbatim; pair it with
/// [`MatchKey::ParentDir`] for the JPEG release, where each crop lives in a
/// directory named after its series UID.
pub fn read_cbis_ddsm(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<CbisRow>().enumerate() {
        let r = rec.map_err(|e| csv_error(e, i + 2))?;
        let cropped = r.cropped_path.trim().to_string();
        // Series directory of the crop, with the DICOM file name replaced.
        let series = Path::new(&cropped).parent().map(|p| p.join("crop.jpg")).unwrap_or_default();
        rows.push(ManifestRow {
            abnormality_id: format!("{}_{}_{}_{}", r.patient_id, r.side, r.view, r.abnormality),
            patient_id: r.patient_id,
            image_path: series.to_string_lossy().into_owned(),
            pathology: r.pathology,
        });
    }
    Ok(rows)
}
