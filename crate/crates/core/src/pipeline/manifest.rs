use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect::{read_annotations, AnnotationRecord, Side};
use crate::error::{data, io_err, Error, Result};
use crate::GRADES;

/// One radiograph with its grade and any joint annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub image_id: String,
    /// Resolved path of the image file.
    pub path: PathBuf,
    pub grade: u8,
    pub left: Option<AnnotationRecord>,
    pub right: Option<AnnotationRecord>,
}

impl ManifestRecord {
    pub fn annotation(&self, side: Side) -> Option<&AnnotationRecord> {
        match side {
            Side::Left => self.left.as_ref(),
            Side::Right => self.right.as_ref(),
        }
    }

    pub fn annotation_mut(&mut self, side: Side) -> &mut Option<AnnotationRecord> {
        match side {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn grades(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.grade).collect()
    }

    pub fn counts_per_grade(&self) -> [usize; GRADES] {
        let mut c = [0; GRADES];
        for r in &self.records {
            c[r.grade as usize] += 1;
        }
        c
    }

    /// All annotation records, ordered by (image id, side).
    pub fn annotations(&self) -> Vec<AnnotationRecord> {
        let mut out: Vec<AnnotationRecord> = self
            .records
            .iter()
            .flat_map(|r| r.left.iter().chain(r.right.iter()).cloned())
            .collect();
        out.sort_by(|a, b| (&a.image_id, a.side).cmp(&(&b.image_id, b.side)));
        out
    }

    /// Attaches annotations, rejecting ids that are not in the manifest.
    pub fn attach_annotations(&mut self, records: Vec<AnnotationRecord>) -> Result<()> {
        let index: HashMap<String, usize> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.image_id.clone(), i))
            .collect();
        for (row, a) in records.into_iter().enumerate() {
            let i = *index.get(&a.image_id).ok_or_else(|| {
                data(format!(
                    "annotation row {} references unknown image id {:?}",
                    row + 2,
                    a.image_id
                ))
            })?;
            let side = a.side;
            *self.records[i].annotation_mut(side) = Some(a);
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    image_id: String,
    path: String,
    kl_grade: i64,
}

/// Reads `image_id,path,kl_grade` (paths relative to `image_dir`) and,
/// optionally, an annotation CSV.
pub fn load_manifest(labels: &Path, annotations: Option<&Path>, image_dir: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::Reader::from_path(labels).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: labels.to_path_buf(),
            source,
        },
        other => data(format!("{}: {other:?}", labels.display())),
    })?;
    let headers = reader.headers().map_err(|e| data(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image_id", "path", "kl_grade"] {
        return Err(data(format!(
            "{}: label header must be image_id,path,kl_grade",
            labels.display()
        )));
    }
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
        let line = i + 2;
        let at = |msg: String| data(format!("{} row {line}: {msg}", labels.display()));
        let row = row.map_err(|e| at(e.to_string()))?;
        if !(0..GRADES as i64).contains(&row.kl_grade) {
            return Err(at(format!("grade {} outside 0..=4", row.kl_grade)));
        }
        if !seen.insert(row.image_id.clone()) {
            return Err(at(format!("duplicate image id {:?}", row.image_id)));
        }
        let path = image_dir.join(&row.path);
        if !path.is_file() {
            return Err(at(format!("missing image file {}", path.display())));
        }
        records.push(ManifestRecord {
            image_id: row.image_id,
            path,
            grade: row.kl_grade as u8,
            left: None,
            right: None,
        });
    }
    let mut manifest = DatasetManifest { records };
    if let Some(a) = annotations {
        manifest.attach_annotations(read_annotations(a)?)?;
    }
    Ok(manifest)
}

/// Writes a label CSV with paths relative to `image_dir`.
pub fn write_labels(path: &Path, manifest: &DatasetManifest, image_dir: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in &manifest.records {
        let rel = r.path.strip_prefix(image_dir).unwrap_or(&r.path);
        wtr.serialize(LabelRow {
            image_id: r.image_id.clone(),
            path: rel.to_string_lossy().into_owned(),
            kl_grade: r.grade as i64,
        })
        .map_err(|e| data(e.to_string()))?;
    }
    let mut bytes = wtr.into_inner().map_err(|e| data(e.to_string()))?;
    if manifest.is_empty() {
        bytes = b"image_id,path,kl_grade\n".to_vec();
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// `grade,count` lines.
pub fn grade_counts_text(counts: &[usize; GRADES]) -> String {
    let mut s = String::from("grade,count\n");
    for (g, c) in counts.iter().enumerate() {
        s.push_str(&format!("{g},{c}\n"));
    }
    s
}
