use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{data, io_err, Error, Result};
use crate::imaging::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(data(format!("side must be `left` or `right`, got {other:?}"))),
        }
    }
}

/// Ground-truth joint box in original-image coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub side: Side,
    pub bbox: BBox,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    image_id: String,
    side: Side,
    x: i64,
    y: i64,
    w: i64,
    h: i64,
}

/// Reads `image_id,side,x,y,w,h`; at most one record per (image, side).
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let headers = reader.headers().map_err(|e| data(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image_id", "side", "x", "y", "w", "h"] {
        return Err(data(format!(
            "{}: annotation header must be image_id,side,x,y,w,h",
            path.display()
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| data(format!("{} row {line}: {e}", path.display())))?;
        let bbox =
            BBox::new(row.x, row.y, row.w, row.h).map_err(|e| data(format!("{} row {line}: {e}", path.display())))?;
        if !seen.insert((row.image_id.clone(), row.side)) {
            return Err(data(format!(
                "{} row {line}: duplicate annotation for {} {}",
                path.display(),
                row.image_id,
                row.side
            )));
        }
        out.push(AnnotationRecord {
            image_id: row.image_id,
            side: row.side,
            bbox,
        });
    }
    Ok(out)
}

/// Writes the CSV through a temporary file and a rename, so readers never see
/// a partial file.
pub fn write_annotations(path: impl AsRef<Path>, records: &[AnnotationRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut sorted: Vec<&AnnotationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.image_id, a.side).cmp(&(&b.image_id, b.side)));
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in sorted {
        wtr.serialize(Row {
            image_id: r.image_id.clone(),
            side: r.side,
            x: r.bbox.x,
            y: r.bbox.y,
            w: r.bbox.w,
            h: r.bbox.h,
        })
        .map_err(|e| data(e.to_string()))?;
    }
    let mut bytes = wtr.into_inner().map_err(|e| data(e.to_string()))?;
    if records.is_empty() {
        bytes = b"image_id,side,x,y,w,h\n".to_vec();
    }
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}
