//! Datasets (MNIST IDX files, the unit-circle probe set) and result export.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<f64>,
    provenance: String,
}

impl Dataset {
    /// Checks that the set is nonempty, rectangular, finite and labelled
    /// once per input.
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<f64>, provenance: impl Into<String>) -> Result<Self, DataError> {
        let first = inputs.first().ok_or(DataError::Empty)?.len();
        for (index, x) in inputs.iter().enumerate() {
            if x.len() != first {
                return Err(DataError::Ragged {
                    first,
                    other: x.len(),
                    index,
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { index });
            }
        }
        if labels.len() != inputs.len() {
            return Err(DataError::CountMismatch {
                images: inputs.len(),
                labels: labels.len(),
            });
        }
        if let Some(index) = labels.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { index });
        }
        Ok(Self {
            inputs,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn with_labels(self, labels: Vec<f64>) -> Result<Self, DataError> {
        Self::new(self.inputs, labels, self.provenance)
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Result<Self, DataError> {
        let n = n.min(self.len());
        Self::new(
            self.inputs[..n].to_vec(),
            self.labels[..n].to_vec(),
            format!("{} [first {n}]", self.provenance),
        )
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn truncated(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::Truncated {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses an IDX file's header; returns the dimensions and the payload.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32, ndims: usize) -> Result<(Vec<usize>, &'a [u8]), DataError> {
    let mut cur = Cursor::new(bytes);
    let found = cur
        .read_u32::<BigEndian>()
        .map_err(|_| truncated(path, "missing magic number"))?;
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    let dims = (0..ndims)
        .map(|_| cur.read_u32::<BigEndian>().map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| truncated(path, "incomplete header"))?;
    let payload = &bytes[cur.position() as usize..];
    let need: usize = dims.iter().product();
    if payload.len() < need {
        return Err(truncated(
            path,
            format!("expected {need} data bytes, found {}", payload.len()),
        ));
    }
    Ok((dims, &payload[..need]))
}

/// Loads the first `limit` samples of classes `pair.0` (label +1) and
/// `pair.1` (label −1); pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images: &Path, labels: &Path, pair: (u8, u8), limit: usize) -> Result<Dataset, DataError> {
    for c in [pair.0, pair.1] {
        if c > 9 {
            return Err(DataError::UnknownClass(c));
        }
    }
    if pair.0 == pair.1 {
        return Err(DataError::SameClass);
    }
    if limit == 0 {
        return Err(DataError::Empty);
    }
    let img_bytes = read_file(images)?;
    let lbl_bytes = read_file(labels)?;
    let (idims, pixels) = parse_idx(images, &img_bytes, IDX_IMAGES_MAGIC, 3)?;
    let (ldims, tags) = parse_idx(labels, &lbl_bytes, IDX_LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(DataError::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let dim = idims[1] * idims[2];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, &tag) in tags.iter().enumerate() {
        if xs.len() == limit {
            break;
        }
        if tag > 9 {
            return Err(DataError::UnknownClass(tag));
        }
        let y = if tag == pair.0 {
            1.0
        } else if tag == pair.1 {
            -1.0
        } else {
            continue;
        };
        xs.push(
            pixels[k * dim..(k + 1) * dim]
                .iter()
                .map(|&p| p as f64 / 255.0)
                .collect(),
        );
        ys.push(y);
    }
    let provenance = format!(
        "mnist-idx {} classes {}/{} limit {limit}",
        images.display(),
        pair.0,
        pair.1
    );
    Dataset::new(xs, ys, provenance)
}

/// Points `[cos γ, sin γ]` on the unit circle, labels zero.
pub fn circle_dataset(gammas: &[f64]) -> Result<Dataset, DataError> {
    let xs = gammas.iter().map(|g| vec![g.cos(), g.sin()]).collect();
    Dataset::new(xs, vec![0.0; gammas.len()], format!("circle n={}", gammas.len()))
}

/// `count` angles evenly spaced on `[−π, π)`; the endpoint is left out
/// since it is the same point as `−π`.
pub fn circle_gammas(count: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    (0..count).map(|k| -PI + 2.0 * PI * k as f64 / count as f64).collect()
}

/// Offline stand-in for a two-digit MNIST subset: `count` inputs in
/// `[0, 1]^dim` drawn around two random class prototypes, labels ±1
/// alternating.
pub fn synthetic_binary(count: usize, dim: usize, seed: u64) -> Result<Dataset, DataError> {
    use rand::Rng;
    let mut rng = crate::stats::stream_rng(seed, 0);
    let protos: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let mut xs = Vec::with_capacity(count);
    let mut ys = Vec::with_capacity(count);
    for k in 0..count {
        let c = k % 2;
        xs.push(
            protos[c]
                .iter()
                .map(|p| (p + rng.random_range(-0.25..0.25)).clamp(0.0, 1.0))
                .collect(),
        );
        ys.push(if c == 0 { 1.0 } else { -1.0 });
    }
    Dataset::new(xs, ys, format!("synthetic-binary n={count} d={dim} seed={seed}"))
}

/// Numeric table with named columns, exported as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    /// 17 significant digits, so every f64 survives a round trip.
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self, DataError> {
        let bad = |detail: String| DataError::Parse {
            path: path.to_path_buf(),
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let mut table = Table::new(header.split(','));
        for (k, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|c| c.parse::<f64>().map_err(|e| bad(format!("row {k}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != table.columns.len() {
                return Err(bad(format!(
                    "row {k} has {} cells, header has {}",
                    row.len(),
                    table.columns.len()
                )));
            }
            table.rows.push(row);
        }
        Ok(table)
    }
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file and concurrent writers never interleave.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = PathBuf::from(path);
    let name = format!(
        ".{}.{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    );
    tmp.set_file_name(name);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn export_csv(table: &Table, path: &Path) -> Result<(), DataError> {
    write_atomic(path, table.to_csv().as_bytes())
}

pub fn read_csv(path: &Path) -> Result<Table, DataError> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Table::parse_csv(&text, path)
}

/// Pretty JSON; serde_json writes the shortest decimal that parses back to
/// the same f64.
pub fn to_json_string<T: Serialize>(value: &T, path: &Path) -> Result<String, DataError> {
    serde_json::to_string_pretty(value).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn export_json<T: Serialize>(value: &T, path: &Path) -> Result<(), DataError> {
    let mut text = to_json_string(value, path)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_examples() {
        let d = circle_dataset(&[0.0, std::f64::consts::FRAC_PI_2, 1.234]).unwrap();
        assert_eq!(d.inputs()[0], vec![1.0, 0.0]);
        assert!((d.inputs()[1][0]).abs() < 1e-16 && d.inputs()[1][1] == 1.0);
        for x in d.inputs() {
            assert!((x[0].hypot(x[1]) - 1.0).abs() < 1e-15);
        }
        assert_eq!(d.labels(), &[0.0; 3]);
        assert!(matches!(circle_dataset(&[]), Err(DataError::Empty)));
        let g = circle_gammas(4);
        assert_eq!(g[0], -std::f64::consts::PI);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn dataset_validation() {
        assert!(matches!(
            Dataset::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0.0, 0.0], ""),
            Err(DataError::Ragged { index: 1, .. })
        ));
        assert!(matches!(
            Dataset::new(vec![vec![f64::NAN]], vec![0.0], ""),
            Err(DataError::NonFinite { index: 0 })
        ));
        assert!(matches!(
            Dataset::new(vec![vec![1.0]], vec![], ""),
            Err(DataError::CountMismatch { .. })
        ));
        let d = Dataset::new(vec![vec![1.0], vec![2.0]], vec![0.0, 0.0], "t").unwrap();
        let d = d.with_labels(vec![1.0, -1.0]).unwrap();
        assert_eq!(d.labels(), &[1.0, -1.0]);
        assert_eq!(d.head(1).unwrap().len(), 1);
    }

    #[test]
    fn csv_formatting_is_fixed() {
        let mut t = Table::new(["n", "v"]);
        t.push(vec![1.0, 0.1]);
        assert_eq!(t.to_csv(), "n,v\n1.0000000000000000e0,1.0000000000000001e-1\n");
        let empty = Table::new(["n", "rho"]);
        assert_eq!(empty.to_csv(), "n,rho\n");
        let back = Table::parse_csv(&empty.to_csv(), Path::new("x")).unwrap();
        assert_eq!(back, empty);
    }
}
