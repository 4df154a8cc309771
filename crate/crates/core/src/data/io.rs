//! CSV domains and TOML task manifests.
//!
//! CSV: UTF-8, comma separated, header `feature_0,...,feature_{d-1}` with an
//! optional trailing `label` column. Features are decimal or scientific floats
//! and must be finite; labels are nonnegative integers.
//!
//! Manifest:
//!
//! ```toml
//! num_classes = 4
//! sources = ["source_0.csv", "source_1.csv"]
//! target = "target.csv"
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabeledDomain, MultiSourceTask, UnlabeledDomain};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Contents of one CSV file; `labels` is `None` when the column is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvDomain {
    pub features: Tensor<f64>,
    pub labels: Option<Vec<usize>>,
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line: line as usize,
        msg: msg.into(),
    }
}

/// Reads a domain. `expected_dim`, when given, must match the header.
pub fn load_csv(path: &Path, expected_dim: Option<usize>) -> Result<CsvDomain> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => parse_err(path, 1, format!("{other:?}")),
        })?;
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    let has_label = cols.last() == Some(&"label");
    let d = cols.len() - usize::from(has_label);
    if d == 0 {
        return Err(parse_err(path, 1, "no feature columns"));
    }
    for (i, name) in cols[..d].iter().enumerate() {
        let want = format!("feature_{i}");
        if *name != want {
            return Err(parse_err(
                path,
                1,
                format!("missing column {want} (found {name:?})"),
            ));
        }
    }
    if let Some(e) = expected_dim {
        if e != d {
            return Err(parse_err(path, 1, format!("expected {e} feature columns, found {d}")));
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", cols.len(), rec.len()),
            ));
        }
        for (i, cell) in rec.iter().take(d).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("non-numeric value {cell:?} in feature_{i}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite value {cell:?} in feature_{i}")));
            }
            data.push(v);
        }
        if has_label {
            let cell = &rec[d];
            let y: usize = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("invalid label {cell:?}")))?;
            labels.push(y);
        }
    }
    let n = data.len() / d;
    Ok(CsvDomain {
        features: Tensor::new(&[n, d], data)?,
        labels: has_label.then_some(labels),
    })
}

/// Writes features, plus a `label` column when `labels` is given.
pub fn write_csv(path: &Path, features: &Tensor<f64>, labels: Option<&[usize]>) -> Result<()> {
    let (n, d) = features.require_rank2("write_csv")?;
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Contract(format!("{n} rows but {} labels", l.len())));
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header: Vec<String> = (0..d).map(|i| format!("feature_{i}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..n {
        let mut rec: Vec<String> = features.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub sources: Vec<PathBuf>,
    pub target: PathBuf,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every domain listed in a manifest. Target labels, when present in the
/// target file, are kept for evaluation only.
pub fn load_manifest(path: &Path) -> Result<MultiSourceTask> {
    let text = std::fs::read_to_string(path)?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e
            .span()
            .map_or(0, |s| text[..s.start].matches('\n').count() + 1),
        msg: e.message().to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let target = load_csv(&resolve(base, &m.target), None)?;
    let d = target.features.cols();
    let mut sources = Vec::with_capacity(m.sources.len());
    for s in &m.sources {
        let p = resolve(base, s);
        let dom = load_csv(&p, Some(d))?;
        let labels = dom.labels.ok_or_else(|| Error::Parse {
            path: p.display().to_string(),
            line: 1,
            msg: "source domain needs a label column".into(),
        })?;
        sources.push(LabeledDomain::new(dom.features, labels)?);
    }
    MultiSourceTask::new(
        sources,
        UnlabeledDomain::new(target.features)?,
        target.labels,
        m.num_classes,
    )
}

/// Writes `source_<j>.csv`, `target.csv` and `manifest.toml` into `dir`;
/// returns the written paths with the manifest last.
pub fn write_manifest(dir: &Path, task: &MultiSourceTask) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut names = Vec::new();
    for (j, s) in task.sources().iter().enumerate() {
        let name = format!("source_{j}.csv");
        let p = dir.join(&name);
        write_csv(&p, s.features(), Some(s.labels()))?;
        written.push(p);
        names.push(PathBuf::from(name));
    }
    let tp = dir.join("target.csv");
    write_csv(&tp, task.target().features(), task.target_labels_eval())?;
    written.push(tp);
    let manifest = Manifest {
        num_classes: task.num_classes(),
        sources: names,
        target: PathBuf::from("target.csv"),
    };
    let mp = dir.join("manifest.toml");
    std::fs::write(
        &mp,
        toml::to_string(&manifest).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?,
    )?;
    written.push(mp);
    Ok(written)
}
