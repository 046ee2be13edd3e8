use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Provenance of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub n: usize,
}

impl DatasetMeta {
    pub fn new(generator: &str, seed: u64, n: usize) -> Self {
        Self { generator: generator.to_string(), seed, n }
    }
}

/// Features `x` (`N x D`) and targets `y` (`N x K`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    /// Feature names followed by target names.
    pub columns: Vec<String>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor, columns: Vec<String>, meta: DatasetMeta) -> Result<Self> {
        if x.ndim() != 2 || y.ndim() != 2 || x.shape()[0] != y.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "dataset needs N x D features and N x K targets, got {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        if columns.len() != x.cols() + y.cols() {
            return Err(Error::InvalidArgument(format!(
                "{} column names for {} columns",
                columns.len(),
                x.cols() + y.cols()
            )));
        }
        Ok(Self { x, y, columns, meta })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.y.cols()
    }

    /// Rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let pick = |t: &Tensor| {
            let c = t.cols();
            let mut d = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                d.extend_from_slice(t.row(r));
            }
            Tensor::new(vec![rows.len(), c], d).expect("row count matches")
        };
        let mut meta = self.meta.clone();
        meta.n = rows.len();
        Dataset { x: pick(&self.x), y: pick(&self.y), columns: self.columns.clone(), meta }
    }
}

/// Per-column standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
    /// Columns with zero spread, whose std was replaced by 1.
    pub x_constant: Vec<bool>,
    pub y_constant: Vec<bool>,
}

fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let (n, c) = (t.rows(), t.cols());
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(t.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let mut constant = vec![false; c];
    let std = var
        .iter()
        .zip(&mut constant)
        .map(|(s, flag)| {
            let sd = (s / n as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                *flag = true;
                1.0
            }
        })
        .collect();
    (mean, std, constant)
}

fn affine(t: &Tensor, shift: &[f64], scale: &[f64], forward: bool) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for (j, v) in out.data_mut().iter_mut().enumerate() {
        let k = j % c;
        *v = if forward { (*v - shift[k]) / scale[k] } else { *v * scale[k] + shift[k] };
    }
    out
}

impl NormStats {
    pub fn fit(data: &Dataset) -> Self {
        let (x_mean, x_std, x_constant) = column_stats(&data.x);
        let (y_mean, y_std, y_constant) = column_stats(&data.y);
        Self { x_mean, x_std, y_mean, y_std, x_constant, y_constant }
    }

    /// Statistics that leave data unchanged.
    pub fn identity(d: usize, k: usize) -> Self {
        Self {
            x_mean: vec![0.0; d],
            x_std: vec![1.0; d],
            y_mean: vec![0.0; k],
            y_std: vec![1.0; k],
            x_constant: vec![false; d],
            y_constant: vec![false; k],
        }
    }

    pub fn normalize(&self, data: &Dataset) -> Dataset {
        Dataset {
            x: self.normalize_x(&data.x),
            y: self.normalize_y(&data.y),
            columns: data.columns.clone(),
            meta: data.meta.clone(),
        }
    }

    pub fn normalize_x(&self, x: &Tensor) -> Tensor {
        affine(x, &self.x_mean, &self.x_std, true)
    }

    pub fn normalize_y(&self, y: &Tensor) -> Tensor {
        affine(y, &self.y_mean, &self.y_std, true)
    }

    pub fn denormalize_x(&self, x: &Tensor) -> Tensor {
        affine(x, &self.x_mean, &self.x_std, false)
    }

    pub fn denormalize_y(&self, y: &Tensor) -> Tensor {
        affine(y, &self.y_mean, &self.y_std, false)
    }
}

impl Dataset {
    /// Standardizes every column, returning the statistics used.
    pub fn normalize(&self) -> (Dataset, NormStats) {
        let stats = NormStats::fit(self);
        (stats.normalize(self), stats)
    }
}

/// Stacks windows `o_{t-n} .. o_t` into rows.
pub fn time_embed(obs: &Tensor, n: usize) -> Result<Tensor> {
    if obs.ndim() != 2 {
        return Err(Error::InvalidArgument(format!("time_embed: expected T x D, got {:?}", obs.shape())));
    }
    let (t, d) = (obs.shape()[0], obs.shape()[1]);
    if t <= n {
        return Err(Error::InvalidArgument(format!(
            "time_embed: {t} observations cannot fill a window of {n}"
        )));
    }
    let rows = t - n;
    let mut out = Vec::with_capacity(rows * (n + 1) * d);
    for r in 0..rows {
        out.extend_from_slice(&obs.data()[r * d..(r + n + 1) * d]);
    }
    Ok(Tensor::new(vec![rows, (n + 1) * d], out)?)
}

/// Writes a header row and one record per row, each value with 17
/// significant digits.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&data.columns).map_err(csv_err)?;
    let mut rec = Vec::with_capacity(data.columns.len());
    for i in 0..data.len() {
        rec.clear();
        for v in data.x.row(i).iter().chain(data.y.row(i)) {
            rec.push(format!("{v:.16e}"));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Reads a dataset whose header must equal `columns`; the first
/// `n_features` columns are features.
pub fn read_csv(path: &Path, columns: &[&str], n_features: usize) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Format(format!("{}: empty file", path.display())));
    }
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != columns {
        return Err(Error::Format(format!(
            "{}: header {:?} does not match expected {:?}",
            path.display(),
            got,
            columns
        )));
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut n = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("{}: row {}: bad number {:?}", path.display(), line + 2, field))
            })?;
            if j < n_features { xs.push(v) } else { ys.push(v) }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(
        Tensor::new(vec![n, n_features], xs)?,
        Tensor::new(vec![n, columns.len() - n_features], ys)?,
        columns.iter().map(|c| c.to_string()).collect(),
        DatasetMeta::new(&stem, 0, n),
    )
}

/// Writes `generator`, `seed`, `n` and `columns` as `key=value` lines.
pub fn write_meta(data: &Dataset, path: &Path) -> Result<()> {
    let text = format!(
        "generator={}\nseed={}\nn={}\ncolumns={}\n",
        data.meta.generator,
        data.meta.seed,
        data.meta.n,
        data.columns.join(",")
    );
    fs::write(path, text)?;
    Ok(())
}

/// Parses a sidecar written by [`write_meta`], returning the metadata and
/// column names.
pub fn read_meta(path: &Path) -> Result<(DatasetMeta, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    let (mut generator, mut seed, mut n, mut columns) = (None, None, None, None);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{}: expected key=value, got {line:?}", path.display())))?;
        let bad = |what: &str| Error::Format(format!("{}: bad {what} {v:?}", path.display()));
        match k.trim() {
            "generator" => generator = Some(v.trim().to_string()),
            "seed" => seed = Some(v.trim().parse().map_err(|_| bad("seed"))?),
            "n" => n = Some(v.trim().parse().map_err(|_| bad("n"))?),
            "columns" => columns = Some(v.split(',').map(|c| c.trim().to_string()).collect()),
            other => return Err(Error::Format(format!("{}: unknown key {other:?}", path.display()))),
        }
    }
    let missing = |k: &str| Error::Format(format!("{}: missing {k}", path.display()));
    Ok((
        DatasetMeta {
            generator: generator.ok_or_else(|| missing("generator"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            n: n.ok_or_else(|| missing("n"))?,
        },
        columns.ok_or_else(|| missing("columns"))?,
    ))
}
