//! Series ingestion, windowing, [-1, 1] scaling, file formats for windows
//! and tensors, and synthetic generators.

use crate::array::DenseArray;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// A multichannel series, `[rows x C]`, with channel names.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub names: Vec<String>,
    pub data: DenseArray,
}

impl RawSeries {
    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn channels(&self) -> usize {
        self.names.len()
    }
}

fn parse_cell(cell: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        line,
        column: column.to_string(),
        message: format!("not a number: {cell:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            column: column.to_string(),
            message: format!("non-finite value {cell:?}"),
        });
    }
    Ok(v)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?)
}

/// Reads a header-plus-numbers CSV, leaving out the columns named in `drop`.
/// Line numbers in errors count the header as line 1.
pub fn read_series(path: &Path, drop: &[String]) -> Result<RawSeries> {
    let mut rdr = csv_reader(path)?;
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let keep: Vec<usize> = (0..header.len())
        .filter(|&i| !drop.contains(&header[i]))
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{}: no data columns",
            path.display()
        )));
    }
    let names: Vec<String> = keep.iter().map(|&i| header[i].clone()).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = r + 2;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                column: String::new(),
                message: format!("{} fields, header has {}", rec.len(), header.len()),
            });
        }
        for &i in &keep {
            data.push(parse_cell(&rec[i], line, &header[i])?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyInput(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    Ok(RawSeries {
        data: DenseArray::matrix(rows, names.len(), data)?,
        names,
    })
}

pub fn write_series(path: &Path, series: &RawSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&series.names)?;
    for r in 0..series.rows() {
        w.write_record(series.data.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-channel affine map of `[min, max]` onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(series: &RawSeries) -> Result<Self> {
        let c = series.channels();
        let mut min = vec![f64::INFINITY; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for r in 0..series.rows() {
            for (j, &v) in series.data.row(r).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        for j in 0..c {
            if !(max[j] > min[j]) {
                return Err(Error::ConstantChannel(series.names[j].clone()));
            }
        }
        Ok(Self { min, max })
    }

    pub fn channels(&self) -> usize {
        self.min.len()
    }

    fn check(&self, x: &DenseArray) -> Result<()> {
        if x.shape().last() != Some(&self.channels()) {
            return Err(Error::SchemaMismatch(format!(
                "scaler has {} channels, data is {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Works on any array whose last axis is the channel axis.
    pub fn normalize(&self, x: &DenseArray) -> Result<DenseArray> {
        self.check(x)?;
        let c = self.channels();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % c;
            *v = 2.0 * (*v - self.min[j]) / (self.max[j] - self.min[j]) - 1.0;
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &DenseArray) -> Result<DenseArray> {
        self.check(x)?;
        let c = self.channels();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % c;
            *v = (*v + 1.0) / 2.0 * (self.max[j] - self.min[j]) + self.min[j];
        }
        Ok(out)
    }
}

/// Sliding windows `[M x len x C]` taken every `stride` rows.
pub fn windows(data: &DenseArray, len: usize, stride: usize) -> Result<DenseArray> {
    if len == 0 || stride == 0 {
        return Err(Error::Config(
            "window length and stride must be positive".into(),
        ));
    }
    let (rows, c) = (data.rows(), data.cols());
    if rows < len {
        return Err(Error::TooShort { rows, length: len });
    }
    let m = (rows - len) / stride + 1;
    let mut out = Vec::with_capacity(m * len * c);
    for w in 0..m {
        let start = w * stride * c;
        out.extend_from_slice(&data.data()[start..start + len * c]);
    }
    DenseArray::new(vec![m, len, c], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// normalized, `[M x L x C]`
    pub windows: DenseArray,
    pub scaler: MinMaxScaler,
    pub names: Vec<String>,
}

impl WindowedDataset {
    pub fn from_series(series: &RawSeries, len: usize, stride: usize) -> Result<Self> {
        let scaler = MinMaxScaler::fit(series)?;
        let norm = scaler.normalize(&series.data)?;
        Ok(Self {
            windows: windows(&norm, len, stride)?,
            scaler,
            names: series.names.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.windows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.windows.shape()[2]
    }
}

pub fn ingest_csv(
    path: &Path,
    len: usize,
    stride: usize,
    drop: &[String],
) -> Result<WindowedDataset> {
    WindowedDataset::from_series(&read_series(path, drop)?, len, stride)
}

const WINDOW_MARK: &str = "# window";

/// Writes `[M x L x C]` windows: a header row of channel names, then each
/// window preceded by a `# window <i>` line.
pub fn write_windows(path: &Path, names: &[String], windows: &DenseArray) -> Result<()> {
    if windows.shape().len() != 3 || windows.shape()[2] != names.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} names for windows {:?}",
            names.len(),
            windows.shape()
        )));
    }
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    w.write_record(names)?;
    let (m, l) = (windows.shape()[0], windows.shape()[1]);
    for i in 0..m {
        w.write_record([format!("{WINDOW_MARK} {i}")])?;
        let slab = windows.slab(i);
        for t in 0..l {
            w.write_record(slab.row(t).iter().map(|v| v.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Either windows written by [`write_windows`] or a plain series.
#[derive(Debug, Clone, PartialEq)]
pub enum CsvContent {
    Windows {
        names: Vec<String>,
        windows: DenseArray,
    },
    Series(RawSeries),
}

/// Reads a CSV and tells windowed files (with separator lines) apart from
/// plain series.
pub fn read_csv_content(path: &Path) -> Result<CsvContent> {
    let mut rdr = csv_reader(path)?;
    let names: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let c = names.len();
    let mut groups: Vec<Vec<f64>> = Vec::new();
    let mut plain: Vec<f64> = Vec::new();
    let mut windowed = false;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = r + 2;
        if rec.get(0).is_some_and(|f| f.starts_with(WINDOW_MARK)) {
            windowed = true;
            groups.push(Vec::new());
            continue;
        }
        if rec.len() != c {
            return Err(Error::Parse {
                line,
                column: String::new(),
                message: format!("{} fields, header has {c}", rec.len()),
            });
        }
        let target = match groups.last_mut() {
            Some(g) => g,
            None => &mut plain,
        };
        for (j, cell) in rec.iter().enumerate() {
            target.push(parse_cell(cell, line, &names[j])?);
        }
    }
    if windowed {
        if !plain.is_empty() {
            return Err(Error::Parse {
                line: 2,
                column: String::new(),
                message: "values before the first window marker".into(),
            });
        }
        let len = groups[0].len() / c.max(1);
        if len == 0 || groups.iter().any(|g| g.len() != len * c) {
            return Err(Error::SchemaMismatch(format!(
                "{}: windows have unequal or zero length",
                path.display()
            )));
        }
        let m = groups.len();
        let windows = DenseArray::new(vec![m, len, c], groups.concat())?;
        Ok(CsvContent::Windows { names, windows })
    } else {
        if plain.is_empty() {
            return Err(Error::EmptyInput(format!(
                "{}: no data rows",
                path.display()
            )));
        }
        let rows = plain.len() / c;
        Ok(CsvContent::Series(RawSeries {
            data: DenseArray::matrix(rows, c, plain)?,
            names,
        }))
    }
}

const TENSOR_MAGIC: &[u8; 8] = b"DIMTSTNS";
const TENSOR_VERSION: u32 = 1;

/// Flat tensor file: magic, `u32` version, `u32` rank, `u64` dims, then the
/// entries as little-endian `f64` in row-major order.
pub fn write_tensor(path: &Path, x: &DenseArray) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(x.shape().len() as u32).to_le_bytes())?;
    for &d in x.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in x.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<DenseArray> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a tensor file",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != TENSOR_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported tensor version {version}"
        )));
    }
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    DenseArray::new(shape, data)
}

/// `x_c(t) = sin(2 pi t / period + 2 pi c / C) + noise * N(0, 1)`.
pub fn phase_shifted_sines(
    rows: usize,
    channels: usize,
    period: f64,
    noise: f64,
    seed: u64,
) -> RawSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = DenseArray::from_fn2(rows, channels, |t, c| {
        let phase = TAU * c as f64 / channels as f64;
        let e: f64 = rng.sample(StandardNormal);
        (TAU * t as f64 / period + phase).sin() + noise * e
    });
    RawSeries {
        names: (0..channels).map(|c| format!("s{c}")).collect(),
        data,
    }
}

/// Three channels where the first and last share a random walk and the
/// middle one is independent.
pub fn block_correlated(rows: usize, seed: u64) -> RawSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut walk = 0.0;
    let mut other = 0.0;
    let mut data = Vec::with_capacity(rows * 3);
    for _ in 0..rows {
        walk += rng.sample::<f64, _>(StandardNormal);
        other += rng.sample::<f64, _>(StandardNormal);
        let jitter: f64 = rng.sample(StandardNormal);
        data.extend([walk, other, walk + 0.3 * jitter]);
    }
    RawSeries {
        names: vec!["a".into(), "b".into(), "c".into()],
        data: DenseArray::matrix(rows, 3, data).expect("valid shape"),
    }
}
