//! End-to-end runs behind the command line: ingest, train, sample,
//! evaluate and channel analysis. Every run writes its effective config
//! to `config.txt` in the output directory.

use crate::array::DenseArray;
use crate::checkpoint::{load_model, save_model};
use crate::config::RunConfig;
use crate::data::{
    read_csv_content, read_series, windows, write_tensor, write_windows, CsvContent,
    WindowedDataset,
};
use crate::diffusion::{cosine_schedule, sample};
use crate::error::{Error, Result};
use crate::losses::{median_bandwidths, pairwise_correlations};
use crate::metrics::{evaluate, DatasetPair, EvalOptions, MetricReport};
use crate::network::DimTs;
use crate::permutation::{
    adjacency_score, pearson_similarity, pearson_similarity_named, solve_ordering,
    ChannelPermutation,
};
use crate::train::{StepRecord, Trainer, LOG_HEADER};
use serde::Serialize;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MODEL_FILE: &str = "model.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.ckpt";
pub const LOG_FILE: &str = "loss_log.csv";
pub const CONFIG_FILE: &str = "config.txt";

fn prepare_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

/// Reads, scales and windows a raw CSV; writes `windows.csv`,
/// `windows.bin` and `scaler.json`.
pub fn run_ingest(cfg: &RunConfig, input: &Path, out_dir: &Path) -> Result<WindowedDataset> {
    let ds = crate::data::ingest_csv(input, cfg.length, cfg.stride, &cfg.drop_columns)?;
    prepare_dir(out_dir, cfg)?;
    write_windows(&out_dir.join("windows.csv"), &ds.names, &ds.windows)?;
    write_tensor(&out_dir.join("windows.bin"), &ds.windows)?;
    fs::write(
        out_dir.join("scaler.json"),
        serde_json::to_string_pretty(&ds.scaler)? + "\n",
    )?;
    Ok(ds)
}

/// Scan order for the channel blocks solved on the training windows.
pub fn solve_channel_order(windows: &DenseArray) -> Result<ChannelPermutation> {
    let c = windows.shape()[2];
    if c < 2 {
        return Ok(ChannelPermutation::identity(c));
    }
    solve_ordering(&pearson_similarity(windows)?)
}

/// Per-pair MMD bandwidths from the training windows (empty for `C = 1`).
pub fn correlation_bandwidths(windows: &DenseArray) -> Result<Vec<f64>> {
    if windows.shape()[2] < 2 || windows.shape()[1] < 2 {
        return Ok(Vec::new());
    }
    Ok(median_bandwidths(&pairwise_correlations(windows)?))
}

/// A fresh model for `ds` with the solved channel order.
pub fn build_model(cfg: &RunConfig, ds: &WindowedDataset) -> Result<DimTs> {
    let mut model = DimTs::new(cfg.model_config(ds.channels()))?;
    if cfg.solve_order {
        model.set_channel_order(solve_channel_order(&ds.windows)?.pi)?;
    }
    Ok(model)
}

pub struct Fitted {
    pub model: DimTs,
    pub records: Vec<StepRecord>,
}

/// Trains on in-memory windows. With an output directory, the loss log,
/// periodic checkpoints and the final checkpoint are written there;
/// `resume` names a directory holding a model and optimizer checkpoint.
pub fn fit(
    cfg: &RunConfig,
    ds: &WindowedDataset,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<Fitted> {
    if ds.seq_len() != cfg.length {
        return Err(Error::SchemaMismatch(format!(
            "dataset windows have length {}, config says {}",
            ds.seq_len(),
            cfg.length
        )));
    }
    let schedule = cosine_schedule(cfg.diffusion_steps)?;
    let bandwidths = correlation_bandwidths(&ds.windows)?;
    let model = build_model(cfg, ds)?;
    let mut trainer = Trainer::new(model, schedule, cfg.train_config()?, bandwidths)?;
    if let Some(dir) = resume {
        let (model, header) = load_model(&dir.join(MODEL_FILE))?;
        if header.model != trainer.model.config().clone() {
            return Err(Error::SchemaMismatch(
                "checkpoint model configuration differs from the run configuration".into(),
            ));
        }
        trainer.model = model;
        trainer.load_optimizer(&dir.join(OPTIMIZER_FILE))?;
    }
    let mut log = match out_dir {
        Some(dir) => {
            prepare_dir(dir, cfg)?;
            let path = dir.join(LOG_FILE);
            let append = resume.is_some() && path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)?;
            if !append {
                writeln!(f, "{LOG_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };
    let save = |trainer: &Trainer, dir: &Path| -> Result<()> {
        save_model(
            &dir.join(MODEL_FILE),
            &trainer.model,
            &ds.names,
            Some(&ds.scaler),
            trainer.step,
        )?;
        trainer.save_optimizer(&dir.join(OPTIMIZER_FILE))
    };
    let mut records = Vec::new();
    while trainer.step < cfg.steps {
        let rec = match trainer.step(&ds.windows) {
            Ok(r) => r,
            Err(e) => {
                // numeric blow-ups (NaN loss, degenerate parameters) leave a trace
                if let (Some(dir), 3) = (out_dir, e.exit_code()) {
                    let detail = match &e {
                        Error::NanLoss { diagnostic, .. } => diagnostic.clone(),
                        other => other.to_string(),
                    };
                    let text = format!("step {}: {detail}\n", trainer.step + 1);
                    fs::write(dir.join("nan_diagnostic.txt"), text)?;
                }
                return Err(e);
            }
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", rec.csv_line())?;
        }
        if rec.step % 100 == 0 {
            log::info!("step {} t={} loss {:.5}", rec.step, rec.t, rec.loss.total);
        }
        records.push(rec);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 {
                save(&trainer, dir)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save(&trainer, dir)?;
    }
    Ok(Fitted {
        model: trainer.model,
        records,
    })
}

pub fn run_train(
    cfg: &RunConfig,
    input: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<Fitted> {
    let ds = crate::data::ingest_csv(input, cfg.length, cfg.stride, &cfg.drop_columns)?;
    fit(cfg, &ds, Some(out_dir), resume)
}

/// Draws `n` windows in the model's normalized space.
pub fn sample_windows(model: &DimTs, cfg: &RunConfig, n: usize) -> Result<DenseArray> {
    let mc = model.config();
    let schedule = cosine_schedule(mc.diffusion_steps)?;
    sample(
        model,
        &schedule,
        n,
        (mc.seq_len, mc.channels),
        cfg.reverse_noise,
        cfg.seed,
    )
}

/// Samples from a checkpoint and writes `samples.csv` (original units) and
/// `samples.bin`. A `length` that differs from the checkpoint's is an error.
pub fn run_sample(
    cfg: &RunConfig,
    checkpoint: &Path,
    n: usize,
    length: Option<usize>,
    out_dir: &Path,
) -> Result<DenseArray> {
    let (model, header) = load_model(checkpoint)?;
    if let Some(l) = length {
        if l != model.config().seq_len {
            return Err(Error::SchemaMismatch(format!(
                "requested length {l}, checkpoint was trained with {}",
                model.config().seq_len
            )));
        }
    }
    let raw = sample_windows(&model, cfg, n)?;
    let out = match &header.scaler {
        Some(s) => s.denormalize(&raw)?,
        None => raw,
    };
    let names = if header.channel_names.len() == model.config().channels {
        header.channel_names.clone()
    } else {
        (0..model.config().channels)
            .map(|c| format!("c{c}"))
            .collect()
    };
    prepare_dir(out_dir, cfg)?;
    write_windows(&out_dir.join("samples.csv"), &names, &out)?;
    write_tensor(&out_dir.join("samples.bin"), &out)?;
    Ok(out)
}

fn load_windows(
    path: &Path,
    length: Option<usize>,
    stride: usize,
) -> Result<(Vec<String>, DenseArray)> {
    match read_csv_content(path)? {
        CsvContent::Windows { names, windows } => Ok((names, windows)),
        CsvContent::Series(s) => {
            let l = length.unwrap_or(s.rows());
            Ok((s.names, windows(&s.data, l, stride)?))
        }
    }
}

/// Compares two CSV datasets. Plain series are windowed with `length`
/// (defaulting to the other side's window length, or the whole series).
pub fn run_evaluate(
    real: &Path,
    synthetic: &Path,
    opts: &EvalOptions,
    length: Option<usize>,
    stride: usize,
    out_dir: Option<&Path>,
) -> Result<MetricReport> {
    let peek = |p: &Path| -> Result<Option<usize>> {
        Ok(match read_csv_content(p)? {
            CsvContent::Windows { windows, .. } => Some(windows.shape()[1]),
            CsvContent::Series(_) => None,
        })
    };
    let length = length.or(peek(synthetic)?).or(peek(real)?);
    let (rn, rw) = load_windows(real, length, stride)?;
    let (sn, sw) = load_windows(synthetic, length, stride)?;
    if rn != sn {
        return Err(Error::SchemaMismatch(format!(
            "real channels {rn:?}, synthetic {sn:?}"
        )));
    }
    let report = evaluate(&DatasetPair::new(&rw, &sw, &rn)?, opts)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
        fs::write(dir.join("report.txt"), report.to_string())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelReport {
    pub channels: Vec<String>,
    pub similarity: Vec<Vec<f64>>,
    /// channel indices in scan order
    pub order: Vec<usize>,
    pub order_names: Vec<String>,
    pub fiedler: Vec<f64>,
    pub eigenvalue: Option<f64>,
    pub objective: f64,
    pub adjacency_score: f64,
    pub identity_adjacency_score: f64,
    pub fallback: bool,
}

/// Similarity matrix and solved channel order of a raw CSV; windowed with
/// `length` when given, otherwise treated as one long window.
pub fn run_analyze(
    cfg: &RunConfig,
    input: &Path,
    length: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<ChannelReport> {
    let s = read_series(input, &cfg.drop_columns)?;
    if s.channels() < 2 {
        return Err(Error::InsufficientData(
            "channel analysis needs at least 2 channels".into(),
        ));
    }
    let w = windows(&s.data, length.unwrap_or(s.rows()), cfg.stride)?;
    let g = pearson_similarity_named(&w, &s.names)?;
    let perm = solve_ordering(&g)?;
    let c = s.channels();
    let identity: Vec<usize> = (0..c).collect();
    let report = ChannelReport {
        similarity: (0..c).map(|i| g.matrix().row(i).to_vec()).collect(),
        order_names: perm.pi.iter().map(|&i| s.names[i].clone()).collect(),
        order: perm.pi.clone(),
        fiedler: perm.fiedler.clone(),
        eigenvalue: perm.eigenvalue,
        objective: perm.objective,
        adjacency_score: adjacency_score(&perm.pi, &g),
        identity_adjacency_score: adjacency_score(&identity, &g),
        fallback: perm.fallback,
        channels: s.names,
    };
    if let Some(dir) = out_dir {
        prepare_dir(dir, cfg)?;
        fs::write(
            dir.join("channels.json"),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
        fs::write(dir.join("channels.txt"), report.to_text())?;
    }
    Ok(report)
}

pub fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ChannelReport {
    /// Plain-text form: the similarity matrix as CSV, then the Fiedler
    /// vector and the scan order.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# similarity\n");
        s += &(String::from("channel,") + &self.channels.join(",") + "\n");
        for (name, row) in self.channels.iter().zip(&self.similarity) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s += &format!("{name},{}\n", cells.join(","));
        }
        s += "# fiedler\nchannel,value\n";
        for (name, v) in self.channels.iter().zip(&self.fiedler) {
            s += &format!("{name},{v:.9}\n");
        }
        s += "# order\nposition,channel\n";
        for (k, name) in self.order_names.iter().enumerate() {
            s += &format!("{k},{name}\n");
        }
        s += &format!(
            "# adjacency score {:.6} (identity {:.6}){}\n",
            self.adjacency_score,
            self.identity_adjacency_score,
            if self.fallback {
                ", similarity graph disconnected: identity order"
            } else {
                ""
            }
        );
        s
    }
}
