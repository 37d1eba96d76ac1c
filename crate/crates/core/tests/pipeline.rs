use dimts::config::RunConfig;
use dimts::data::{block_correlated, phase_shifted_sines, write_series, WindowedDataset};
use dimts::diffusion::{cosine_schedule, forward_noise};
use dimts::metrics::EvalOptions;
use dimts::pipeline::{fit, run_analyze, run_evaluate, run_ingest, run_sample, run_train};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;

fn small_config(steps: u64) -> RunConfig {
    RunConfig {
        length: 24,
        stride: 2,
        hidden_dim: 16,
        state_dim: 4,
        time_features: 16,
        diffusion_steps: 50,
        steps,
        batch_size: 8,
        seed: 5,
        ..RunConfig::default()
    }
}

fn sines() -> WindowedDataset {
    WindowedDataset::from_series(&phase_shifted_sines(240, 3, 12.0, 0.05, 1), 24, 2).unwrap()
}

#[test]
fn smoke_training_reduces_loss() {
    let fitted = fit(&small_config(200), &sines(), None, None).unwrap();
    let total: Vec<f64> = fitted.records.iter().map(|r| r.loss.total).collect();
    assert_eq!(total.len(), 200);
    assert!(total.iter().all(|v| v.is_finite()));
    let head = total[..50].iter().sum::<f64>() / 50.0;
    let tail = total[150..].iter().sum::<f64>() / 50.0;
    assert!(tail < head, "first 50 mean {head}, last 50 mean {tail}");
}

#[test]
fn loss_log_is_seed_deterministic() {
    let ds = sines();
    let a = fit(&small_config(20), &ds, None, None).unwrap();
    let b = fit(&small_config(20), &ds, None, None).unwrap();
    let lines =
        |f: &dimts::pipeline::Fitted| f.records.iter().map(|r| r.csv_line()).collect::<Vec<_>>();
    assert_eq!(lines(&a), lines(&b));
    let c = fit(
        &RunConfig {
            seed: 6,
            ..small_config(20)
        },
        &ds,
        None,
        None,
    )
    .unwrap();
    assert_ne!(lines(&a), lines(&c));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = sines();
    let whole = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    fit(&small_config(10), &ds, Some(whole.path()), None).unwrap();
    fit(&small_config(5), &ds, Some(split.path()), None).unwrap();
    fit(
        &small_config(10),
        &ds,
        Some(split.path()),
        Some(split.path()),
    )
    .unwrap();
    for f in ["loss_log.csv", "model.ckpt", "optimizer.ckpt"] {
        let x = fs::read(whole.path().join(f)).unwrap();
        let y = fs::read(split.path().join(f)).unwrap();
        assert!(x == y, "{f} differs after resume");
    }
}

#[test]
fn train_sample_and_evaluate_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("series.csv");
    let series = phase_shifted_sines(240, 3, 12.0, 0.05, 2);
    write_series(&csv, &series).unwrap();
    let cfg = small_config(30);

    let ds = run_ingest(&cfg, &csv, &dir.path().join("ingest")).unwrap();
    assert_eq!(ds.windows.shape(), &[109, 24, 3]);
    let windows_csv = dir.path().join("ingest/windows.csv");
    assert!(windows_csv.exists());

    let train_dir = dir.path().join("train");
    run_train(&cfg, &csv, &train_dir, None).unwrap();
    let out = run_sample(
        &cfg,
        &train_dir.join("model.ckpt"),
        4,
        None,
        &dir.path().join("sample"),
    )
    .unwrap();
    assert_eq!(out.shape(), &[4, 24, 3]);
    // samples are clipped to [-1, 1] then mapped back through the scaler
    for c in 0..3 {
        let col = series.data.column(c);
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        for w in 0..4 {
            for t in 0..24 {
                let v = out.data()[(w * 24 + t) * 3 + c];
                assert!(
                    v >= lo - 1e-9 && v <= hi + 1e-9,
                    "sample {v} outside [{lo}, {hi}]"
                );
            }
        }
    }
    assert!(run_sample(
        &cfg,
        &train_dir.join("model.ckpt"),
        1,
        Some(12),
        &dir.path().join("x")
    )
    .is_err());

    let report = run_evaluate(
        &windows_csv,
        &windows_csv,
        &EvalOptions::default(),
        None,
        1,
        Some(dir.path()),
    )
    .unwrap();
    for (name, v) in report.scores() {
        assert!(v.unwrap().abs() < 1e-12, "{name} = {v:?}");
    }
    assert!(dir.path().join("report.json").exists());
    let synth = dir.path().join("sample/samples.csv");
    let report =
        run_evaluate(&windows_csv, &synth, &EvalOptions::default(), None, 1, None).unwrap();
    assert!(report.scores().iter().all(|(_, v)| v.unwrap().is_finite()));
}

#[test]
fn analyze_places_correlated_channels_together() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("block.csv");
    write_series(&csv, &block_correlated(400, 3)).unwrap();
    let report = run_analyze(&RunConfig::default(), &csv, None, Some(dir.path())).unwrap();
    let pos = |name: &str| report.order_names.iter().position(|n| n == name).unwrap();
    assert_eq!(
        pos("a").abs_diff(pos("c")),
        1,
        "order {:?}",
        report.order_names
    );
    assert!(report.adjacency_score >= report.identity_adjacency_score);
    assert!(!report.fallback);
    assert!(dir.path().join("channels.json").exists());
}

#[test]
fn forward_marginal_matches_schedule() {
    // x_t = sqrt(ab) x0 + sqrt(1 - ab) eps, so with x0 fixed the empirical
    // variance of x_t is 1 - ab
    let s = cosine_schedule(100).unwrap();
    let x0 = dimts::DenseArray::filled(&[20000, 1], 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in [1, 30, 70, 100] {
        let noised = forward_noise(&x0, t, &s, &mut rng).unwrap();
        let v = noised.x_t.data();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let ab = s.alpha_bar(t);
        assert!((mean - ab.sqrt() * 0.4).abs() < 0.03, "t={t} mean {mean}");
        assert!(
            (var - (1.0 - ab)).abs() < 0.05 * (1.0 - ab) + 1e-4,
            "t={t} var {var}"
        );
    }
}
