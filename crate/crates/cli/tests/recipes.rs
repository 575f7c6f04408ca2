//! Cheap recipe-level tests on miniature models: resumability, pairing,
//! determinism of outputs, and the CLI binary surface.

use std::path::{Path, PathBuf};
use std::process::Command;

use muwarm::experiments::{
    grid_search, run_report, run_succ, run_warmstart, ExperimentSpec, SharedDims, Workspace,
};
use muwarm::report;

fn tiny_spec(out: &Path) -> ExperimentSpec {
    ExperimentSpec {
        out_dir: out.to_path_buf(),
        shared: SharedDims {
            n_layers: 2,
            head_size: 8,
            vocab_size: 256,
            block_size: 32,
        },
        base_width: 16,
        target_width: 32,
        stage_widths: vec![16, 24, 32],
        ladder_widths: vec![16, 32, 64],
        seeds: vec![1, 2],
        tokens_per_param: 1.0,
        target_tokens_per_param: Some(1.0),
        grid_tokens_per_param: Some(0.5),
        eval_tokens: Some(2048),
        batch_size: 8,
        lr_grid: vec![0.0625, 0.03125],
        ..ExperimentSpec::default()
    }
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("muwarm_recipe_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn warmstart_recipe_pairs_runs_and_improves_initial_loss() {
    let out = fresh_dir("warmstart");
    let spec = tiny_spec(&out);
    let ws = Workspace::new(&spec.out_dir, spec.corpus().unwrap()).unwrap();
    let report = run_warmstart(&spec, &ws).unwrap();
    // per-seed pairing: warm and vanilla alternate
    assert_eq!(report.runs.len(), 2 * spec.seeds.len());
    let init_assert = &report.assertions[0];
    assert!(
        init_assert.pass,
        "initial-loss improvement failed: {}",
        init_assert.detail
    );
    assert!(out.join("warmstart_comparison.json").exists());
}

#[test]
fn runs_are_resumable_and_deterministic_across_directories() {
    let out1 = fresh_dir("det1");
    let out2 = fresh_dir("det2");
    let spec1 = tiny_spec(&out1);
    let ws1 = Workspace::new(&spec1.out_dir, spec1.corpus().unwrap()).unwrap();
    let r1 = muwarm::experiments::run_train(&spec1, &ws1).unwrap();

    // rerunning with an existing output directory reuses completed runs
    let before: Vec<_> = r1
        .runs
        .iter()
        .map(|r| std::fs::metadata(&r.metrics_path).unwrap().modified().unwrap())
        .collect();
    let r1b = muwarm::experiments::run_train(&spec1, &ws1).unwrap();
    let after: Vec<_> = r1b
        .runs
        .iter()
        .map(|r| std::fs::metadata(&r.metrics_path).unwrap().modified().unwrap())
        .collect();
    assert_eq!(before, after, "second invocation rewrote completed runs");

    // equal seeds in a different directory produce byte-identical metrics
    let spec2 = tiny_spec(&out2);
    let ws2 = Workspace::new(&spec2.out_dir, spec2.corpus().unwrap()).unwrap();
    let r2 = muwarm::experiments::run_train(&spec2, &ws2).unwrap();
    for (a, b) in r1.runs.iter().zip(&r2.runs) {
        assert_eq!(a.run_id, b.run_id);
        let ma = std::fs::read(&a.metrics_path).unwrap();
        let mb = std::fs::read(&b.metrics_path).unwrap();
        assert_eq!(ma, mb, "metrics differ across directories");
    }
}

#[test]
fn report_regeneration_is_byte_identical() {
    let out = fresh_dir("report");
    let spec = tiny_spec(&out);
    let ws = Workspace::new(&spec.out_dir, spec.corpus().unwrap()).unwrap();
    muwarm::experiments::run_train(&spec, &ws).unwrap();
    run_report(&spec, &ws).unwrap();
    let paths = [
        out.join("report/loss_vs_tokens.svg"),
        out.join("report/loss_vs_flops.svg"),
        out.join("report/summary.txt"),
        out.join("report/summary.json"),
    ];
    let first: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
    run_report(&spec, &ws).unwrap();
    for (p, want) in paths.iter().zip(&first) {
        assert_eq!(&std::fs::read(p).unwrap(), want, "{}", p.display());
    }
}

#[test]
fn empty_run_set_still_produces_a_report() {
    let out = fresh_dir("empty_report");
    let spec = tiny_spec(&out);
    let ws = Workspace::new(&spec.out_dir, spec.corpus().unwrap()).unwrap();
    let rep = run_report(&spec, &ws).unwrap();
    assert!(rep.all_pass());
    assert!(out.join("report/summary.txt").exists());
}

#[test]
fn smoothed_curve_endpoints_stay_within_kernel_support_of_raw() {
    let raw: Vec<f64> = (0..60).map(|i| 3.0 - 0.03 * i as f64 + ((i * 37 % 11) as f64) * 0.01).collect();
    let sigma = 1.2;
    let smoothed = muwarm_core::metrics::gaussian_smooth(&raw, sigma);
    let radius = (3.0 * sigma).ceil() as usize;
    for (idx, s) in [(0usize, smoothed[0]), (raw.len() - 1, *smoothed.last().unwrap())] {
        let lo = idx.saturating_sub(radius);
        let hi = (idx + radius).min(raw.len() - 1);
        let window = &raw[lo..=hi];
        let min = window.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(s >= min - 1e-12 && s <= max + 1e-12, "endpoint {idx}: {s} not in [{min}, {max}]");
    }
}

#[test]
fn single_cell_grid_is_its_own_argmin() {
    let out = fresh_dir("grid1");
    let spec = ExperimentSpec {
        lr_grid: vec![0.03125],
        batch_grid: vec![8],
        seeds: vec![1],
        ..tiny_spec(&out)
    };
    let ws = Workspace::new(&spec.out_dir, spec.corpus().unwrap()).unwrap();
    let g = grid_search(&spec, &ws, &spec.scheme, spec.base_width).unwrap();
    assert_eq!(g.argmin_lr, 0.03125);
    assert_eq!(g.argmin_batch, 8);
    assert!(g.winner_ckpt.exists());
}

#[test]
fn one_stage_chain_degenerates_to_plain_warmstart_transfer() {
    let out = fresh_dir("succ2");
    let spec = ExperimentSpec {
        stage_widths: vec![16, 32],
        seeds: vec![3],
        ..tiny_spec(&out)
    };
    let ws = Workspace::new(&spec.out_dir, spec.corpus().unwrap()).unwrap();
    let rep = run_succ(&spec, &ws).unwrap();
    // two stages -> one boundary; arms = stages + vanilla + single
    assert_eq!(rep.runs.len(), 4);
    let token_assert = rep
        .assertions
        .iter()
        .find(|a| a.name.contains("tokens"))
        .unwrap();
    assert!(token_assert.pass, "{}", token_assert.detail);
}

#[test]
fn cli_binary_reports_and_exits_zero() {
    let out = fresh_dir("cli");
    let spec = tiny_spec(&out);
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_muwarm"))
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--seed",
            "7",
        ])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(status.status.success(), "stdout: {stdout}");
    assert!(stdout.contains("[PASS]"), "stdout: {stdout}");
    // unknown subcommand exits non-zero
    let bad = Command::new(env!("CARGO_BIN_EXE_muwarm"))
        .arg("frobnicate")
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn line_chart_is_deterministic_for_fixed_inputs() {
    let series = vec![
        report::Series {
            label: "a".into(),
            points: vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)],
        },
        report::Series {
            label: "b".into(),
            points: vec![(0.0, 2.0), (2.0, 1.0)],
        },
    ];
    let one = report::line_chart("t", "x", "y", &series);
    let two = report::line_chart("t", "x", "y", &series);
    assert_eq!(one, two);
    assert!(one.starts_with("<svg"));
    assert!(one.contains("polyline"));
}
