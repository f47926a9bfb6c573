use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use wiselab::net::{self, ArchConfig};
use wiselab::report;
use wiselab::tensorstore::{load_checkpoint, save_checkpoint, Scope};
use wiselab::wise::{select_alpha_greedy, AccReference};

fn wiselab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wiselab")).args(args).output().unwrap()
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(s.lines().count(), 1, "stderr: {s:?}");
    s
}

/// Overrides that shrink the shipped config to a seconds-long run.
const TINY: &[&str] = &[
    "--set", "arch.n_points=32",
    "--set", "arch.encoder_widths=[3,8,16]",
    "--set", "arch.head_widths=[16,8,8,8]",
    "--set", "source_data.per_class_train=4",
    "--set", "source_data.per_class_test=3",
    "--set", "target_data.per_class_train=4",
    "--set", "target_data.per_class_test=3",
    "--set", "pretrain.epochs=2",
    "--set", "finetune.epochs=2",
    "--set", "probe.epochs=2",
    "--set", "fewshot.k_shot=2",
    "--set", "fewshot.q_query=2",
    "--set", "fewshot.episodes=3",
    "--set", "seeds=[0]",
];

fn tiny(extra: &[&str]) -> Vec<String> {
    TINY.iter().chain(extra).map(|s| s.to_string()).collect()
}

#[test]
fn unknown_subcommand_exits_2() {
    let o = wiselab(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("error: kind=usage"));
}

#[test]
fn invalid_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.wlpd");
    let o = wiselab(&["gen-data", "--which", "source", "--out", out.to_str().unwrap(), "--set", "sweep.alphas=[1.2]"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr_line(&o).starts_with("error: kind=config"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"arch\": 1}").unwrap();
    let o = wiselab(&["run-experiment", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn runtime_failure_exits_1() {
    let o = wiselab(&["select-alpha", "--report", "/nonexistent/r.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_line(&o).starts_with("error: kind=runtime"));
}

#[test]
fn select_alpha_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let text = format!(
        "{}\n1.0,wise_ft_lp,90.00,88.00,,,a\n0.9,wise_ft_lp,89.95,89.00,,,b\n0.8,wise_ft_lp,89.50,90.00,,,c\n",
        report::HEADER
    );
    fs::write(&path, &text).unwrap();
    let rows = report::parse(&text).unwrap();
    for (tol, reference, flag) in [
        (0.1, AccReference::Baseline, "baseline"),
        (0.5, AccReference::Baseline, "baseline"),
        (0.1, AccReference::Previous, "previous"),
    ] {
        let want = select_alpha_greedy(&rows, tol, reference).unwrap();
        let o = wiselab(&[
            "select-alpha", "--report", path.to_str().unwrap(),
            "--drop-tol", &tol.to_string(), "--acc-reference", flag,
        ]);
        assert!(o.status.success(), "{o:?}");
        let got: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(got["alpha"].as_f64().unwrap(), want.alpha);
        assert_eq!(got["reason"].as_str().unwrap(), want.reason.as_str());
    }
}

#[test]
fn interpolate_at_zero_returns_pt_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let arch = ArchConfig::new(16, &[8, 8], 8, 4);
    let mut pt = net::init_params(&arch, false, 1).unwrap();
    pt.set_meta("provenance", "pt");
    let mut ft = net::init_params(&arch, true, 2).unwrap();
    ft.set_meta("provenance", "ft");
    let (p, f, o) = (dir.path().join("p"), dir.path().join("f"), dir.path().join("o"));
    save_checkpoint(&pt, &p).unwrap();
    save_checkpoint(&ft, &f).unwrap();
    let out = wiselab(&[
        "interpolate", "--pt", p.to_str().unwrap(), "--ft", f.to_str().unwrap(),
        "--alpha", "0", "--out", o.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let blended = load_checkpoint(&o).unwrap();
    assert!(blended.entries_bit_eq(&pt, Scope::Backbone));
    assert_eq!(blended.meta("alpha"), Some("0"));

    let bad = wiselab(&[
        "interpolate", "--pt", p.to_str().unwrap(), "--ft", f.to_str().unwrap(),
        "--alpha", "1.5", "--out", o.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_experiment_writes_complete_deterministic_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let args = tiny(&["--set", &format!("output_dir={}", out.display())]);
        let mut argv = vec!["run-experiment"];
        argv.extend(args.iter().map(String::as_str));
        let o = wiselab(&argv);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        trees.push(files(&out));
    }
    assert_eq!(trees[0], trees[1]);

    let root = dir.path().join("a");
    let seed = root.join("seed_0");
    for (name, mode) in [("sweep_wise_ft.csv", "wise_ft"), ("sweep_wise_ft_lp.csv", "wise_ft_lp")] {
        let rows = report::load(seed.join(name)).unwrap();
        assert_eq!(rows.len(), 11);
        assert!(rows.iter().all(|r| r.mode.as_str() == mode));
        assert!(rows.windows(2).all(|w| w[0].alpha > w[1].alpha));
    }
    assert_eq!(report::load(seed.join("baselines.csv")).unwrap().len(), 2);
    let merged = fs::read_to_string(root.join("report_merged.csv")).unwrap();
    assert!(merged.starts_with(&format!("seed,{}", report::HEADER)));
    assert_eq!(merged.lines().count(), 1 + 24);
    let sel: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("selection.json")).unwrap()).unwrap();
    assert_eq!(sel["seeds"][0]["seed"], 0);

    for (name, _) in &trees[0] {
        if name.ends_with(".wlpc") {
            load_checkpoint(root.join(name)).unwrap().validate().unwrap();
        }
    }
}

#[test]
fn stage_subcommands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();
    let run = |args: &[&str]| {
        let mut argv: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        argv.extend(tiny(&[]));
        let o = Command::new(env!("CARGO_BIN_EXE_wiselab")).args(&argv).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["gen-data", "--which", "source", "--out", &p("src.wlpd")]);
    run(&["gen-data", "--which", "target", "--out", &p("tgt.wlpd")]);
    run(&["pretrain", "--source", &p("src.wlpd"), "--out", &p("pt.wlpc"), "--log", &p("pt.csv")]);
    run(&["finetune", "--pt", &p("pt.wlpc"), "--target", &p("tgt.wlpd"), "--out", &p("ft.wlpc")]);
    run(&["probe", "--base", &p("pt.wlpc"), "--target", &p("tgt.wlpd"), "--out", &p("lp.wlpc")]);
    for metric in ["downstream", "svm", "fewshot"] {
        let data = if metric == "downstream" { p("tgt.wlpd") } else { p("src.wlpd") };
        let out = run(&["eval", "--ckpt", &p("lp.wlpc"), "--data", &data, "--metric", metric]);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["metric"], metric);
    }
    run(&[
        "sweep", "--pt", &p("pt.wlpc"), "--ft", &p("ft.wlpc"), "--target", &p("tgt.wlpd"),
        "--source", &p("src.wlpd"), "--mode", "wise_ft", "--out", &p("sweep.csv"),
    ]);
    assert_eq!(report::load(p("sweep.csv")).unwrap().len(), 11);
    assert!(fs::read_to_string(p("pt.csv")).unwrap().starts_with("epoch,loss,train_acc\n"));
}
