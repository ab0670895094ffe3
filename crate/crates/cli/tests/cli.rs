use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use halluc_cli::commands::{ablation_cells, Axis};
use halluc_cli::report::{parse_csv, render};
use halluc_cli::{parse_seed_list, CliError, ExperimentConfig};
use halluc_core::pipeline::{Schedule, TrainConfig};
use halluc_core::{KvCodec, SyntheticWorld};

fn halluc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halluc"))
        .args(args)
        .env_remove("HALLUC_THREADS")
        .output()
        .expect("binary runs")
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn empty_config_resolves_to_defaults() {
    let cfg = ExperimentConfig::parse("").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(cfg.run.seeds, (0..20).collect::<Vec<_>>());
    let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn unknown_config_keys_are_rejected() {
    for bad in ["[world]\nfeature_dimm = 8\n", "[train]\nshots = 2\n", "[run]\nseed = 1\n", "colour = 1\n"] {
        assert!(matches!(ExperimentConfig::parse(bad), Err(CliError::Config(_))), "{bad}");
    }
}

#[test]
fn seed_lists() {
    assert_eq!(parse_seed_list("0,1,5..8").unwrap(), vec![0, 1, 5, 6, 7]);
    assert!(parse_seed_list("").is_err());
    assert!(parse_seed_list("a").is_err());
}

#[test]
fn ablation_grids() {
    let base = TrainConfig::default();
    let m: Vec<usize> = ablation_cells(&base, Axis::NumHalluc).iter().map(|c| c.m).collect();
    assert_eq!(m, vec![0, 1, 2, 3, 5, 10, 20]);
    let em = ablation_cells(&base, Axis::EmVsJoint);
    assert_eq!(em.len(), 3);
    assert_eq!(em[0].schedule, Schedule::Joint);
    assert_eq!((em[1].schedule, em[1].em_iterations), (Schedule::Em, 1));
    assert_eq!((em[2].schedule, em[2].em_iterations), (Schedule::Em, 2));
    let shots: Vec<usize> = ablation_cells(&base, Axis::Shots).iter().map(|c| c.shot).collect();
    assert_eq!(shots, vec![1, 1, 2, 2, 3, 3, 5, 5, 10, 10]);
    assert_eq!(ablation_cells(&base, Axis::Variant).len(), 3);
    assert_eq!(ablation_cells(&base, Axis::HeadKind).len(), 4);
}

#[test]
fn gen_world_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = halluc(&["gen-world", "--seed-list", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", text(&o));
        assert!(text(&o).contains("orthonormality"));
        assert!(out.join("manifest.toml").exists());
    }
    let wa = fs::read(a.join("world.kv")).unwrap();
    assert_eq!(wa, fs::read(b.join("world.kv")).unwrap());
    let world = SyntheticWorld::from_kv_str(std::str::from_utf8(&wa).unwrap()).unwrap();
    assert_eq!(world.feature_dim, 32);
    assert_eq!(world.base_classes, 15);
    assert_eq!(world.novel_classes, 5);
}

#[test]
fn gen_world_rejects_more_modes_than_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[world]\nfeature_dim = 4\nmodes = 5\n").unwrap();
    let out = dir.path().join("out");
    let o = halluc(&["gen-world", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o).contains("argument"), "{}", text(&o));
    assert!(!out.join("world.kv").exists());
}

#[test]
fn bad_thread_count_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_halluc"))
        .args(["gen-world", "--out", dir.path().to_str().unwrap()])
        .env("HALLUC_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!o.status.success());
}

#[test]
fn train_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--seed-list", "0,1", "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = halluc(&args);
        assert!(o.status.success(), "{}", text(&o));
        assert!(out.join("manifest.toml").exists());
        out.join("results.csv")
    };
    let m0 = run("m0", &["--m", "0"]);
    let none = run("none", &["--variant", "none"]);
    let rows = csv_rows(&m0);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][0], "AGGREGATE");
    let other = csv_rows(&none);
    for (a, b) in rows.iter().zip(&other) {
        assert_eq!(a[7..], b[7..]);
    }

    let manifest = fs::read_to_string(dir.path().join("m0/manifest.toml")).unwrap();
    assert!(manifest.contains("version"));
    let value: toml::Table = manifest.parse().unwrap();
    let cfg: ExperimentConfig = value["config"].clone().try_into().unwrap();
    assert_eq!(cfg.train.m, 0);
    assert_eq!(cfg.run.seeds, vec![0, 1]);

    let o = halluc(&["report", m0.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("| 1 | single | cosine | conservative | 0 | 2 | 2 |"));
}

const CELL_HEADER: &str = "seed,shot,proposal_mode,head_kind,variant,m,em_iters,mean_novel_ap,tp_count,fp_count,ap_class_15";

fn cell(em: &str, m: usize, aps: &[f64]) -> String {
    let mut s = String::new();
    for (seed, ap) in aps.iter().enumerate() {
        s.push_str(&format!("{seed},1,single,cosine,conservative,{m},{em},{ap},10,2,{ap}\n"));
    }
    let mean = aps.iter().sum::<f64>() / aps.len() as f64;
    s.push_str(&format!("AGGREGATE,1,single,cosine,conservative,{m},{em},{mean},10,2,{mean}\n"));
    s
}

#[test]
fn report_single_block() {
    let csv = format!("{CELL_HEADER}\n{}", cell("2", 20, &[0.5, 0.6, 0.7]));
    let t = parse_csv(&csv, "run.csv").unwrap();
    assert_eq!(t.cells.len(), 1);
    let md = render(&[t]);
    assert_eq!(md.matches("## run.csv").count(), 1);
    assert!(md.contains("0.6000"));
}

#[test]
fn report_flags_em_against_joint() {
    let em = format!("{CELL_HEADER}\n{}", cell("2", 20, &[0.8, 0.8, 0.8, 0.8]));
    let joint = format!("{CELL_HEADER}\n{}", cell("joint", 20, &[0.7, 0.7, 0.9, 0.7]));
    let tables = [parse_csv(&em, "em.csv").unwrap(), parse_csv(&joint, "joint.csv").unwrap()];
    let md = render(&tables);
    assert!(md.contains("[PASS] EM >= joint"), "{md}");

    let joint = format!("{CELL_HEADER}\n{}", cell("joint", 20, &[0.9, 0.9, 0.7, 0.7]));
    let tables = [parse_csv(&em, "em.csv").unwrap(), parse_csv(&joint, "joint.csv").unwrap()];
    assert!(render(&tables).contains("[FAIL] EM >= joint"));
}

#[test]
fn report_m_sweep_and_plot_columns() {
    let csv = format!(
        "{CELL_HEADER}\n{}{}{}",
        cell("2", 0, &[0.5, 0.5]),
        cell("2", 1, &[0.6, 0.6]),
        cell("2", 5, &[0.55, 0.55])
    );
    let md = render(&[parse_csv(&csv, "sweep.csv").unwrap()]);
    assert!(md.contains("[PASS] every m >= m=0"), "{md}");
    assert!(md.contains("[PASS] gain >= 0.02"));
    assert!(md.contains("series,axis,x,y,err"));
    assert!(md.contains("K1/single/cosine/conservative/em2,m,5,0.5500,0.0000"));
}

#[test]
fn report_parse_errors_name_the_row() {
    let missing = format!("{CELL_HEADER}\n0,1,single,cosine,conservative,20,2,0.5,1,1,0.5\n");
    let e = parse_csv(&missing, "x.csv").unwrap_err().to_string();
    assert!(e.contains("AGGREGATE"), "{e}");

    let bad = format!("{CELL_HEADER}\n{}", cell("2", 20, &[0.5]).replace("0.5,10", "oops,10"));
    let e = parse_csv(&bad, "x.csv").unwrap_err().to_string();
    assert!(e.contains("row 2"), "{e}");

    let short = format!("{CELL_HEADER}\n0,1,single\n");
    let e = parse_csv(&short, "x.csv").unwrap_err().to_string();
    assert!(e.contains("row 2"), "{e}");

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, missing).unwrap();
    let o = halluc(&["report", p.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o).contains("parse error"));
}
