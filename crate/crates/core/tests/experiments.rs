use std::process::Command;

use icreg::experiments::{
    build_oracle, parse_config, plan_cells, run_ablation, run_scale_l, run_sweep, verify_network,
    Ablation, ArchChoice, CellStatus, ConfigEntry, ExperimentConfig, OracleKind, CURVE_HEADER,
    RESULTS_HEADER,
};
use icreg::training::Architecture;
use icreg::transformer::codec::{load_network, save_network};

const TINY: &str = "
experiment = scale_L
architectures = theory
n = 4
l_values = 32, 16
degree = 2
epochs = 2
batch = 8
test_size = 16
seeds = 0, 1
";

fn tiny(extra: &[(&str, &str)]) -> ExperimentConfig {
    let over: Vec<ConfigEntry> = extra.iter().map(|(k, v)| ConfigEntry::flag(k, *v)).collect();
    parse_config(TINY, None, &over).unwrap()
}

fn icreg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_icreg"))
}

#[test]
fn flipped_weight_bit_is_located() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("oracle.bin");
    let mut net = build_oracle(OracleKind::Poly { d: 3 }, 6).unwrap();
    save_network(&net, &path).unwrap();
    assert!(verify_network(&load_network(&path).unwrap(), 5, 0).unwrap().passed());

    let q = &mut net.blocks[1].heads[0].q;
    let idx = q.as_slice().iter().position(|&v| v != 0.0).unwrap();
    let cols = q.cols();
    let v = &mut q.as_mut_slice()[idx];
    *v = f64::from_bits(v.to_bits() ^ (1 << 30));
    save_network(&net, &path).unwrap();
    let report = verify_network(&load_network(&path).unwrap(), 5, 0).unwrap();
    assert!(!report.passed());
    let text = report.to_text();
    let location = format!("block 1, head 0, Q[{},{}]", idx / cols, idx % cols);
    assert!(text.contains(&location), "{text}");
}

#[test]
fn cli_construct_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spline.bin");
    let status = icreg()
        .args(["construct", "--kind", "linear-spline", "--bins", "3", "--n", "5", "--out"])
        .arg(&path)
        .status()
        .unwrap();
    assert!(status.success());
    let out = icreg()
        .args(["verify-oracle", "--prompts", "3", "--network"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn cli_reports_config_errors_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "experiment = scale_n\n\nepochs = banana\n").unwrap();
    let out = icreg().arg("scale-n").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("epochs"), "{err}");

    std::fs::write(&cfg, "experiment = scale_n\nbogus = 1\n").unwrap();
    let out = icreg().arg("scale-n").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn cli_train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out_dir = dir.path().join("train");
    let out = icreg()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .args(["--set", "l=24", "--epochs", "1", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.bin", "network.bin", "train.data", "test.data", "history.csv", "results.csv", "manifest.txt"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let eval = icreg()
        .arg("eval")
        .arg("--checkpoint")
        .arg(out_dir.join("checkpoint.bin"))
        .arg("--data")
        .arg(out_dir.join("test.data"))
        .output()
        .unwrap();
    assert!(eval.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let line = |s: &str| s.lines().find(|l| l.starts_with("test_mse")).map(str::to_string);
    assert_eq!(line(&stdout), line(&String::from_utf8_lossy(&eval.stdout)));
}

#[test]
fn results_schema_and_sorted_axis() {
    let cfg = tiny(&[]);
    assert_eq!(cfg.l_values, vec![16, 32]);
    let r = run_scale_l(&cfg).unwrap();
    let csv = r.results_csv();
    assert_eq!(csv.lines().next(), Some(RESULTS_HEADER));
    assert_eq!(csv.lines().count(), 1 + 4);
    let curve = r.curve_csv();
    assert_eq!(curve.lines().next(), Some(CURVE_HEADER));
    let xs: Vec<&str> = curve.lines().skip(1).map(|l| l.split(',').nth(4).unwrap()).collect();
    assert_eq!(xs, ["16", "32"]);
}

#[test]
fn zero_learning_rate_gives_flat_curve() {
    let cfg = tiny(&[("lr", "0")]);
    let r = run_sweep(&cfg);
    for c in &r.cells {
        assert_eq!(c.status, CellStatus::Ok);
        assert_eq!(c.test_mse, c.init_mse);
    }
    let arch = ArchChoice::Trained(Architecture::Theory);
    assert_eq!(r.point(arch, 16).unwrap().mean, r.point(arch, 32).unwrap().mean);
}

#[test]
fn worker_count_does_not_change_output() {
    let one = run_sweep(&tiny(&[("jobs", "1")]));
    let two = run_sweep(&tiny(&[("jobs", "2")]));
    assert_eq!(one.results_csv(), two.results_csv());
    assert_eq!(one.curve_csv(), two.curve_csv());
}

#[test]
fn diverging_cells_are_marked_failed() {
    let cfg = tiny(&[("lr", "1e6"), ("architectures", "theory, oracle")]);
    let r = run_sweep(&cfg);
    assert_eq!(r.cells.len(), plan_cells(&cfg).len());
    let failed = r.failures().count();
    assert!(failed > 0);
    assert!(r.results_csv().lines().any(|l| l.ends_with(",failed")));
    assert!(r.manifest().contains("# failed:"));
    let oracle_ok = r
        .cells
        .iter()
        .filter(|c| c.cell.arch == ArchChoice::Oracle)
        .all(|c| c.status == CellStatus::Ok);
    assert!(oracle_ok);
}

#[test]
fn deep_ablation_echoes_shape() {
    let cfg = tiny(&[("experiment", "ablation"), ("ablation", "deep16x1"), ("sweep", "L")]);
    assert_eq!(cfg.ablation, Some(Ablation::Deep16x1));
    let m = cfg.model_config(Architecture::Theory, 32);
    assert_eq!(m.num_blocks, 16);
    assert!(m.block_layout().iter().all(|&(_, h, _)| h == 1));
}

#[test]
fn single_head_is_not_better_than_four() {
    let run = |name: &str| {
        let cfg = tiny(&[
            ("experiment", "ablation"),
            ("ablation", name),
            ("sweep", "n"),
            ("n_values", "8, 32"),
            ("l", "1000"),
            ("epochs", "4"),
            ("batch", "64"),
            ("test_size", "200"),
            ("seeds", "0"),
        ]);
        let r = run_ablation(&cfg).unwrap();
        r.point(ArchChoice::Trained(Architecture::Theory), 32).unwrap().mean
    };
    let (one, four) = (run("heads1"), run("heads4"));
    assert!(one >= four, "heads1 {one} < heads4 {four}");
}
