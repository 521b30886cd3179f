use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const SMALL: [&str; 8] = [
    "--n-train-symbols",
    "2048",
    "--n-test-symbols",
    "1024",
    "--target-q-db",
    "6",
    "--batch-size",
    "128",
];

fn fiberlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fiberlab"))
        .args(args)
        .env_remove("FIBERLAB_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fiberlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_small<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    SMALL.iter().copied().chain(extra.iter().copied()).collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn table_audit_lists_every_preset() {
    let out = ok(&["complexity", "--table1"]);
    let rows = out.lines().filter(|l| l.ends_with("pass") || l.ends_with("FAIL")).count();
    assert_eq!(rows, 35);
    assert!(out.contains("mlp(149,132,596)"));
    assert!(out.trim_end().ends_with("presets match"));
}

#[test]
fn complexity_of_a_topology_and_of_dbp() {
    let out = ok(&["complexity", "--topology", "mlp(149,132,596)"]);
    assert!(out.starts_with("mlp(149,132,596): 123968 RMpS (1.2E+05)"), "{out}");
    let out = ok(&["complexity", "--preset", "Best", "--arch", "esn"]);
    assert!(out.contains("86018"), "{out}");
    let out = ok(&["complexity", "--dbp"]);
    assert!(out.contains("log10 3.33"), "{out}");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"tx": {"n_train_symbol": 5}}"#).unwrap();
    assert_eq!(fiberlab(&["--config", p(&bad), "config"]).status.code(), Some(2));
    assert_eq!(fiberlab(&["--set", "nonsense=1", "config"]).status.code(), Some(2));
    assert_eq!(fiberlab(&["complexity", "--topology", "mlp(1)"]).status.code(), Some(2));
    assert_eq!(fiberlab(&["evaluate", "--data", "/nonexistent", "--cdc"]).status.code(), Some(2));
}

#[test]
fn overrides_reach_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.json");
    std::fs::write(&file, r#"{"data_seed": 11, "seeds": [3]}"#).unwrap();
    let out = ok(&[
        "--config",
        p(&file),
        "--set",
        "sweep.mode=random",
        "--launch-power-dbm",
        "-1.5",
        "--seeds",
        "4,5",
        "config",
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["data_seed"], 11);
    assert_eq!(v["seeds"], serde_json::json!([4, 5]));
    assert_eq!(v["sweep"]["mode"], "random");
    assert_eq!(v["link"]["launch_power_dbm"], -1.5);
}

#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f);

    let start = Instant::now();
    ok(&with_small(&["simulate", "--out", p(&d("a.bin"))]));
    assert!(start.elapsed().as_secs() < 60, "smoke simulation took {:?}", start.elapsed());
    ok(&with_small(&["simulate", "--out", p(&d("b.bin"))]));
    assert_eq!(std::fs::read(d("a.bin")).unwrap(), std::fs::read(d("b.bin")).unwrap());

    let a_bin = d("a.bin");
    let data = p(&a_bin);
    ok(&with_small(&[
        "--max-epochs",
        "2",
        "train",
        "--data",
        data,
        "--out",
        p(&d("m.json")),
        "--topology",
        "mlp(6,6,6)@5",
        "--seed",
        "9",
    ]));
    let csv = d("rows.csv");
    let out = ok(&with_small(&["evaluate", "--data", data, "--model", p(&d("m.json")), "--out", p(&csv)]));
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("topology,rmps,q_db,q_gain_db,ber,seed,epochs"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "mlp-6-6-6-m5");
    assert_eq!(row[1], "204");
    assert_eq!(row[5], "9");
    assert_eq!(row[6], "2");

    let out = ok(&with_small(&["evaluate", "--data", data, "--cdc", "--out", p(&csv)]));
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[0], row[3]), ("cdc", "0"));
    let q: f64 = row[2].parse().unwrap();
    assert!((q - 6.0).abs() < 0.2, "loaded Q {q}");

    let appended = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(appended.lines().count(), 3, "one header, two rows:\n{appended}");

    let out = ok(&with_small(&[
        "--set",
        "sweep.search_train_symbols=1024",
        "--set",
        "sweep.search_train.max_epochs=1",
        "search",
        "--data",
        data,
        "--arch",
        "mlp",
        "--budget",
        "500",
        "--strategy",
        "random",
        "--trials",
        "3",
    ]));
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let rmps: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!(rmps <= 550.0, "{r}");
    }
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    ok(&with_small(&["simulate", "--out", p(&data)]));
    let out = fiberlab(&with_small(&[
        "--learning-rate",
        "1e200",
        "--max-epochs",
        "3",
        "train",
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("m.json")),
        "--topology",
        "mlp(4,4,4)@3",
    ]));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_uses_the_cache_directory_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f);
    let data = d("d.bin");
    let (csv_path, plot_path) = (d("s.csv"), d("s.gp"));
    ok(&with_small(&["simulate", "--out", p(&data)]));
    let args = with_small(&[
        "--set",
        "sweep.budgets=[1000,10000]",
        "--set",
        r#"sweep.archs=["mlp","esn"]"#,
        "--seeds",
        "1",
        "--max-epochs",
        "1",
        "sweep",
        "--data",
        p(&data),
        "--out",
        p(&csv_path),
        "--plot",
        p(&plot_path),
    ]);
    let run = || {
        let out = Command::new(env!("CARGO_BIN_EXE_fiberlab"))
            .args(&args)
            .env("FIBERLAB_CACHE_DIR", d("cache"))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (String::from_utf8(out.stderr).unwrap(), std::fs::read_to_string(d("s.csv")).unwrap())
    };
    let (log1, csv1) = run();
    assert!(log1.contains("4 computed, 0 cached"), "{log1}");
    assert_eq!(csv1.lines().count(), 1 + 4);
    let (log2, csv2) = run();
    assert!(log2.contains("0 computed, 4 cached"), "{log2}");
    assert_eq!(csv1, csv2);
    let script = std::fs::read_to_string(d("s.gp")).unwrap();
    assert!(script.contains("s.csv") && script.contains("esn"), "{script}");
}
