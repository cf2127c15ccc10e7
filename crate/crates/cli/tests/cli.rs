use std::fs;
use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::Duration;

use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--nodes",
    "3",
    "--workers",
    "2",
    "--keys",
    "4000",
    "--value-len",
    "4",
    "--batches",
    "40",
    "--batch-size",
    "8",
];

fn intentps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intentps"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios")
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn bench_writes_csv_and_json_and_repeats_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("m{i}.csv"))).collect();
    for out in &outs {
        let o = intentps(&[
            "bench",
            "--workload",
            "zipf",
            "--mode",
            "adapm",
            "--nodes",
            "4",
            "--workers",
            "4",
            "--keys",
            "100000",
            "--value-len",
            "8",
            "--epochs",
            "2",
            "--seed",
            "7",
            "--out",
            path_arg(out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let csv = fs::read_to_string(&outs[0]).unwrap();
    assert_eq!(csv, fs::read_to_string(&outs[1]).unwrap());
    assert_eq!(
        fs::read(dir.path().join("m0.json")).unwrap(),
        fs::read(dir.path().join("m1.json")).unwrap()
    );
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 4 * 2 + 1);
    assert_eq!(rows.last().unwrap()[2..4], ["all".to_string(), "all".to_string()]);
    assert!(csv.starts_with("mode,signal_offset,node,epoch,"));
}

#[test]
fn every_workload_and_mode_name_is_accepted() {
    for workload in ["zipf", "mf", "uniform"] {
        for mode in [
            "adapm",
            "adapm-no-relocation",
            "adapm-no-replication",
            "adapm-immediate",
            "static-partitioning",
            "full-replication",
        ] {
            let mut args = vec!["bench", "--workload", workload, "--mode", mode];
            args.extend_from_slice(SMALL);
            let o = intentps(&args);
            assert!(o.status.success(), "{workload} {mode}: {}", stderr(&o));
            let csv = String::from_utf8(o.stdout).unwrap();
            assert_eq!(data_rows(&csv).len(), 4);
            assert!(data_rows(&csv).iter().all(|r| r[0] == mode));
        }
    }
}

#[test]
fn full_replication_over_budget_fails_at_runtime() {
    let o = intentps(&["bench", "--mode", "full-replication", "--memory-budget", "1M"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("out of memory"), "{}", stderr(&o));
    // partitioned modes fit the same budget
    let o = intentps(&[
        "bench",
        "--mode",
        "static-partitioning",
        "--memory-budget",
        "1M",
        "--batches",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn sweep_emits_rows_for_each_offset_and_both_modes() {
    let mut args = vec!["bench", "--sweep-offset", "1,8,64,512"];
    args.extend_from_slice(SMALL);
    let o = intentps(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    let rows = data_rows(&csv);
    let summaries: Vec<(String, String)> = rows
        .iter()
        .filter(|r| r[2] == "all")
        .map(|r| (r[0].clone(), r[1].clone()))
        .collect();
    let mut want = Vec::new();
    for off in ["1", "8", "64", "512"] {
        want.push(("adapm".to_string(), off.to_string()));
        want.push(("adapm-immediate".to_string(), off.to_string()));
    }
    assert_eq!(summaries, want);
    assert_eq!(rows.len(), 8 * 4);
}

#[test]
fn trace_keys_write_trace_and_rate_files() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run.csv");
    let mut args = vec!["bench", "--trace-keys", "0,5", "--out", path_arg(&out)];
    args.extend_from_slice(SMALL);
    let o = intentps(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = fs::read_to_string(dir.path().join("run.trace.csv")).unwrap();
    assert!(trace.starts_with("round,key,owner,holders\n"));
    let keys: std::collections::BTreeSet<&str> = trace.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(keys.into_iter().collect::<Vec<_>>(), ["0", "5"]);
    assert!(
        fs::read_to_string(dir.path().join("run.rates.csv"))
            .unwrap()
            .lines()
            .count()
            > 1
    );
}

#[test]
fn bad_flags_are_usage_errors() {
    for args in [
        &["bench", "--mode", "sometimes"][..],
        &["bench", "--workload", "graph"],
        &["bench", "--nodes", "0"],
        &["bench", "--alpha", "1.5"],
        &["bench", "--quantile", "1"],
        &["bench", "--transport", "socket"],
        &["bench", "--trace-keys", "100000"],
        &["bench", "--memory-budget", "12Q"],
        &["bench", "--sweep-offset", "1,2", "--signal-offset", "3"],
        &["frobnicate"],
    ] {
        assert_eq!(intentps(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn replay_reproduces_bundled_timelines() {
    let dir = TempDir::new().unwrap();
    for name in ["non_overlapping", "partial_overlap", "hotspot", "last_user_relocation"] {
        let out = dir.path().join(format!("{name}.csv"));
        let script = scenarios().join(format!("{name}.txt"));
        let o = intentps(&["replay", path_arg(&script), "--out", path_arg(&out)]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        let expected = fs::read_to_string(scenarios().join(format!("{name}.expected.csv"))).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap(), expected, "{name}");
    }
}

#[test]
fn replay_of_an_empty_script_prints_only_the_header() {
    let dir = TempDir::new().unwrap();
    let script = dir.path().join("empty.txt");
    fs::write(&script, "# nothing\n\n").unwrap();
    let o = intentps(&["replay", path_arg(&script)]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "round,event,key,node\n");
}

#[test]
fn replay_rejects_a_malformed_line_with_its_number() {
    let dir = TempDir::new().unwrap();
    let script = dir.path().join("bad.txt");
    fs::write(&script, "intent 1 0 0 0 2\nround\nintent 1 0 zero 0 2\n").unwrap();
    let o = intentps(&["replay", path_arg(&script)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

fn free_ports(n: usize) -> Vec<u16> {
    let listeners: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    listeners.iter().map(|l| l.local_addr().unwrap().port()).collect()
}

fn manifest(dir: &Path, ports: &[u16]) -> PathBuf {
    let path = dir.join("manifest.txt");
    let text: String = ports
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{i} 127.0.0.1:{p}\n"))
        .collect();
    fs::write(&path, text).unwrap();
    path
}

fn spawn_node(manifest: &Path, id: u32, out: &Path, extra: &[&str]) -> Child {
    let id = id.to_string();
    Command::new(env!("CARGO_BIN_EXE_intentps"))
        .args([
            "node",
            "--manifest",
            path_arg(manifest),
            "--node-id",
            &id,
            "--out",
            path_arg(out),
        ])
        .args([
            "--workers",
            "2",
            "--keys",
            "3000",
            "--value-len",
            "4",
            "--batch-size",
            "8",
        ])
        .args(extra)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap()
}

fn drain_stderr(child: &mut Child) -> String {
    let mut s = String::new();
    std::io::Read::read_to_string(child.stderr.as_mut().unwrap(), &mut s).unwrap();
    s
}

#[test]
fn two_node_processes_conserve_every_update() {
    let dir = TempDir::new().unwrap();
    let m = manifest(dir.path(), &free_ports(2));
    let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("n{i}.csv"))).collect();
    let mut kids: Vec<Child> = (0..2)
        .map(|i| spawn_node(&m, i, &outs[i as usize], &["--batches", "150", "--workload", "mf"]))
        .collect();
    let mut owned = 0;
    for (i, k) in kids.iter_mut().enumerate() {
        let err = drain_stderr(k);
        assert!(k.wait().unwrap().success(), "node {i}: {err}");
        assert!(err.contains("conservation ok"), "node {i}: {err}");
        owned += err
            .split("over ")
            .nth(1)
            .and_then(|r| r.split_whitespace().next())
            .and_then(|n| n.parse::<u64>().ok())
            .unwrap();
        let rows = data_rows(&fs::read_to_string(&outs[i]).unwrap());
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0][2], i.to_string());
        assert!(fs::metadata(outs[i].with_extension("json")).is_ok());
    }
    assert_eq!(owned, 3000);
}

#[test]
fn missing_peer_is_retried_then_reported() {
    let dir = TempDir::new().unwrap();
    let m = manifest(dir.path(), &free_ports(2));
    let out = dir.path().join("n0.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_intentps"))
        .args([
            "node",
            "--manifest",
            path_arg(&m),
            "--node-id",
            "0",
            "--connect-attempts",
            "3",
        ])
        .args(["--keys", "100", "--batches", "5", "--out", path_arg(&out)])
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.matches("attempt").count(), 3 + 1, "{err}");
    assert!(err.contains("unreachable after 3 attempts"), "{err}");
    assert!(!out.exists());
}

#[test]
fn stop_signal_drains_and_flushes_metrics() {
    let dir = TempDir::new().unwrap();
    let m = manifest(dir.path(), &free_ports(2));
    let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("n{i}.csv"))).collect();
    let mut kids: Vec<Child> = (0..2)
        .map(|i| spawn_node(&m, i, &outs[i as usize], &["--batches", "60000"]))
        .collect();
    let mut readers: Vec<BufReader<_>> = kids
        .iter_mut()
        .map(|k| BufReader::new(k.stderr.take().unwrap()))
        .collect();
    for r in &mut readers {
        let mut line = String::new();
        r.read_line(&mut line).unwrap();
        assert!(line.contains("connected"), "{line}");
    }
    thread::sleep(Duration::from_millis(400));
    for k in &kids {
        let ok = Command::new("kill")
            .args(["-TERM", &k.id().to_string()])
            .status()
            .unwrap();
        assert!(ok.success());
    }
    for (i, (k, r)) in kids.iter_mut().zip(&mut readers).enumerate() {
        let mut rest = String::new();
        std::io::Read::read_to_string(r, &mut rest).unwrap();
        assert!(k.wait().unwrap().success(), "node {i}: {rest}");
        assert!(rest.contains("drained"), "node {i}: {rest}");
        let rows = data_rows(&fs::read_to_string(&outs[i]).unwrap());
        let pulls: u64 = rows[0][7].parse().unwrap();
        assert!(pulls > 0, "node {i} did no work before the signal");
        assert!(pulls < 60_000 * 2 * 8, "node {i} ran to completion");
    }
}
