use intentps_bench::report::{metrics_csv, metrics_json, parse_metrics_csv, trace_csv};
use intentps_bench::run::{expected_values, run};
use intentps_bench::workload::{access_counts, generate};
use intentps_bench::{run_benchmark, BenchConfig, WorkloadKind, WorkloadSpec};
use intentps_core::routing::home_node;
use intentps_core::{Error, Execution, Key, NodeId, PolicyMode};

fn spec(kind: WorkloadKind) -> WorkloadSpec {
    WorkloadSpec {
        kind,
        num_keys: 4_000,
        value_len: 4,
        batches_per_epoch: 60,
        batch_size: 16,
        signal_offset_batches: 16,
        seed: 5,
        ..WorkloadSpec::default()
    }
}

fn cfg(kind: WorkloadKind, mode: PolicyMode) -> BenchConfig {
    BenchConfig {
        spec: spec(kind),
        mode,
        epochs: 2,
        check_invariants: true,
        ..BenchConfig::default()
    }
}

#[test]
fn every_mode_ends_with_the_same_exact_values() {
    for kind in WorkloadKind::ALL {
        let plans = generate(&spec(kind), 16, 2).unwrap();
        let want = expected_values(&spec(kind), &plans);
        for mode in PolicyMode::ALL {
            let r = run(&cfg(kind, mode)).unwrap();
            assert_eq!(r.final_values, want, "{kind} {mode}");
            assert_eq!(r.summary.protocol_warnings, 0, "{kind} {mode}");
        }
    }
}

#[test]
fn static_remote_share_matches_placement_oracle() {
    let s = spec(WorkloadKind::ZipfHotspot);
    let plans = generate(&s, 16, 2).unwrap();
    let (mut remote, mut total) = (0u64, 0u64);
    for (w, plan) in plans.iter().enumerate() {
        let node = NodeId((w / 4) as u32);
        for k in plan.iter().flatten() {
            total += 1;
            remote += u64::from(home_node(*k, 4) != node);
        }
    }
    let r = run(&cfg(WorkloadKind::ZipfHotspot, PolicyMode::StaticPartitioning)).unwrap();
    assert_eq!(r.summary.pulls, total);
    assert_eq!(r.summary.remote_pulls, remote);
    assert!(r.remote_access_share() > 0.5);
}

#[test]
fn no_relocation_never_needs_fewer_replicas() {
    for kind in WorkloadKind::ALL {
        let ada = run(&cfg(kind, PolicyMode::AdaPM)).unwrap();
        let norel = run(&cfg(kind, PolicyMode::AdaPMNoRelocation)).unwrap();
        assert!(norel.replica_creation_count() >= ada.replica_creation_count(), "{kind}");
        assert_eq!(norel.relocation_count(), 0);
    }
}

#[test]
fn signaling_at_access_time_forces_remote_reads() {
    for mode in [PolicyMode::AdaPM, PolicyMode::AdaPMImmediateAction] {
        let mut late = cfg(WorkloadKind::UniformSparse, mode);
        late.spec.signal_offset_batches = 0;
        let early = cfg(WorkloadKind::UniformSparse, mode);
        let (late, early) = (run(&late).unwrap(), run(&early).unwrap());
        assert!(
            late.remote_access_share() > 0.2,
            "{mode}: {}",
            late.remote_access_share()
        );
        assert!(late.remote_access_share() > 10.0 * early.remote_access_share());
    }
}

#[test]
fn report_has_a_row_per_node_and_epoch_plus_summary() {
    let r = run(&cfg(WorkloadKind::RowLocalityMF, PolicyMode::AdaPM)).unwrap();
    let csv = metrics_csv(std::slice::from_ref(&r)).unwrap();
    let rows = parse_metrics_csv(&csv).unwrap();
    assert_eq!(rows.len(), 4 * 2 + 1);
    assert_eq!((rows[8].node.as_str(), rows[8].epoch.as_str()), ("all", "all"));
    // per-node epoch rows add up to the summary
    let sum: u64 = rows[..8].iter().map(|r| r.bytes_sent).sum();
    assert_eq!(sum, rows[8].bytes_sent);
    let pulls: u64 = rows[..8].iter().map(|r| r.pulls).sum();
    assert_eq!(pulls, rows[8].pulls);
    assert!(csv.starts_with("mode,signal_offset,node,epoch,epoch_time_ms,bytes_sent,"));

    let json: serde_json::Value = serde_json::from_str(&metrics_json(std::slice::from_ref(&r)).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 8);
    assert_eq!(json["summary"]["bytes_sent"], rows[8].bytes_sent);
}

#[test]
fn loss_falls_to_zero_over_epochs() {
    let r = run(&BenchConfig {
        epochs: 3,
        ..cfg(WorkloadKind::UniformSparse, PolicyMode::AdaPM)
    })
    .unwrap();
    assert_eq!(r.epoch_loss.len(), 3);
    assert!(r.epoch_loss.windows(2).all(|w| w[0] > w[1]), "{:?}", r.epoch_loss);
    assert_eq!(r.epoch_loss[2], 0.0);
}

#[test]
fn reports_are_identical_across_runs_and_executions() {
    let a = run(&cfg(WorkloadKind::ZipfHotspot, PolicyMode::AdaPM)).unwrap();
    let b = run(&BenchConfig {
        execution: Execution::Sequential,
        ..cfg(WorkloadKind::ZipfHotspot, PolicyMode::AdaPM)
    })
    .unwrap();
    let c = run(&cfg(WorkloadKind::ZipfHotspot, PolicyMode::AdaPM)).unwrap();
    let text = |r| metrics_csv(std::slice::from_ref(r)).unwrap();
    assert_eq!(text(&a), text(&b));
    assert_eq!(text(&a), text(&c));
}

#[test]
fn traces_show_long_replicas_for_hot_keys_and_moves_for_median_keys() {
    let s = WorkloadSpec {
        batches_per_epoch: 300,
        ..spec(WorkloadKind::ZipfHotspot)
    };
    let plans = generate(&s, 16, 1).unwrap();
    let counts = access_counts(&plans, s.num_keys);
    let mut by_count: Vec<(u64, Key)> = counts.iter().enumerate().map(|(k, &c)| (c, Key(k as u64))).collect();
    by_count.sort_unstable_by(|a, b| b.cmp(a));
    let hot = by_count[0].1;
    let used: Vec<&(u64, Key)> = by_count.iter().filter(|(c, _)| *c > 0).collect();
    let median = used[used.len() / 2].1;

    let r = run(&BenchConfig {
        spec: s,
        trace_keys: vec![hot, median],
        ..BenchConfig::default()
    })
    .unwrap();
    let hot_rows: Vec<_> = r.trace.iter().filter(|t| t.key == hot).collect();
    let full = hot_rows.iter().filter(|t| t.holders.len() == 3).count();
    assert!(full * 10 >= hot_rows.len() * 8, "{full} of {}", hot_rows.len());

    let med_rows: Vec<_> = r.trace.iter().filter(|t| t.key == median).collect();
    assert!(med_rows.iter().all(|t| t.holders.is_empty()));
    let owners: std::collections::BTreeSet<_> = med_rows.iter().map(|t| t.owner).collect();
    assert!(owners.len() >= 2, "{owners:?}");

    let csv = trace_csv(&r.trace);
    assert!(csv.starts_with("round,key,owner,holders\n"));
    assert_eq!(csv.lines().count(), r.trace.len() + 1);
}

#[test]
fn full_replication_over_budget_runs_out_of_memory() {
    let r = run(&BenchConfig {
        memory_budget: Some(20_000),
        ..cfg(WorkloadKind::ZipfHotspot, PolicyMode::FullReplication)
    });
    assert!(matches!(r, Err(Error::OutOfMemory { .. })), "{r:?}");
    assert!(run(&BenchConfig {
        memory_budget: Some(20_000),
        ..cfg(WorkloadKind::ZipfHotspot, PolicyMode::AdaPM)
    })
    .is_ok());
}

#[test]
fn convenience_entry_point_runs() {
    let r = run_benchmark(&spec(WorkloadKind::UniformSparse), PolicyMode::AdaPM, 2, 2, 1).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert_eq!(r.nodes, 2);
}
