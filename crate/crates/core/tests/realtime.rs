use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use intentps_core::client::Client;
use intentps_core::node::Node;
use intentps_core::realtime::{run_local, run_node, RealtimeOptions};
use intentps_core::transport::socket::RetryPolicy;
use intentps_core::transport::{parse_manifest, SocketTransport};
use intentps_core::{ClusterConfig, Key, NodeId, Result, UpdateDelta, ValueInit};

const KEYS: u64 = 64;

fn cfg(nodes: u32, workers: u16) -> ClusterConfig {
    ClusterConfig {
        num_nodes: nodes,
        workers_per_node: workers,
        num_keys: KEYS,
        value_len: 1,
        value_init: ValueInit::Zero,
        ..ClusterConfig::default()
    }
}

/// Each worker touches a sliding window of keys, signaling two steps ahead,
/// and adds `1 + worker index` to each; `tally` gets the same sums.
fn workload<'a>(tally: &'a [AtomicI64], steps: u64) -> impl Fn(&Client, u16) -> Result<()> + Sync + 'a {
    move |c: &Client, w: u16| {
        let me = c.node().id().0 as u64 * 7 + w as u64 * 3;
        let keys_at = |i: u64| -> Vec<Key> { (0..4).map(|j| Key((me + i * 5 + j) % KEYS)).collect() };
        for i in 0..steps {
            c.intent(w, &keys_at(i + 2), i + 2, i + 3, None)?;
            let keys = keys_at(i);
            c.pull(w, &keys)?;
            let inc = 1 + w as i64;
            let deltas: Vec<UpdateDelta> = keys.iter().map(|&k| UpdateDelta::new(k, vec![inc as f32])).collect();
            c.push(w, &deltas)?;
            for k in &keys {
                tally[k.index()].fetch_add(inc, Ordering::Relaxed);
            }
            c.advance_clock(w);
            thread::sleep(Duration::from_micros(300));
        }
        Ok(())
    }
}

fn tally() -> Vec<AtomicI64> {
    (0..KEYS).map(|_| AtomicI64::new(0)).collect()
}

#[test]
fn threaded_nodes_conserve_every_update() {
    let t = tally();
    let run = run_local(cfg(3, 2), &RealtimeOptions::default(), workload(&t, 60)).unwrap();
    for (k, v) in run.final_values.iter().enumerate() {
        assert_eq!(v[0] as i64, t[k].load(Ordering::Relaxed), "key {k}");
    }
    let m = run.total_metrics();
    assert_eq!(m.protocol_warnings, 0);
    assert!(m.max_hops <= 3);
    assert!(run.nodes.iter().all(|n| n.max_envelopes_per_pair <= 1));
    assert!(m.relocations_in + m.replica_creations > 0, "{m:?}");
}

#[test]
fn round_rate_limit_is_respected() {
    let t = tally();
    let opts = RealtimeOptions {
        rounds_per_sec: Some(100.0),
        ..RealtimeOptions::default()
    };
    let inner = workload(&t, 30);
    let slow = |c: &Client, w: u16| {
        inner(c, w)?;
        thread::sleep(Duration::from_millis(300));
        Ok(())
    };
    let run = run_local(cfg(2, 1), &opts, slow).unwrap();
    for n in &run.nodes {
        assert!(n.rounds >= 20, "{} rounds", n.rounds);
        let rate = n.rounds as f64 / n.elapsed.as_secs_f64();
        assert!(rate <= 100.0 * 1.05, "{rate} rounds/s on node {}", n.node);
    }
}

#[test]
fn socket_nodes_conserve_every_update() {
    let cfg = Arc::new(cfg(2, 2));
    let pending: Vec<_> = (0..2)
        .map(|i| SocketTransport::listen(NodeId(i), "127.0.0.1:0").unwrap())
        .collect();
    let manifest_text: String = pending
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{i} {}\n", p.local_addr().unwrap()))
        .collect();
    let manifest = parse_manifest(&manifest_text).unwrap();
    let t = tally();
    let work = workload(&t, 40);
    let reports = thread::scope(|s| {
        let handles: Vec<_> = pending
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let (cfg, manifest, work) = (cfg.clone(), &manifest, &work);
                s.spawn(move || {
                    let transport = p.connect(manifest, &RetryPolicy::default())?;
                    let node = Node::new(NodeId(i as u32), cfg);
                    run_node(&node, &transport, &RealtimeOptions::default(), work)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap().unwrap())
            .collect::<Vec<_>>()
    });
    let mut seen = vec![None; KEYS as usize];
    for r in &reports {
        for (k, v) in &r.owned {
            assert!(seen[k.index()].is_none(), "key {k} owned twice");
            seen[k.index()] = Some(v[0] as i64);
        }
    }
    for (k, v) in seen.iter().enumerate() {
        assert_eq!(*v, Some(t[k].load(Ordering::Relaxed)), "key {k}");
    }
}
