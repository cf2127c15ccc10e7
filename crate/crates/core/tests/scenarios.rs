use std::path::PathBuf;

use intentps_core::node::{Event, EventKind};
use intentps_core::scenario::{parse_timeline_csv, run_scenario, run_simulated_scenario, timeline_csv, IntentScript};
use intentps_core::{Error, PolicyMode};
use proptest::prelude::*;

const BUNDLED: [&str; 4] = ["non_overlapping", "partial_overlap", "hotspot", "last_user_relocation"];

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn load(name: &str) -> (IntentScript, String) {
    let script = std::fs::read_to_string(dir().join(format!("{name}.txt"))).unwrap();
    let expected = std::fs::read_to_string(dir().join(format!("{name}.expected.csv"))).unwrap();
    (IntentScript::parse(&script).unwrap(), expected)
}

fn of(events: &[Event], kind: EventKind) -> Vec<(u64, u32)> {
    events
        .iter()
        .filter(|e| e.kind == kind)
        .map(|e| (e.round, e.node.0))
        .collect()
}

#[test]
fn bundled_scripts_reproduce_expected_timelines_every_time() {
    for name in BUNDLED {
        let (script, expected) = load(name);
        for run in 0..10 {
            let got = timeline_csv(&run_simulated_scenario(&script).unwrap());
            assert_eq!(got, expected, "{name} run {run}");
        }
    }
}

#[test]
fn sequential_intents_move_the_main_copy_without_replicas() {
    let (s, _) = load("non_overlapping");
    let ev = run_simulated_scenario(&s).unwrap();
    let dests: Vec<u32> = of(&ev, EventKind::RelocateDone).into_iter().map(|(_, n)| n).collect();
    assert_eq!(dests, vec![2, 3]);
    assert!(of(&ev, EventKind::ReplicaCreate).is_empty());
}

#[test]
fn overlapping_latecomer_gets_a_replica_before_the_main_copy() {
    let (s, _) = load("partial_overlap");
    let ev = run_simulated_scenario(&s).unwrap();
    let creates = of(&ev, EventKind::ReplicaCreate);
    let moves = of(&ev, EventKind::RelocateDone);
    assert_eq!(creates.len(), 1);
    assert_eq!(creates[0].1, 3);
    assert_eq!(moves.iter().map(|m| m.1).collect::<Vec<_>>(), vec![2, 3]);
    assert!(moves[0].0 < creates[0].0 && creates[0].0 < moves[1].0);
}

#[test]
fn hotspot_replicates_to_every_other_user_then_hands_over() {
    let (s, _) = load("hotspot");
    let ev = run_simulated_scenario(&s).unwrap();
    let mut created: Vec<u32> = of(&ev, EventKind::ReplicaCreate).into_iter().map(|c| c.1).collect();
    created.sort();
    assert_eq!(created, vec![1, 2, 3]);
    // node 1 is done before node 2, node 2 before node 0's copy moves away
    let destroyed: Vec<u32> = of(&ev, EventKind::ReplicaDestroy).into_iter().map(|c| c.1).collect();
    assert_eq!(destroyed, vec![1, 2]);
    assert_eq!(
        of(&ev, EventKind::RelocateDone).iter().map(|m| m.1).collect::<Vec<_>>(),
        vec![3]
    );
}

#[test]
fn main_copy_stays_while_two_nodes_remain_active() {
    let (s, _) = load("last_user_relocation");
    let ev = run_simulated_scenario(&s).unwrap();
    let moves = of(&ev, EventKind::RelocateDone);
    assert_eq!(moves.len(), 1);
    assert_eq!(moves[0].1, 1);
    let node2_gone = of(&ev, EventKind::ReplicaDestroy)
        .into_iter()
        .find(|d| d.1 == 2)
        .unwrap();
    assert!(moves[0].0 >= node2_gone.0);
}

#[test]
fn expected_files_parse_back() {
    for name in BUNDLED {
        let (script, expected) = load(name);
        assert_eq!(
            parse_timeline_csv(&expected).unwrap(),
            run_simulated_scenario(&script).unwrap()
        );
    }
}

#[test]
fn static_policy_never_moves_anything() {
    for name in BUNDLED {
        let (script, _) = load(name);
        assert!(
            run_scenario(&script, PolicyMode::StaticPartitioning)
                .unwrap()
                .is_empty(),
            "{name}"
        );
    }
}

#[test]
fn malformed_script_reports_its_line() {
    let text = "intent 0 0 0 0 2\nround\nintent 1 0 0 3 1\n";
    match IntentScript::parse(text) {
        Err(Error::Script { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

fn script_text() -> impl Strategy<Value = String> {
    let line = prop_oneof![
        3 => (0u32..4, 0u16..2, 0u64..3, 0u64..6, 1u64..4)
            .prop_map(|(n, w, k, s, len)| format!("intent {n} {w} {k} {s} {}", s + len)),
        3 => (0u32..4, 0u16..2).prop_map(|(n, w)| format!("advance {n} {w}")),
        4 => Just("round".to_string()),
    ];
    prop::collection::vec(line, 1..60).prop_map(|l| l.join("\n"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_scripts_replay_deterministically_and_consistently(text in script_text()) {
        let script = IntentScript::parse(&text).unwrap();
        // replay fails if an ownership or replica invariant breaks
        let a = run_simulated_scenario(&script).unwrap();
        let b = run_simulated_scenario(&script).unwrap();
        prop_assert_eq!(&a, &b);

        let n = script.shape().0 as usize;
        let keys = script.shape().2;
        for k in 0..keys {
            // per key: relocations come in start/done pairs, and no node ever
            // has more replicas destroyed than created
            let mine: Vec<&Event> = a.iter().filter(|e| e.key.0 == k).collect();
            let starts = mine.iter().filter(|e| e.kind == EventKind::RelocateStart).count();
            let dones = mine.iter().filter(|e| e.kind == EventKind::RelocateDone).count();
            prop_assert_eq!(starts, dones);
            let mut live = vec![0i64; n];
            for e in &mine {
                match e.kind {
                    EventKind::ReplicaCreate => live[e.node.index()] += 1,
                    EventKind::ReplicaDestroy => live[e.node.index()] -= 1,
                    _ => {}
                }
                prop_assert!(live.iter().all(|&c| (0..=1).contains(&c)));
            }
            let rounds: Vec<u64> = mine.iter().map(|e| e.round).collect();
            prop_assert!(rounds.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
