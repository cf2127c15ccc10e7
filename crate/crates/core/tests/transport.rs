use std::thread;
use std::time::Duration;

use intentps_core::transport::socket::{PendingSocket, RetryPolicy};
use intentps_core::transport::{parse_manifest, LoopbackHub, SocketTransport, Transport};
use intentps_core::NodeId;

fn frame(body: &[u8]) -> Vec<u8> {
    let mut f = (body.len() as u32).to_le_bytes().to_vec();
    f.extend_from_slice(body);
    f
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

fn pair() -> (SocketTransport, SocketTransport) {
    let listeners: Vec<PendingSocket> = (0..2)
        .map(|i| SocketTransport::listen(NodeId(i), "127.0.0.1:0").unwrap())
        .collect();
    let text: String = listeners
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i} {}\n", l.local_addr().unwrap()))
        .collect();
    let manifest = parse_manifest(&text).unwrap();
    let retry = RetryPolicy::default();
    let mut handles: Vec<_> = listeners
        .into_iter()
        .map(|l| {
            let (m, r) = (manifest.clone(), retry.clone());
            thread::spawn(move || l.connect(&m, &r).unwrap())
        })
        .collect();
    let b = handles.pop().unwrap().join().unwrap();
    let a = handles.pop().unwrap().join().unwrap();
    (a, b)
}

#[test]
fn one_mebibyte_survives_a_socket_round_trip() {
    let (a, b) = pair();
    let body: Vec<u8> = (0..1u32 << 20)
        .map(|i| (i.wrapping_mul(2_654_435_761) >> 13) as u8)
        .collect();
    let sent = frame(&body);
    a.send(NodeId(1), sent.clone()).unwrap();
    let (from, got) = b.recv_timeout(Duration::from_secs(10)).unwrap().expect("frame");
    assert_eq!(from, NodeId(0));
    assert_eq!(got.len(), sent.len());
    assert_eq!(fnv1a(&got), fnv1a(&sent));

    b.send(NodeId(0), got).unwrap();
    let (from, back) = a.recv_timeout(Duration::from_secs(10)).unwrap().expect("echo");
    assert_eq!(from, NodeId(1));
    assert_eq!(back, sent);
}

#[test]
fn socket_preserves_order_and_self_delivery() {
    let (a, b) = pair();
    for i in 0..100u8 {
        a.send(NodeId(1), frame(&[0xEE, i])).unwrap();
    }
    a.send(NodeId(0), frame(&[0xEE, 7])).unwrap();
    for i in 0..100u8 {
        let (_, f) = b.recv_timeout(Duration::from_secs(5)).unwrap().unwrap();
        assert_eq!(f[5], i);
    }
    let (from, f) = a.recv_timeout(Duration::from_secs(5)).unwrap().unwrap();
    assert_eq!((from, f[5]), (NodeId(0), 7));
    assert!(b.recv_timeout(Duration::from_millis(50)).unwrap().is_none());
}

#[test]
fn loopback_keeps_per_sender_order_under_interleaving() {
    let hub = LoopbackHub::build(3);
    thread::scope(|s| {
        for sender in [&hub[0], &hub[1]] {
            s.spawn(move || {
                for i in 0..1000u32 {
                    sender.send(NodeId(2), frame(&i.to_le_bytes())).unwrap();
                }
            });
        }
    });
    let mut next = [0u32; 2];
    for _ in 0..2000 {
        let (from, f) = hub[2].recv_timeout(Duration::from_secs(1)).unwrap().unwrap();
        let i = u32::from_le_bytes(f[4..8].try_into().unwrap());
        assert_eq!(i, next[from.index()]);
        next[from.index()] += 1;
    }
    assert_eq!(next, [1000, 1000]);
}
