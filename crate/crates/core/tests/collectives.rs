use std::net::TcpListener;
use std::time::{Duration, Instant};

use pipesgd_core::collective::{
    barrier, broadcast_from_root, gather_to_root, pipelined_allreduce, ring_allreduce, InProcNetwork, Instrumented,
    LinkModel, TcpEndpoint, Transport,
};
use pipesgd_core::compression::{payload_size, CodecId, BLOCK_HEADER_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Runs `f(rank, endpoint)` on every rank of an in-process cluster.
fn on_cluster<R: Send>(p: usize, link: LinkModel, f: impl Fn(usize, &Instrumented<pipesgd_core::collective::InProcEndpoint>) -> R + Sync) -> Vec<R> {
    let endpoints: Vec<_> = InProcNetwork::build(p, link).into_iter().map(Instrumented::new).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = endpoints.iter().enumerate().map(|(r, ep)| {
            let f = &f;
            s.spawn(move || f(r, ep))
        }).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn inputs(p: usize, n: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..p).map(|_| (0..n).map(|_| rng.random_range(-10.0f32..10.0)).collect()).collect()
}

fn reference_sum(locals: &[Vec<f32>]) -> Vec<f64> {
    let n = locals[0].len();
    (0..n).map(|i| locals.iter().map(|v| v[i] as f64).sum()).collect()
}

#[test]
fn ring_sums_match_direct_sum() {
    for p in [1, 2, 3, 5] {
        for n in [1, 2, p, 33, 1000] {
            let locals = inputs(p, n, (p * 1000 + n) as u64);
            let expect = reference_sum(&locals);
            let outs = on_cluster(p, LinkModel::default(), |r, ep| ring_allreduce(&locals[r], ep, CodecId::None, 1).unwrap());
            for out in &outs {
                for (o, e) in out.iter().zip(&expect) {
                    assert!((*o as f64 - e).abs() <= 1e-5 * e.abs().max(1.0), "p={p} n={n}: {o} vs {e}");
                }
                assert_eq!(out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), outs[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }
}

#[test]
fn pipelined_matches_ring_bit_for_bit() {
    for codec in [CodecId::None, CodecId::Trunc16] {
        for (p, n, chunks) in [(2, 100, 3), (4, 4099, 4), (3, 5, 8)] {
            let locals = inputs(p, n, 9);
            let ring = on_cluster(p, LinkModel::default(), |r, ep| ring_allreduce(&locals[r], ep, codec, 3).unwrap());
            let piped = on_cluster(p, LinkModel::default(), |r, ep| pipelined_allreduce(&locals[r], ep, codec, 3, chunks).unwrap());
            for (a, b) in ring.iter().zip(&piped) {
                assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), "{codec} p={p}");
            }
        }
    }
}

#[test]
fn message_and_byte_counts() {
    for codec in CodecId::ALL {
        for p in [2, 3, 4, 8] {
            let n = 96 * p;
            let locals = inputs(p, n, 5);
            let stats = on_cluster(p, LinkModel::default(), |r, ep| {
                ring_allreduce(&locals[r], ep, codec, 1).unwrap();
                ep.stats()
            });
            let steps = 2 * (p as u64 - 1);
            let payload = steps * payload_size(codec, n / p) as u64;
            for s in stats {
                assert_eq!(s.data_messages, steps);
                assert_eq!(s.data_bytes, payload + steps * BLOCK_HEADER_LEN as u64, "{codec} p={p}");
                assert_eq!(s.control_messages, 0);
            }
            let chunked = on_cluster(p, LinkModel::default(), |r, ep| {
                pipelined_allreduce(&locals[r], ep, codec, 1, 4).unwrap();
                ep.stats()
            });
            for s in chunked {
                assert_eq!(s.data_messages, steps * 4);
                assert_eq!(s.data_bytes, payload + steps * 4 * BLOCK_HEADER_LEN as u64);
            }
        }
    }
}

#[test]
fn quant8_error_stays_within_envelope() {
    // Each of the p-1 reduce hops and the first encoding add at most half a
    // step of the block maximum at that point.
    for p in [2, 4, 8] {
        let locals = inputs(p, 512, 77);
        let expect = reference_sum(&locals);
        let outs = on_cluster(p, LinkModel::default(), |r, ep| ring_allreduce(&locals[r], ep, CodecId::Quant8, 1).unwrap());
        let bound: f64 = locals.iter().map(|v| v.iter().fold(0.0f64, |m, x| m.max(x.abs() as f64))).sum::<f64>() / 254.0 * p as f64;
        for out in &outs {
            for (o, e) in out.iter().zip(&expect) {
                assert!((*o as f64 - e).abs() <= bound, "p={p}: {o} vs {e}, bound {bound}");
            }
            assert_eq!(out, &outs[0]);
        }
    }
}

#[test]
fn rank_count_of_one_is_identity() {
    let v = vec![1.5f32, -2.25, 3.0];
    let out = on_cluster(1, LinkModel::default(), |_, ep| {
        (ring_allreduce(&v, ep, CodecId::Quant8, 1).unwrap(), ep.stats())
    });
    assert_eq!(out[0].0, v);
    assert_eq!(out[0].1.data_messages, 0);
}

#[test]
fn gather_and_broadcast() {
    let p = 5;
    let locals = inputs(p, 40, 3);
    let expect = reference_sum(&locals);
    let outs = on_cluster(p, LinkModel::default(), |r, ep| {
        let sum = gather_to_root(&locals[r], 4, ep, 7).unwrap();
        assert_eq!(sum.is_some(), r == 4);
        broadcast_from_root(sum.as_deref(), 4, ep, 7).unwrap()
    });
    for out in &outs {
        assert_eq!(out, &outs[4]);
        for (o, e) in out.iter().zip(&expect) {
            assert!((*o as f64 - e).abs() < 1e-4);
        }
    }
}

#[test]
fn barrier_waits_for_the_slowest() {
    let p = 4;
    let start = Instant::now();
    let exits = on_cluster(p, LinkModel::default(), |r, ep| {
        if r == 2 {
            std::thread::sleep(Duration::from_millis(60));
        }
        barrier(ep, 1).unwrap();
        start.elapsed()
    });
    for e in exits {
        assert!(e >= Duration::from_millis(60), "{e:?}");
    }
}

#[test]
fn ring_time_follows_link_model() {
    let p = 4;
    let link = LinkModel::new(Duration::from_millis(5), 0.0);
    let locals = inputs(p, 64, 1);
    let spans = on_cluster(p, link, |r, ep| {
        barrier(ep, 0).unwrap();
        let t = Instant::now();
        ring_allreduce(&locals[r], ep, CodecId::None, 1).unwrap();
        (t, Instant::now())
    });
    // 2(p-1) dependent hops of 5 ms each, measured from the first rank to
    // leave the barrier.
    let first = spans.iter().map(|s| s.0).min().unwrap();
    let last = spans.iter().map(|s| s.1).max().unwrap();
    let total = last - first;
    assert!(total >= Duration::from_millis(30) && total < Duration::from_millis(90), "{total:?}");
}

fn free_ports(n: usize) -> Vec<String> {
    let listeners: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    listeners.iter().map(|l| l.local_addr().unwrap().to_string()).collect()
}

#[test]
fn tcp_loopback_allreduce() {
    let p = 3;
    let roster = free_ports(p);
    let locals = inputs(p, 1000, 4);
    let expect = reference_sum(&locals);
    let outs: Vec<Vec<f32>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..p)
            .map(|r| {
                let roster = &roster;
                let local = &locals[r];
                s.spawn(move || {
                    let ep = TcpEndpoint::connect(r, roster, Duration::from_secs(10)).unwrap();
                    barrier(&ep, 0).unwrap();
                    let a = ring_allreduce(local, &ep, CodecId::None, 1).unwrap();
                    let b = pipelined_allreduce(local, &ep, CodecId::None, 2, 3).unwrap();
                    assert_eq!(a, b);
                    barrier(&ep, 3).unwrap();
                    a
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for out in &outs {
        assert_eq!(out, &outs[0]);
        for (o, e) in out.iter().zip(&expect) {
            assert!((*o as f64 - e).abs() <= 1e-5 * e.abs().max(1.0));
        }
    }
}

#[test]
fn tcp_peer_loss_is_reported() {
    let roster = free_ports(2);
    let result = std::thread::scope(|s| {
        let r = &roster;
        let survivor = s.spawn(move || {
            let mut ep = TcpEndpoint::connect(0, r, Duration::from_secs(10)).unwrap();
            ep.set_timeout(Duration::from_secs(5));
            ep.recv(1)
        });
        s.spawn(move || {
            let ep = TcpEndpoint::connect(1, r, Duration::from_secs(10)).unwrap();
            drop(ep);
        });
        survivor.join().unwrap()
    });
    assert!(result.is_err());
}
