use std::collections::BTreeSet;

use gladder_core::graph::{induced_edges, sample, SamplerConfig, Split, TextualGraph};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn graph(n: usize, edges: &[(usize, usize)]) -> TextualGraph {
    TextualGraph::new(1, vec![String::new(); n], vec![0; n], vec![Split::Train; n], edges.iter().copied()).unwrap()
}

fn cycle(n: usize) -> TextualGraph {
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    graph(n, &edges)
}

/// Straight replay of the documented walk: one ChaCha8 stream per walk,
/// a restart draw per step, then a neighbor draw when not restarting.
fn replay_rwr(adj: &[Vec<usize>], target: usize, seed: u64, walks: usize, len: usize, restart: f64) -> Vec<usize> {
    let mut members = vec![target];
    for w in 0..walks {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(((target as u64) << 32) | w as u64);
        let mut at = target;
        for _ in 0..len {
            let u = (r.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            if u < restart {
                at = target;
            } else if !adj[at].is_empty() {
                let idx = ((r.next_u64() as u128 * adj[at].len() as u128) >> 64) as usize;
                at = adj[at][idx];
            }
            if !members.contains(&at) {
                members.push(at);
            }
        }
    }
    members
}

#[test]
fn rwr_seed_42_on_a_ten_cycle() {
    let g = cycle(10);
    let adj: Vec<Vec<usize>> = (0..10).map(|i| g.neighbors(i).to_vec()).collect();
    let oracle = replay_rwr(&adj, 0, 42, 2, 4, 0.5);
    let sub = sample(&g, 0, &SamplerConfig::rwr(2, 4, 0.5, 32, 42)).unwrap();
    assert_eq!(sub.members, oracle);
    // Frozen from the replay above.
    assert_eq!(sub.members, FROZEN_RWR_42);
}

const FROZEN_RWR_42: &[usize] = &[0, 9, 1];

#[test]
fn rwr_replay_agrees_on_many_seeds() {
    let g = graph(7, &[(0, 1), (1, 2), (2, 3), (3, 0), (3, 4), (5, 6)]);
    let adj: Vec<Vec<usize>> = (0..7).map(|i| g.neighbors(i).to_vec()).collect();
    for seed in 0..50 {
        for target in 0..7 {
            let cfg = SamplerConfig::rwr(3, 6, 0.3, 32, seed);
            let sub = sample(&g, target, &cfg).unwrap();
            assert_eq!(sub.members, replay_rwr(&adj, target, seed, 3, 6, 0.3), "seed {seed} target {target}");
        }
    }
}

#[test]
fn rwr_extremes() {
    let g = graph(3, &[(0, 1), (1, 2)]);
    let sub = sample(&g, 1, &SamplerConfig::rwr(4, 10, 1.0, 32, 3)).unwrap();
    assert_eq!(sub.members, vec![1]);
    let sub = sample(&g, 0, &SamplerConfig::rwr(1, 1, 0.0, 32, 3)).unwrap();
    assert_eq!(sub.members, vec![0, 1]);
    let isolated = graph(2, &[]);
    let sub = sample(&isolated, 1, &SamplerConfig::rwr(2, 5, 0.0, 32, 9)).unwrap();
    assert_eq!(sub.members, vec![1]);
}

fn brute_induced(edges: &BTreeSet<(usize, usize)>, members: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            let (a, b) = (members[i].min(members[j]), members[i].max(members[j]));
            if edges.contains(&(a, b)) {
                out.push((i, j));
            }
        }
    }
    out.sort_unstable();
    out
}

/// Every graph on up to six nodes, every member subset in ascending and
/// descending order, and both samplers from every target.
#[test]
fn induced_edges_match_brute_force_on_all_small_graphs() {
    for n in 1..=6usize {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        for mask in 0u32..(1 << pairs.len()) {
            let edges: Vec<_> = pairs.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &p)| p).collect();
            let set: BTreeSet<_> = edges.iter().copied().collect();
            let g = graph(n, &edges);
            for subset in 1u32..(1 << n) {
                let mut members: Vec<usize> = (0..n).filter(|&v| subset >> v & 1 == 1).collect();
                assert_eq!(induced_edges(&g, &members), brute_induced(&set, &members));
                members.reverse();
                assert_eq!(induced_edges(&g, &members), brute_induced(&set, &members));
            }
            for target in 0..n {
                for cfg in [SamplerConfig::khop(2, 4), SamplerConfig::rwr(2, 4, 0.4, 5, mask as u64)] {
                    let sub = sample(&g, target, &cfg).unwrap();
                    assert_eq!(sub.members[0], target);
                    assert!(sub.members.len() <= cfg.max_nodes);
                    assert_eq!(sub.local_edges, brute_induced(&set, &sub.members));
                }
            }
        }
    }
}

#[test]
fn khop_examples() {
    let g = graph(3, &[(0, 1), (1, 2)]);
    let sub = sample(&g, 1, &SamplerConfig::khop(1, 32)).unwrap();
    assert_eq!(sub.members, vec![1, 0, 2]);
    assert_eq!(sub.local_edges.len(), 2);

    let star: Vec<_> = (1..=10).map(|i| (0, i)).collect();
    let g = graph(11, &star);
    let sub = sample(&g, 0, &SamplerConfig::khop(1, 5)).unwrap();
    assert_eq!(sub.members, vec![0, 1, 2, 3, 4]);
}
