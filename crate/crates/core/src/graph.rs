//! Intra-speaker and inter-speaker relational subgraphs.
//!
//! Edge-type ids:
//!
//! | id | graph | meaning |
//! |----|-------|---------|
//! | 0  | both  | no edge |
//! | 1  | both  | self-loop |
//! | 2  | intra | same speaker, `j` earlier than `i` |
//! | 3  | intra | same speaker, `j` later than `i` |
//! | 4  | inter | other speaker, `j` later than `i` |
//! | 5  | inter | other speaker, `j` earlier than `i` |
//!
//! Only pairs with `|i - j| <= window` and both positions valid get an edge.

use std::sync::Arc;

use serde::Serialize;

use crate::autodiff::EdgeList;

pub const NO_EDGE: u8 = 0;
pub const SELF_LOOP: u8 = 1;
pub const INTRA_PAST: u8 = 2;
pub const INTRA_FUTURE: u8 = 3;
pub const INTER_FUTURE: u8 = 4;
pub const INTER_PAST: u8 = 5;
/// Number of distinct ids including "no edge".
pub const NUM_EDGE_TYPES: usize = 6;

/// Dense `[batch, nodes, nodes]` edge-type ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    pub batch: usize,
    pub nodes: usize,
    pub ids: Vec<u8>,
}

impl Adjacency {
    pub fn zeros(batch: usize, nodes: usize) -> Self {
        Adjacency {
            batch,
            nodes,
            ids: vec![NO_EDGE; batch * nodes * nodes],
        }
    }

    #[inline]
    pub fn get(&self, b: usize, i: usize, j: usize) -> u8 {
        self.ids[(b * self.nodes + i) * self.nodes + j]
    }

    #[inline]
    pub fn set(&mut self, b: usize, i: usize, j: usize, id: u8) {
        self.ids[(b * self.nodes + i) * self.nodes + j] = id;
    }

    /// Nested `[b][i][j]` form for JSON output.
    pub fn to_nested(&self) -> Vec<Vec<Vec<u8>>> {
        (0..self.batch)
            .map(|b| {
                (0..self.nodes)
                    .map(|i| (0..self.nodes).map(|j| self.get(b, i, j)).collect())
                    .collect()
            })
            .collect()
    }

    pub fn edges(&self) -> EdgeList {
        EdgeList::from_dense(self.batch, self.nodes, &self.ids)
    }

    pub fn num_edges(&self) -> usize {
        self.ids.iter().filter(|&&x| x != NO_EDGE).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationalSubgraphs {
    /// Intra-speaker ids in {0, 1, 2, 3}.
    pub adj_s: Adjacency,
    /// Inter-speaker ids in {0, 1, 4, 5}.
    pub adj_c: Adjacency,
    pub window: usize,
}

impl RelationalSubgraphs {
    /// Sparse edge lists `(intra, inter)` for the attention layers.
    pub fn edge_lists(&self) -> (Arc<EdgeList>, Arc<EdgeList>) {
        (Arc::new(self.adj_s.edges()), Arc::new(self.adj_c.edges()))
    }
}

#[derive(Serialize)]
pub struct SubgraphDump<'a> {
    pub id: &'a str,
    pub window: usize,
    pub adj_s: Vec<Vec<u8>>,
    pub adj_c: Vec<Vec<u8>>,
}

/// Build both subgraphs for a `[batch, nodes]` grid of speakers and validity flags.
///
/// Work is `O(batch · nodes · window)`; only the band `|i - j| <= window` is visited.
pub fn build_subgraphs(speakers: &[usize], mask: &[bool], batch: usize, nodes: usize, window: usize) -> RelationalSubgraphs {
    debug_assert_eq!(speakers.len(), batch * nodes);
    debug_assert_eq!(mask.len(), batch * nodes);
    let mut adj_s = Adjacency::zeros(batch, nodes);
    let mut adj_c = Adjacency::zeros(batch, nodes);
    for b in 0..batch {
        let spk = &speakers[b * nodes..(b + 1) * nodes];
        let valid = &mask[b * nodes..(b + 1) * nodes];
        for i in (0..nodes).filter(|&i| valid[i]) {
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(nodes.saturating_sub(1));
            for j in (lo..=hi).filter(|&j| valid[j]) {
                let (s, c) = if i == j {
                    (SELF_LOOP, SELF_LOOP)
                } else if spk[i] == spk[j] {
                    (if j < i { INTRA_PAST } else { INTRA_FUTURE }, NO_EDGE)
                } else {
                    (NO_EDGE, if j < i { INTER_PAST } else { INTER_FUTURE })
                };
                adj_s.set(b, i, j, s);
                adj_c.set(b, i, j, c);
            }
        }
    }
    RelationalSubgraphs { adj_s, adj_c, window }
}

/// Literal case analysis over every `(i, j)` pair. Kept deliberately naive
/// as a reference for [`build_subgraphs`].
pub mod oracle {
    use super::*;

    pub fn intra_case(i: usize, j: usize, si: usize, sj: usize, w: usize) -> u8 {
        let dist = i.abs_diff(j);
        if i == j && si == sj {
            1
        } else if i > j && dist <= w && si == sj {
            2
        } else if i < j && dist <= w && si == sj {
            3
        } else {
            0
        }
    }

    pub fn inter_case(i: usize, j: usize, si: usize, sj: usize, w: usize) -> u8 {
        let dist = i.abs_diff(j);
        if i == j {
            1
        } else if i < j && dist <= w && si != sj {
            4
        } else if i > j && dist <= w && si != sj {
            5
        } else {
            0
        }
    }

    pub fn oracle_build_subgraphs(speakers: &[usize], mask: &[bool], batch: usize, nodes: usize, window: usize) -> RelationalSubgraphs {
        let mut adj_s = Adjacency::zeros(batch, nodes);
        let mut adj_c = Adjacency::zeros(batch, nodes);
        for b in 0..batch {
            for i in 0..nodes {
                for j in 0..nodes {
                    let (pi, pj) = (b * nodes + i, b * nodes + j);
                    if !mask[pi] || !mask[pj] {
                        continue;
                    }
                    let (si, sj) = (speakers[pi], speakers[pj]);
                    adj_s.set(b, i, j, intra_case(i, j, si, sj, window));
                    adj_c.set(b, i, j, inter_case(i, j, si, sj, window));
                }
            }
        }
        RelationalSubgraphs { adj_s, adj_c, window }
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::oracle_build_subgraphs;
    use super::*;
    use proptest::prelude::*;

    fn single(speakers: &[usize], w: usize) -> RelationalSubgraphs {
        let mask = vec![true; speakers.len()];
        build_subgraphs(speakers, &mask, 1, speakers.len(), w)
    }

    #[test]
    fn one_utterance_is_a_self_loop() {
        let g = single(&[0], 5);
        assert_eq!(g.adj_s.ids, vec![1]);
        assert_eq!(g.adj_c.ids, vec![1]);
    }

    #[test]
    fn aba_hand_case() {
        let g = single(&[0, 1, 0], 5);
        assert_eq!(g.adj_s.to_nested()[0], vec![vec![1, 0, 3], vec![0, 1, 0], vec![2, 0, 1]]);
        assert_eq!(g.adj_c.to_nested()[0], vec![vec![1, 4, 0], vec![5, 1, 4], vec![0, 5, 1]]);
    }

    #[test]
    fn zero_window_keeps_only_self_loops() {
        let g = single(&[0, 0], 0);
        assert_eq!(g.adj_s.ids, vec![1, 0, 0, 1]);
        assert_eq!(g.adj_c.ids, vec![1, 0, 0, 1]);
    }

    #[test]
    fn fully_masked_dialogue_is_empty() {
        let g = build_subgraphs(&[0, 1, 0], &[false; 3], 1, 3, 5);
        assert_eq!(g.adj_s.num_edges() + g.adj_c.num_edges(), 0);
        let o = oracle_build_subgraphs(&[0, 1, 0], &[false; 3], 1, 3, 5);
        assert_eq!(g, o);
    }

    #[test]
    fn alternating_speakers_link_same_parity() {
        let spk: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let g = single(&spk, 8);
        assert_eq!(g, oracle_build_subgraphs(&spk, &[true; 8], 1, 8, 8));
        for i in 0..8 {
            for j in 0..8 {
                let same_parity = (i + j) % 2 == 0;
                assert_eq!(g.adj_s.get(0, i, j) != 0, same_parity, "({i},{j})");
            }
        }
    }

    fn instance() -> impl Strategy<Value = (usize, Vec<usize>, Vec<bool>, usize)> {
        (1usize..=12, 1usize..=9, 0usize..=6).prop_flat_map(|(l, ns, w)| {
            (
                Just(l),
                proptest::collection::vec(0..ns, l),
                proptest::collection::vec(proptest::bool::weighted(0.85), l),
                Just(w),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_oracle((l, spk, mask, w) in instance()) {
            prop_assert_eq!(build_subgraphs(&spk, &mask, 1, l, w), oracle_build_subgraphs(&spk, &mask, 1, l, w));
        }

        #[test]
        fn structural_invariants((l, spk, mask, w) in instance()) {
            let g = build_subgraphs(&spk, &mask, 1, l, w);
            for i in 0..l {
                for j in 0..l {
                    let (s, c) = (g.adj_s.get(0, i, j), g.adj_c.get(0, i, j));
                    if !mask[i] || !mask[j] {
                        prop_assert_eq!((s, c), (0, 0));
                        continue;
                    }
                    if i == j {
                        prop_assert_eq!((s, c), (1, 1));
                        continue;
                    }
                    // exactly one graph claims each in-window pair
                    prop_assert!(s == 0 || c == 0);
                    prop_assert_eq!(s != 0 || c != 0, i.abs_diff(j) <= w);
                    if s != 0 { prop_assert_eq!(spk[i], spk[j]); }
                    if c != 0 { prop_assert_ne!(spk[i], spk[j]); }
                    prop_assert_eq!(s == 2, g.adj_s.get(0, j, i) == 3);
                    prop_assert_eq!(c == 5, g.adj_c.get(0, j, i) == 4);
                }
            }
        }

        #[test]
        fn window_monotone((l, spk, mask, w) in instance()) {
            let small = build_subgraphs(&spk, &mask, 1, l, w);
            let big = build_subgraphs(&spk, &mask, 1, l, w + 1);
            for i in 0..l {
                for j in 0..l {
                    for (a, b) in [(&small.adj_s, &big.adj_s), (&small.adj_c, &big.adj_c)] {
                        if a.get(0, i, j) != 0 {
                            prop_assert_eq!(a.get(0, i, j), b.get(0, i, j));
                        } else if b.get(0, i, j) != 0 {
                            prop_assert!(i.abs_diff(j) > w);
                        }
                    }
                }
            }
        }

        #[test]
        fn speaker_relabel_invariant((l, spk, mask, w) in instance(), shift in 1usize..9) {
            let relabeled: Vec<usize> = spk.iter().map(|&s| (s + shift) % 9).collect();
            prop_assert_eq!(build_subgraphs(&spk, &mask, 1, l, w), build_subgraphs(&relabeled, &mask, 1, l, w));
        }
    }
}
