//! Differential relational graph attention.
//!
//! Each head projects node features, splits them into a positive and a
//! negative half, scores edges GAT-style (`q_i + k_j + rel[type]`) in both
//! halves, and combines the two row-softmaxes as
//! `α = α_pos - λ_full · α_neg`. Aggregation uses the full projected
//! features. Attention is evaluated on the sparse edge list only, so a
//! windowed graph costs `O(B · L · w · d)` per head.
//!
//! A layer runs `heads` such heads, concatenates them, applies dropout, a
//! single-head output attention over the same graph (no relation term), a
//! fully connected map with residual, and layer norm. A modality stack is
//! the inter-speaker layer followed by the intra-speaker layer.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{EdgeList, ParamStore, Scalar, Tape, Tensor, Var};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::graph::{RelationalSubgraphs, NUM_EDGE_TYPES};
use crate::nn;
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    /// Two-branch attention with learned `λ` and relation-aware scores.
    Differential,
    /// Single-branch GAT attention: no negative branch, no relation term.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffRgcnConfig {
    pub hidden: usize,
    pub heads: usize,
    /// Width of the relation embedding table.
    pub rel_dim: usize,
    /// Length of the `λ` vectors; `None` means half the head width.
    pub lambda_dim: Option<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
    /// Number of (inter, intra) layer pairs per modality.
    pub pairs: usize,
    pub kind: AttentionKind,
    pub ln_eps: f64,
}

impl Default for DiffRgcnConfig {
    fn default() -> Self {
        DiffRgcnConfig {
            hidden: 512,
            heads: 4,
            rel_dim: 8,
            lambda_dim: None,
            dropout: 0.1,
            leaky_slope: 0.2,
            pairs: 1,
            kind: AttentionKind::Differential,
            ln_eps: 1e-5,
        }
    }
}

impl DiffRgcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "graph hidden width {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.kind == AttentionKind::Differential && (self.hidden / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "differential attention needs an even head width, got {}",
                self.hidden / self.heads
            )));
        }
        if self.pairs == 0 {
            return Err(Error::Config("graph stack needs at least one layer pair".into()));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.hidden / self.heads
    }

    fn lambda_len(&self, width: usize) -> usize {
        self.lambda_dim.unwrap_or(width / 2).max(1)
    }

    pub fn num_layers(&self) -> usize {
        2 * self.pairs
    }
}

/// `0.8 - 0.6 · exp(-0.3 · depth)`, evaluated as `0.2 + 0.6 · (1 - exp(-0.3 · depth))`
/// so that depth 0 gives exactly `0.2`.
pub fn lambda_init(depth: usize) -> f64 {
    0.2 - 0.6 * (-0.3 * depth as f64).exp_m1()
}

/// Which subgraph a layer attends over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerGraph {
    Inter,
    Intra,
}

/// Layer `depth` of a stack alternates inter, intra, inter, ...
pub fn layer_graph(depth: usize) -> LayerGraph {
    if depth % 2 == 0 {
        LayerGraph::Inter
    } else {
        LayerGraph::Intra
    }
}

pub fn stack_prefix(m: Modality) -> String {
    format!("gnn.{}", m.short())
}

pub fn layer_prefix(m: Modality, depth: usize) -> String {
    format!("gnn.{}.l{depth}", m.short())
}

// ── parameters ──────────────────────────────────────────────────────

/// Parameters of one attention head mapping `d_in → d_out`.
pub fn init_head<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    relation: bool,
    cfg: &DiffRgcnConfig,
    rng: &mut R,
) {
    nn::init_linear(store, prefix, d_in, d_out, false, rng);
    match cfg.kind {
        AttentionKind::Plain => {
            let bound = 1.0 / (d_out as f64).sqrt();
            store.insert(format!("{prefix}.pos.left"), Tensor::uniform(&[d_out, 1], bound, rng));
            store.insert(format!("{prefix}.pos.right"), Tensor::uniform(&[d_out, 1], bound, rng));
        }
        AttentionKind::Differential => {
            let half = d_out / 2;
            let bound = 1.0 / (half as f64).sqrt();
            for branch in ["pos", "neg"] {
                store.insert(format!("{prefix}.{branch}.left"), Tensor::uniform(&[half, 1], bound, rng));
                store.insert(format!("{prefix}.{branch}.right"), Tensor::uniform(&[half, 1], bound, rng));
            }
            if relation {
                store.insert(format!("{prefix}.rel.embed"), Tensor::randn(&[NUM_EDGE_TYPES, cfg.rel_dim], 1.0, rng));
                let rb = 1.0 / (cfg.rel_dim as f64).sqrt();
                store.insert(format!("{prefix}.rel.pos"), Tensor::uniform(&[cfg.rel_dim, 1], rb, rng));
                store.insert(format!("{prefix}.rel.neg"), Tensor::uniform(&[cfg.rel_dim, 1], rb, rng));
            }
            // variance 0.1
            let d = cfg.lambda_len(d_out);
            for name in ["left1", "right1", "left2", "right2"] {
                store.insert(format!("{prefix}.lambda.{name}"), Tensor::randn(&[d], 0.1f64.sqrt(), rng));
            }
        }
    }
}

pub fn init_layer<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_in: usize,
    cfg: &DiffRgcnConfig,
    rng: &mut R,
) {
    let d = cfg.hidden;
    for k in 0..cfg.heads {
        init_head(store, &format!("{prefix}.head{k}"), d_in, cfg.head_width(), true, cfg, rng);
    }
    init_head(store, &format!("{prefix}.out"), d, d, false, cfg, rng);
    nn::init_linear(store, &format!("{prefix}.fc"), d, d, true, rng);
    if d_in != d {
        nn::init_linear(store, &format!("{prefix}.res"), d_in, d, false, rng);
    }
    nn::init_layer_norm(store, &format!("{prefix}.ln"), d);
}

/// Initialize the stacks of all three modalities with input width `cfg.hidden`.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &DiffRgcnConfig, store: &mut ParamStore<T>, rng: &mut R) {
    for m in Modality::ALL {
        for depth in 0..cfg.num_layers() {
            init_layer(store, &layer_prefix(m, depth), cfg.hidden, cfg, rng);
        }
    }
}

/// Current `λ_full` of one head, from parameter values alone.
pub fn lambda_full<T: Scalar>(store: &ParamStore<T>, head_prefix: &str, depth: usize) -> Result<f64> {
    let dot = |a: &str, b: &str| -> Result<f64> {
        let x = store.get(&format!("{head_prefix}.lambda.{a}"))?;
        let y = store.get(&format!("{head_prefix}.lambda.{b}"))?;
        Ok(x.data().iter().zip(y.data()).map(|(p, q)| p.f64() * q.f64()).sum())
    };
    Ok(dot("left1", "right1")?.exp() - dot("left2", "right2")?.exp() + lambda_init(depth))
}

// ── forward ─────────────────────────────────────────────────────────

/// Sparse attention weights of one head, one entry per edge.
pub struct HeadOutput {
    pub features: Var,
    pub alpha: Var,
    pub lambda_full: Option<Var>,
}

fn branch_scores<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    branch: &str,
    wh: Var,
    rel_embed: Option<Var>,
    edges: &Arc<EdgeList>,
    slope: f64,
) -> Result<Var> {
    let left = tape.param(store, &format!("{prefix}.{branch}.left"))?;
    let right = tape.param(store, &format!("{prefix}.{branch}.right"))?;
    let q = tape.matmul(wh, left)?;
    let k = tape.matmul(wh, right)?;
    let rel = match rel_embed {
        Some(table) => {
            let proj = tape.param(store, &format!("{prefix}.rel.{branch}"))?;
            Some(tape.matmul(table, proj)?)
        }
        None => None,
    };
    let e = tape.edge_scores(q, k, rel, edges)?;
    let e = tape.leaky_relu(e, T::of(slope));
    tape.segment_softmax(e, edges)
}

fn exp_dot<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, a: &str, b: &str) -> Result<Var> {
    let x = tape.param(store, &format!("{prefix}.lambda.{a}"))?;
    let y = tape.param(store, &format!("{prefix}.lambda.{b}"))?;
    let xy = tape.mul(x, y)?;
    let s = tape.sum(xy);
    Ok(tape.exp(s))
}

/// One attention head over `edges`. `h` is `[B, L, d_in]`.
pub fn diff_attention_head<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    h: Var,
    edges: &Arc<EdgeList>,
    depth: usize,
    cfg: &DiffRgcnConfig,
) -> Result<HeadOutput> {
    let wh = nn::linear(tape, store, prefix, h)?;
    let width = *tape.shape(wh).last().expect("rank 3");
    match cfg.kind {
        AttentionKind::Plain => {
            let alpha = branch_scores(tape, store, prefix, "pos", wh, None, edges, cfg.leaky_slope)?;
            let features = tape.edge_aggregate(alpha, wh, edges)?;
            Ok(HeadOutput {
                features,
                alpha,
                lambda_full: None,
            })
        }
        AttentionKind::Differential => {
            let half = width / 2;
            let wh_pos = tape.slice_last(wh, 0, half)?;
            let wh_neg = tape.slice_last(wh, half, half)?;
            let rel_name = format!("{prefix}.rel.embed");
            let rel = if store.contains(&rel_name) {
                Some(tape.param(store, &rel_name)?)
            } else {
                None
            };
            let a_pos = branch_scores(tape, store, prefix, "pos", wh_pos, rel, edges, cfg.leaky_slope)?;
            let a_neg = branch_scores(tape, store, prefix, "neg", wh_neg, rel, edges, cfg.leaky_slope)?;
            let l1 = exp_dot(tape, store, prefix, "left1", "right1")?;
            let l2 = exp_dot(tape, store, prefix, "left2", "right2")?;
            let diff = tape.sub(l1, l2)?;
            let lam = tape.shift(diff, T::of(lambda_init(depth)));
            let scaled = tape.mul(a_neg, lam)?;
            let alpha = tape.sub(a_pos, scaled)?;
            // concat(v_pos, v_neg) is the projection itself
            let features = tape.edge_aggregate(alpha, wh, edges)?;
            Ok(HeadOutput {
                features,
                alpha,
                lambda_full: Some(lam),
            })
        }
    }
}

/// Dense `[B, L, L]` view of per-edge attention weights.
pub fn dense_alpha<T: Scalar>(tape: &Tape<T>, alpha: Var, edges: &EdgeList) -> Tensor<T> {
    let n = edges.nodes;
    Tensor::from_vec(&[edges.batch, n, n], edges.scatter_dense(tape.value(alpha).data()))
}

/// Attention of one layer, kept for inspection.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    pub depth: usize,
    pub graph: LayerGraph,
    /// Dense `[B, L, L]` weights per head.
    pub heads: Vec<Tensor<T>>,
    pub output: Tensor<T>,
    pub lambda_full: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn diff_rgcn_layer<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    h: Var,
    edges: &Arc<EdgeList>,
    mask: &[bool],
    depth: usize,
    cfg: &DiffRgcnConfig,
    dropout_rng: Option<&mut StreamRng>,
    trace: Option<&mut Vec<LayerTrace<T>>>,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut head_alpha = Vec::new();
    let mut lambdas = Vec::new();
    for k in 0..cfg.heads {
        let head = diff_attention_head(tape, store, &format!("{prefix}.head{k}"), h, edges, depth, cfg)?;
        outs.push(head.features);
        if trace.is_some() {
            head_alpha.push(dense_alpha(tape, head.alpha, edges));
            lambdas.extend(head.lambda_full.map(|l| tape.value(l).item().f64()));
        }
    }
    let x = if outs.len() == 1 { outs[0] } else { tape.concat_last(&outs)? };
    let x = nn::dropout(tape, x, cfg.dropout, dropout_rng);
    let out = diff_attention_head(tape, store, &format!("{prefix}.out"), x, edges, depth, cfg)?;
    let y = nn::linear(tape, store, &format!("{prefix}.fc"), out.features)?;
    let res_name = format!("{prefix}.res");
    let res = if store.contains(&format!("{res_name}.w")) {
        nn::linear(tape, store, &res_name, h)?
    } else {
        h
    };
    let y = tape.add(y, res)?;
    let y = nn::layer_norm(tape, store, &format!("{prefix}.ln"), y, cfg.ln_eps)?;
    let y = nn::apply_row_mask(tape, y, mask)?;
    if let Some(trace) = trace {
        lambdas.extend(out.lambda_full.map(|l| tape.value(l).item().f64()));
        trace.push(LayerTrace {
            depth,
            graph: layer_graph(depth),
            heads: head_alpha,
            output: dense_alpha(tape, out.alpha, edges),
            lambda_full: lambdas,
        });
    }
    Ok(y)
}

/// Inter-speaker then intra-speaker layers for one modality.
#[allow(clippy::too_many_arguments)]
pub fn modality_stack<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    m: Modality,
    x: Var,
    intra: &Arc<EdgeList>,
    inter: &Arc<EdgeList>,
    mask: &[bool],
    cfg: &DiffRgcnConfig,
    mut dropout_rng: Option<&mut StreamRng>,
    mut trace: Option<&mut Vec<LayerTrace<T>>>,
) -> Result<Var> {
    let mut h = x;
    for depth in 0..cfg.num_layers() {
        let edges = match layer_graph(depth) {
            LayerGraph::Inter => inter,
            LayerGraph::Intra => intra,
        };
        h = diff_rgcn_layer(
            tape,
            store,
            &layer_prefix(m, depth),
            h,
            edges,
            mask,
            depth,
            cfg,
            dropout_rng.as_deref_mut(),
            trace.as_deref_mut(),
        )?;
    }
    Ok(h)
}

/// Graph features for all three modalities; each modality has its own weights
/// and all share the same subgraphs.
#[allow(clippy::too_many_arguments)]
pub fn diff_rgcn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    xs: [Var; 3],
    subgraphs: &RelationalSubgraphs,
    mask: &[bool],
    cfg: &DiffRgcnConfig,
    mut dropout_rng: Option<&mut StreamRng>,
    mut traces: Option<&mut [Vec<LayerTrace<T>>; 3]>,
) -> Result<[Var; 3]> {
    let (intra, inter) = subgraphs.edge_lists();
    let mut out = xs;
    for m in Modality::ALL {
        let trace = traces.as_deref_mut().map(|t| &mut t[m.index()]);
        out[m.index()] = modality_stack(
            tape,
            store,
            m,
            xs[m.index()],
            &intra,
            &inter,
            mask,
            cfg,
            dropout_rng.as_deref_mut(),
            trace,
        )?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, GradCheckOptions, TapeObjective};
    use crate::graph::build_subgraphs;
    use crate::rng;
    use proptest::prelude::*;

    fn cfg(hidden: usize, heads: usize) -> DiffRgcnConfig {
        DiffRgcnConfig {
            hidden,
            heads,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn head_store(d_in: usize, d_out: usize, c: &DiffRgcnConfig, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_head(&mut s, "h", d_in, d_out, true, c, &mut rng::stream(seed, "init", 0));
        s
    }

    fn edges_for(speakers: &[usize], mask: &[bool], w: usize) -> (Arc<EdgeList>, Arc<EdgeList>) {
        build_subgraphs(speakers, mask, 1, speakers.len(), w).edge_lists()
    }

    fn run_head(store: &ParamStore<f64>, x: &Tensor<f64>, edges: &Arc<EdgeList>, depth: usize, c: &DiffRgcnConfig) -> (Tensor<f64>, Tensor<f64>, f64) {
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let out = diff_attention_head(&mut tape, store, "h", h, edges, depth, c).unwrap();
        let lam = out.lambda_full.map(|l| tape.value(l).item()).unwrap_or(0.0);
        (tape.value(out.features).clone(), dense_alpha(&tape, out.alpha, edges), lam)
    }

    #[test]
    fn lambda_init_values() {
        assert_eq!(lambda_init(0), 0.2);
        assert!((lambda_init(3) - (0.8 - 0.6 * (-0.9f64).exp())).abs() < 1e-15);
        for d in 0..50 {
            assert!(lambda_init(d + 1) > lambda_init(d));
            assert!((0.2..0.8).contains(&lambda_init(d)));
        }
    }

    #[test]
    fn zero_lambda_vectors_give_init_value() {
        let c = cfg(8, 1);
        let mut s = head_store(4, 8, &c, 1);
        for n in ["left1", "right1", "left2", "right2"] {
            s.insert(format!("h.lambda.{n}"), Tensor::zeros(&[4]));
        }
        let x = Tensor::randn(&[1, 3, 4], 1.0, &mut rng::stream(1, "x", 0));
        let (intra, _) = edges_for(&[0, 1, 0], &[true; 3], 5);
        let (_, _, lam) = run_head(&s, &x, &intra, 0, &c);
        assert_eq!(lam, 0.2);
        assert_eq!(lambda_full(&s, "h", 0).unwrap(), 0.2);
    }

    #[test]
    fn single_node_scales_projection() {
        let c = cfg(6, 1);
        let s = head_store(5, 6, &c, 2);
        let x = Tensor::randn(&[1, 1, 5], 1.0, &mut rng::stream(2, "x", 0));
        let (intra, _) = edges_for(&[0], &[true], 5);
        let (h, alpha, lam) = run_head(&s, &x, &intra, 0, &c);
        assert!((alpha.item() - (1.0 - lam)).abs() < 1e-12);
        let w = s.get("h.w").unwrap();
        for j in 0..6 {
            let wh: f64 = (0..5).map(|p| x.data()[p] * w.get(&[p, j])).sum();
            assert!((h.data()[j] - (1.0 - lam) * wh).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_branches_collapse() {
        let c = cfg(8, 1);
        let mut s = head_store(4, 8, &c, 3);
        for side in ["left", "right"] {
            let p = s.get(&format!("h.pos.{side}")).unwrap().clone();
            s.insert(format!("h.neg.{side}"), p);
        }
        let p = s.get("h.rel.pos").unwrap().clone();
        s.insert("h.rel.neg", p);
        // make the halves of W identical so both branches see the same features
        let mut w = s.get("h.w").unwrap().clone();
        for r in 0..4 {
            for j in 0..4 {
                let v = w.get(&[r, j]);
                w.data_mut()[r * 8 + 4 + j] = v;
            }
        }
        s.insert("h.w", w);
        let x = Tensor::randn(&[1, 5, 4], 1.0, &mut rng::stream(3, "x", 0));
        let (_, inter) = edges_for(&[0, 1, 0, 1, 1], &[true; 5], 2);
        let (_, alpha, lam) = run_head(&s, &x, &inter, 1, &c);

        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let wh = nn::linear(&mut tape, &s, "h", h).unwrap();
        let half = tape.slice_last(wh, 0, 4).unwrap();
        let rel = tape.param(&s, "h.rel.embed").unwrap();
        let a_pos = branch_scores(&mut tape, &s, "h", "pos", half, Some(rel), &inter, 0.2).unwrap();
        let a_pos = dense_alpha(&tape, a_pos, &inter);
        for (a, p) in alpha.data().iter().zip(a_pos.data()) {
            assert!((a - (1.0 - lam) * p).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_window_aggregates_self_only() {
        let c = cfg(4, 1);
        let s = head_store(3, 4, &c, 4);
        let x = Tensor::randn(&[1, 4, 3], 1.0, &mut rng::stream(4, "x", 0));
        let (intra, _) = edges_for(&[0, 0, 1, 0], &[true; 4], 0);
        let (h, alpha, lam) = run_head(&s, &x, &intra, 0, &c);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 - lam } else { 0.0 };
                assert!((alpha.get(&[0, i, j]) - expect).abs() < 1e-12);
            }
        }
        let w = s.get("h.w").unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let wh: f64 = (0..3).map(|p| x.get(&[0, i, p]) * w.get(&[p, j])).sum();
                assert!((h.get(&[0, i, j]) - (1.0 - lam) * wh).abs() < 1e-12);
            }
        }
    }

    fn head_case() -> impl Strategy<Value = (Vec<usize>, Vec<bool>, usize, u64)> {
        (1usize..9, 0usize..5, any::<u64>()).prop_flat_map(|(l, w, seed)| {
            (
                proptest::collection::vec(0usize..3, l),
                proptest::collection::vec(proptest::bool::weighted(0.8), l),
                Just(w),
                Just(seed),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn row_sums_and_mask((spk, mask, w, seed) in head_case()) {
            let c = cfg(8, 1);
            let s: ParamStore<f32> = {
                let mut s = ParamStore::new();
                init_head(&mut s, "h", 5, 8, true, &c, &mut rng::stream(seed, "init", 0));
                s
            };
            let l = spk.len();
            let x = Tensor::<f32>::randn(&[1, l, 5], 1.0, &mut rng::stream(seed, "x", 0));
            let sub = build_subgraphs(&spk, &mask, 1, l, w);
            let (intra, inter) = sub.edge_lists();
            for (edges, adj) in [(&intra, &sub.adj_s), (&inter, &sub.adj_c)] {
                let mut tape = Tape::new();
                let h = tape.constant(x.clone());
                let out = diff_attention_head(&mut tape, &s, "h", h, edges, 0, &c).unwrap();
                let lam = tape.value(out.lambda_full.unwrap()).item();
                let alpha = dense_alpha(&tape, out.alpha, edges);
                for i in 0..l {
                    let row_sum: f32 = (0..l).map(|j| alpha.get(&[0, i, j])).sum();
                    if mask[i] {
                        prop_assert!((row_sum - (1.0 - lam)).abs() < 1e-5);
                    } else {
                        prop_assert_eq!(row_sum, 0.0);
                        prop_assert!((0..8).all(|d| tape.value(out.features).get(&[0, i, d]) == 0.0));
                    }
                    for j in 0..l {
                        if adj.get(0, i, j) == 0 {
                            prop_assert_eq!(alpha.get(&[0, i, j]), 0.0);
                        }
                    }
                }
            }
        }
    }

    fn stack_store(c: &DiffRgcnConfig, d_in: usize, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut r = rng::stream(seed, "init", 0);
        for m in Modality::ALL {
            for depth in 0..c.num_layers() {
                init_layer(&mut s, &layer_prefix(m, depth), if depth == 0 { d_in } else { c.hidden }, c, &mut r);
            }
        }
        s
    }

    #[test]
    fn layer_gradient_check() {
        let c = cfg(8, 2);
        let mut s = ParamStore::<f64>::new();
        init_layer(&mut s, "g", 6, &c, &mut rng::stream(5, "init", 0));
        let x = Tensor::randn(&[1, 3, 6], 1.0, &mut rng::stream(5, "x", 0));
        let (intra, _) = edges_for(&[0, 1, 0], &[true; 3], 5);
        let wts = Tensor::randn(&[1, 3, 8], 1.0, &mut rng::stream(5, "w", 0));
        let mut obj = TapeObjective(|tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let h = tape.constant(x.clone());
            let y = diff_rgcn_layer(tape, s, "g", h, &intra, &[true; 3], 0, &c, None, None)?;
            let w = tape.constant(wts.clone());
            let yw = tape.mul(y, w)?;
            Ok(tape.sum(yw))
        });
        let opts = GradCheckOptions { eps: 1e-6, tol: 1e-3, ..Default::default() };
        let report = finite_diff_check(&mut obj, &s, &opts).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn single_head_concat_is_identity() {
        let c = cfg(4, 1);
        let mut s = ParamStore::<f64>::new();
        init_layer(&mut s, "g", 4, &c, &mut rng::stream(6, "init", 0));
        let x = Tensor::randn(&[1, 2, 4], 1.0, &mut rng::stream(6, "x", 0));
        let (intra, _) = edges_for(&[0, 0], &[true; 2], 1);
        let mut tape = Tape::new();
        let h = tape.constant(x);
        let mut trace = Vec::new();
        diff_rgcn_layer(&mut tape, &s, "g", h, &intra, &[true; 2], 0, &c, None, Some(&mut trace)).unwrap();
        assert_eq!(trace[0].heads.len(), 1);
        assert_eq!(trace[0].lambda_full.len(), 2);
    }

    #[test]
    fn identity_output_layers_reduce_to_norm_of_head_plus_residual() {
        // with only self-loops, a plain output head with W = I is the identity
        let mut c = cfg(4, 1);
        c.kind = AttentionKind::Plain;
        let mut s = ParamStore::<f64>::new();
        init_layer(&mut s, "g", 4, &c, &mut rng::stream(7, "init", 0));
        let eye = Tensor::from_vec(&[4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect());
        s.insert("g.out.w", eye.clone());
        s.insert("g.fc.w", eye);
        s.insert("g.fc.b", Tensor::zeros(&[4]));
        let x = Tensor::randn(&[1, 3, 4], 1.0, &mut rng::stream(7, "x", 0));
        let (intra, _) = edges_for(&[0, 1, 2], &[true; 3], 0);
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let y = diff_rgcn_layer(&mut tape, &s, "g", h, &intra, &[true; 3], 0, &c, None, None).unwrap();
        let y = tape.value(y).clone();

        let mut t2 = Tape::new();
        let h = t2.constant(x);
        let head = diff_attention_head(&mut t2, &s, "g.head0", h, &intra, 0, &c).unwrap();
        let sum = t2.add(head.features, h).unwrap();
        let want = nn::layer_norm(&mut t2, &s, "g.ln", sum, 1e-5).unwrap();
        assert!(y.max_abs_diff(t2.value(want)) < 1e-12);
    }

    #[test]
    fn padded_rows_stay_zero_and_stack_gradient_check() {
        let c = DiffRgcnConfig {
            hidden: 4,
            heads: 2,
            rel_dim: 3,
            dropout: 0.0,
            ..Default::default()
        };
        let s = stack_store(&c, 4, 8);
        let mask = [true, true, true, false];
        let sub = build_subgraphs(&[0, 1, 0, 2], &mask, 1, 4, 5);
        let xs: Vec<Tensor<f64>> = (0..3)
            .map(|i| {
                let mut t = Tensor::randn(&[1, 4, 4], 1.0, &mut rng::stream(8, "x", i));
                t.data_mut()[12..].fill(0.0);
                t
            })
            .collect();
        let wts = Tensor::randn(&[1, 4, 4], 1.0, &mut rng::stream(8, "w", 0));
        let mut obj = TapeObjective(|tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let v = [tape.constant(xs[0].clone()), tape.constant(xs[1].clone()), tape.constant(xs[2].clone())];
            let g = diff_rgcn_forward(tape, s, v, &sub, &mask, &c, None, None)?;
            for gi in g {
                assert!(tape.value(gi).data()[12..].iter().all(|&x| x == 0.0));
            }
            let w = tape.constant(wts.clone());
            let a = tape.add(g[0], g[1])?;
            let a = tape.add(a, g[2])?;
            let aw = tape.mul(a, w)?;
            Ok(tape.sum(aw))
        });
        let opts = GradCheckOptions { eps: 1e-6, tol: 1e-3, max_elems_per_param: Some(6), ..Default::default() };
        let report = finite_diff_check(&mut obj, &s, &opts).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn modalities_are_independent() {
        let c = cfg(4, 1);
        let s = stack_store(&c, 4, 9);
        let sub = build_subgraphs(&[0, 1, 0], &[true; 3], 1, 3, 5);
        let xs: Vec<Tensor<f64>> = (0..3).map(|i| Tensor::randn(&[1, 3, 4], 1.0, &mut rng::stream(9, "x", i))).collect();
        let run = |s: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let v = [tape.constant(xs[0].clone()), tape.constant(xs[1].clone()), tape.constant(xs[2].clone())];
            let g = diff_rgcn_forward(&mut tape, s, v, &sub, &[true; 3], &c, None, None).unwrap();
            g.map(|gi| tape.value(gi).clone())
        };
        let base = run(&s);
        let mut s2 = s.clone();
        s2.get_mut("gnn.t.l0.head0.w").unwrap().data_mut()[0] += 0.5;
        let moved = run(&s2);
        assert!(moved[0].max_abs_diff(&base[0]) > 0.0);
        for i in 1..3 {
            assert!(moved[i].data().iter().zip(base[i].data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn plain_kind_has_no_differential_parameters() {
        let mut c = cfg(8, 2);
        c.kind = AttentionKind::Plain;
        let mut s = ParamStore::<f32>::new();
        init_params(&c, &mut s, &mut rng::stream(0, "init", 0));
        assert!(s.names().all(|n| !n.contains("lambda") && !n.contains("rel") && !n.contains(".neg.")));
        c.kind = AttentionKind::Differential;
        let mut s = ParamStore::<f32>::new();
        init_params(&c, &mut s, &mut rng::stream(0, "init", 0));
        assert!(s.contains("gnn.v.l1.head1.lambda.left2"));
        assert!(s.contains("gnn.a.l0.head0.rel.embed"));
        assert!(!s.contains("gnn.a.l0.out.rel.embed"));
        assert_eq!(s.get("gnn.t.l0.head0.lambda.left1").unwrap().numel(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(10, 3).validate().is_err());
        assert!(cfg(6, 2).validate().is_err());
        assert!(cfg(8, 2).validate().is_ok());
    }
}
