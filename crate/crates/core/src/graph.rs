//! Relative-relation message passing over k-nearest-neighbor graphs.
//!
//! A node's message from neighbor `j` is `W_a·x_j + W_r·(x_j − x_i)`; the
//! messages are pooled over the neighbors and passed through a ReLU. The
//! disentangled network runs this per frame over objects, pools each frame to
//! one vector, then runs it across frames.

use rand::Rng;
use serde::Serialize;

use crate::config::{Dims, GraphConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Pool, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Neighbor {
    pub index: usize,
    /// Squared Euclidean distance to the center.
    pub dist: f64,
}

/// Neighbor lists, one per center, indices into the rows the graph was
/// built over.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NeighborIndex {
    pub lists: Vec<Vec<Neighbor>>,
}

impl NeighborIndex {
    /// Neighbors per center; every list has the same length.
    pub fn k(&self) -> usize {
        self.lists.first().map_or(0, Vec::len)
    }

    fn shifted(mut self, by: usize) -> Self {
        self.lists.iter_mut().flatten().for_each(|n| n.index += by);
        self
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k nearest rows of `x` (`n×c`, row-major) for every row.
///
/// With `include_self` the center comes first, followed by the `k−1`
/// nearest other rows; ties go to the lower index. Also returns the smallest
/// gap between the last chosen and first rejected distance, which is how
/// close the selection is to changing.
pub fn knn_neighbors(x: &[f64], n: usize, c: usize, k: usize, include_self: bool) -> Result<(NeighborIndex, f64)> {
    if x.len() != n * c {
        return Err(Error::dim(format!("{} values do not form {n}x{c}", x.len())));
    }
    let pool = if include_self { n } else { n.saturating_sub(1) };
    if k == 0 || k > pool {
        return Err(Error::config(format!("k = {k} neighbors requested from {pool} candidates")));
    }
    let row = |i: usize| &x[i * c..(i + 1) * c];
    let mut margin = f64::INFINITY;
    let mut lists = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<Neighbor> = (0..n).filter(|&j| j != i).map(|j| Neighbor { index: j, dist: sq_dist(row(i), row(j)) }).collect();
        others.sort_by(|a, b| a.dist.total_cmp(&b.dist).then(a.index.cmp(&b.index)));
        let take = if include_self { k - 1 } else { k };
        if take > 0 && take < others.len() {
            margin = margin.min(others[take].dist - others[take - 1].dist);
        }
        let mut list = Vec::with_capacity(k);
        if include_self {
            list.push(Neighbor { index: i, dist: 0.0 });
        }
        list.extend_from_slice(&others[..take]);
        lists.push(list);
    }
    Ok((NeighborIndex { lists }, margin))
}

fn note_choice(tape: &mut Tape<'_>, nbrs: &NeighborIndex) {
    for n in nbrs.lists.iter().flatten() {
        tape.note_branch(n.index as u64);
    }
}

/// Builds the neighbor index over the current values of `x` and records how
/// near the selection is to a swap.
fn knn_on_tape(tape: &mut Tape<'_>, x: Var, k: usize) -> Result<NeighborIndex> {
    let (n, c) = tape.shape(x);
    let (nbrs, margin) = knn_neighbors(tape.value(x), n, c, k, true)?;
    tape.note_kink(margin);
    note_choice(tape, &nbrs);
    Ok(nbrs)
}

/// Pooled messages before the activation. Center `i` is row `i` of `x`.
pub fn relative_message_pre(
    tape: &mut Tape<'_>,
    x: Var,
    nbrs: &NeighborIndex,
    w_a: Option<Var>,
    w_r: Option<Var>,
    pool: Pool,
) -> Result<Var> {
    let (n, _) = tape.shape(x);
    if nbrs.lists.len() != n {
        return Err(Error::dim(format!("{} neighbor lists for {n} nodes", nbrs.lists.len())));
    }
    let k = nbrs.k();
    if nbrs.lists.iter().any(|l| l.len() != k) || k == 0 {
        return Err(Error::dim("neighbor lists must share one nonzero length"));
    }
    // W·(x_j − x_i) = W·x_j − W·x_i: every node is projected once and the
    // projections are gathered per edge.
    let nb_idx: Vec<usize> = nbrs.lists.iter().flatten().map(|nb| nb.index).collect();
    let absolute = match w_a {
        Some(w) => {
            let xa = tape.matmul_nt(x, w)?;
            Some(tape.gather_rows(xa, &nb_idx)?)
        }
        None => None,
    };
    let relative = match w_r {
        Some(w) => {
            let xr = tape.matmul_nt(x, w)?;
            let center_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
            let at_neighbor = tape.gather_rows(xr, &nb_idx)?;
            let at_center = tape.gather_rows(xr, &center_idx)?;
            Some(tape.sub(at_neighbor, at_center)?)
        }
        None => None,
    };
    let msg = match (absolute, relative) {
        (Some(a), Some(r)) => tape.add(a, r)?,
        (Some(m), None) | (None, Some(m)) => m,
        (None, None) => return Err(Error::config("relative and absolute relations cannot both be disabled")),
    };
    tape.reduce_groups(msg, k, pool)
}

pub fn relative_message(tape: &mut Tape<'_>, x: Var, nbrs: &NeighborIndex, w_a: Option<Var>, w_r: Option<Var>, pool: Pool) -> Result<Var> {
    let pre = relative_message_pre(tape, x, nbrs, w_a, w_r, pool)?;
    Ok(tape.relu(pre))
}

/// Neighbor lists built within each frame of `k` consecutive rows; indices
/// are global row numbers.
pub fn frame_neighbors(tape: &mut Tape<'_>, v: Var, k: usize, k_s: usize) -> Result<NeighborIndex> {
    let (n, c) = tape.shape(v);
    if k == 0 || n % k != 0 {
        return Err(Error::dim(format!("{n} nodes do not split into frames of {k}")));
    }
    let mut all = NeighborIndex::default();
    let mut margin = f64::INFINITY;
    for f in 0..n / k {
        let rows = &tape.value(v)[f * k * c..(f + 1) * k * c];
        let (nb, m) = knn_neighbors(rows, k, c, k_s, true)?;
        margin = margin.min(m);
        all.lists.extend(nb.shifted(f * k).lists);
    }
    tape.note_kink(margin);
    note_choice(tape, &all);
    Ok(all)
}

/// One spatial layer: messages within each frame of `k` objects.
pub fn spatial_layer(
    tape: &mut Tape<'_>,
    v: Var,
    k: usize,
    k_s: usize,
    w_a: Option<Var>,
    w_r: Option<Var>,
    pool: Pool,
) -> Result<(Var, NeighborIndex)> {
    let nbrs = frame_neighbors(tape, v, k, k_s)?;
    let out = relative_message(tape, v, &nbrs, w_a, w_r, pool)?;
    Ok((out, nbrs))
}

/// Pools the `k` objects of every frame into one row.
pub fn aggregate_frames(tape: &mut Tape<'_>, s: Var, k: usize, pool: Pool) -> Result<Var> {
    tape.reduce_groups(s, k, pool)
}

/// One temporal layer: messages across frame vectors.
pub fn temporal_layer(
    tape: &mut Tape<'_>,
    f: Var,
    k_t: usize,
    w_a: Option<Var>,
    w_r: Option<Var>,
    pool: Pool,
) -> Result<(Var, NeighborIndex)> {
    let nbrs = knn_on_tape(tape, f, k_t)?;
    let out = relative_message(tape, f, &nbrs, w_a, w_r, pool)?;
    Ok((out, nbrs))
}

#[derive(Debug, Clone)]
pub struct GraphOut {
    /// `TK×C` node features after the last spatial layer.
    pub spatial: Var,
    /// `T×C` frame features after the last temporal layer.
    pub temporal: Var,
    /// Neighbor lists of every spatial (or joint) layer, global row indices.
    pub spatial_neighbors: Vec<NeighborIndex>,
    pub temporal_neighbors: Vec<NeighborIndex>,
}

fn layer_weights<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    prefix: &str,
    kind: &str,
    layer: usize,
    cfg: &GraphConfig,
) -> Result<(Option<Var>, Option<Var>)> {
    let mut fetch = |on: bool, w: &str| -> Result<Option<Var>> {
        if !on {
            return Ok(None);
        }
        let name = format!("{prefix}.{kind}.layer{layer}.{w}");
        tape.param(store, &name).map(Some).map_err(|_| Error::config(format!("graph parameter `{name}` missing")))
    };
    let w_a = fetch(cfg.absolute_enabled, "w_a")?;
    let w_r = fetch(cfg.relative_enabled, "w_r")?;
    Ok((w_a, w_r))
}

/// Stacked graph reasoning over node features `v` (`TK×C_o`). Neighbor lists
/// are rebuilt on every layer's input.
pub fn run_graphs<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    prefix: &str,
    v: Var,
    t: usize,
    k: usize,
    cfg: &GraphConfig,
) -> Result<GraphOut> {
    cfg.validate(t, k)?;
    let (n, _) = tape.shape(v);
    if n != t * k {
        return Err(Error::dim(format!("{n} nodes for T={t}, K={k}")));
    }
    let mut spatial_neighbors = Vec::with_capacity(cfg.layers);
    let mut temporal_neighbors = Vec::with_capacity(cfg.layers);
    let mut s = v;
    if cfg.disentangled {
        let k_s = cfg.k_spatial(k);
        for h in 0..cfg.layers {
            let (w_a, w_r) = layer_weights(tape, store, prefix, "spatial", h, cfg)?;
            let (out, nbrs) = spatial_layer(tape, s, k, k_s, w_a, w_r, cfg.pooling_spatial)?;
            s = out;
            spatial_neighbors.push(nbrs);
        }
        let mut f = aggregate_frames(tape, s, k, cfg.pooling_aggregation)?;
        let k_t = cfg.k_temporal(t);
        for h in 0..cfg.layers {
            let (w_a, w_r) = layer_weights(tape, store, prefix, "temporal", h, cfg)?;
            let (out, nbrs) = temporal_layer(tape, f, k_t, w_a, w_r, cfg.pooling_temporal)?;
            f = out;
            temporal_neighbors.push(nbrs);
        }
        Ok(GraphOut { spatial: s, temporal: f, spatial_neighbors, temporal_neighbors })
    } else {
        let k_h = cfg.k_holistic(t, k);
        for h in 0..cfg.layers {
            let (w_a, w_r) = layer_weights(tape, store, prefix, "joint", h, cfg)?;
            let nbrs = knn_on_tape(tape, s, k_h)?;
            s = relative_message(tape, s, &nbrs, w_a, w_r, cfg.pooling_spatial)?;
            spatial_neighbors.push(nbrs);
        }
        let f = aggregate_frames(tape, s, k, cfg.pooling_aggregation)?;
        Ok(GraphOut { spatial: s, temporal: f, spatial_neighbors, temporal_neighbors })
    }
}

/// Registers `W_a`/`W_r` for every enabled relation and layer.
pub fn init_graph<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &Dims, cfg: &GraphConfig, rng: &mut R) -> Result<()> {
    let kinds: &[&str] = if cfg.disentangled { &["spatial", "temporal"] } else { &["joint"] };
    for kind in kinds {
        for h in 0..cfg.layers {
            let inp = if h == 0 && *kind != "temporal" { dims.c_o } else { dims.c };
            for (on, w) in [(cfg.absolute_enabled, "w_a"), (cfg.relative_enabled, "w_r")] {
                if on {
                    store.init_affine(&format!("{prefix}.{kind}.layer{h}.{w}"), dims.c, inp, rng)?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(n: &NeighborIndex, i: usize) -> Vec<usize> {
        n.lists[i].iter().map(|x| x.index).collect()
    }

    #[test]
    fn complete_graph_when_k_equals_n() {
        let (n, _) = knn_neighbors(&[0.0, 5.0, 2.0], 3, 1, 3, true).unwrap();
        for i in 0..3 {
            let mut got = idx(&n, i);
            got.sort();
            assert_eq!(got, vec![0, 1, 2]);
        }
    }

    #[test]
    fn line_points_pick_nearest() {
        let (n, _) = knn_neighbors(&[0.0, 1.0, 10.0], 3, 1, 2, true).unwrap();
        assert_eq!(idx(&n, 1), vec![1, 0]);
        assert_eq!(n.lists[1][1].dist, 1.0);
        assert_eq!(idx(&n, 2), vec![2, 1]);
    }

    #[test]
    fn duplicate_points_break_ties_low() {
        let x = [3.0, 3.0, 3.0, 0.0];
        let (n, margin) = knn_neighbors(&x, 4, 1, 2, true).unwrap();
        assert_eq!(idx(&n, 2), vec![2, 0]);
        assert_eq!(idx(&n, 0), vec![0, 1]);
        assert_eq!(margin, 0.0);
        let (again, _) = knn_neighbors(&x, 4, 1, 2, true).unwrap();
        assert_eq!(n, again);
    }

    #[test]
    fn too_many_neighbors_is_config_error() {
        assert!(matches!(knn_neighbors(&[0.0, 1.0], 2, 1, 3, true), Err(Error::Config(_))));
        assert!(matches!(knn_neighbors(&[0.0, 1.0], 2, 1, 2, false), Err(Error::Config(_))));
    }

    #[test]
    fn relative_term_vanishes_for_identical_neighbors() {
        let mut t = Tape::new();
        let x = t.matrix(3, 2, vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        let w = t.matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (nb, _) = knn_neighbors(t.value(x), 3, 2, 3, true).unwrap();
        let pre = relative_message_pre(&mut t, x, &nb, None, Some(w), Pool::Sum).unwrap();
        assert!(t.value(pre).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_neighbor_relative_message_is_antisymmetric() {
        let mut t = Tape::new();
        let x = t.matrix(2, 2, vec![0.3, -0.8, 1.7, 0.25]).unwrap();
        let w = t.matrix(2, 2, vec![0.9, -0.4, 0.1, 2.2]).unwrap();
        let nb = NeighborIndex { lists: vec![vec![Neighbor { index: 1, dist: 0.0 }], vec![Neighbor { index: 0, dist: 0.0 }]] };
        let pre = relative_message_pre(&mut t, x, &nb, None, Some(w), Pool::Max).unwrap();
        let v = t.value(pre);
        assert_eq!(v[0], -v[2]);
        assert_eq!(v[1], -v[3]);
        let d = [1.7 - 0.3, 0.25 - -0.8];
        assert!((v[0] - (0.9 * d[0] + -0.4 * d[1])).abs() < 1e-15);
    }

    #[test]
    fn line_graph_with_identity_weights_and_max() {
        // Nodes 0, 1, 3 on a line, one feature; neighbors with k=2:
        // 0 -> {0, 1}, 1 -> {1, 0}, 3 -> {3, 1}.
        let mut t = Tape::new();
        let x = t.matrix(3, 1, vec![0.0, 1.0, 3.0]).unwrap();
        let eye = t.matrix(1, 1, vec![1.0]).unwrap();
        let (nb, _) = knn_neighbors(t.value(x), 3, 1, 2, true).unwrap();
        let out = relative_message(&mut t, x, &nb, Some(eye), Some(eye), Pool::Max).unwrap();
        // message(i, j) = x_j + (x_j − x_i)
        let want = [f64::max(0.0, 1.0 + 1.0), f64::max(1.0, 0.0 - 1.0), f64::max(3.0, 1.0 - 2.0)];
        assert_eq!(t.value(out), &want);
    }

    #[test]
    fn both_relations_disabled_is_config_error() {
        let mut t = Tape::new();
        let x = t.matrix(1, 1, vec![1.0]).unwrap();
        let (nb, _) = knn_neighbors(t.value(x), 1, 1, 1, true).unwrap();
        assert!(matches!(relative_message(&mut t, x, &nb, None, None, Pool::Max), Err(Error::Config(_))));
    }

    #[test]
    fn single_frame_spatial_equals_plain_message() {
        let mut t = Tape::new();
        let x = t.matrix(3, 2, vec![0.1, 0.2, -0.4, 0.9, 1.5, -0.3]).unwrap();
        let wa = t.matrix(2, 2, vec![0.5, 0.1, -0.2, 0.3]).unwrap();
        let wr = t.matrix(2, 2, vec![1.0, -1.0, 0.4, 0.6]).unwrap();
        let (s, _) = spatial_layer(&mut t, x, 3, 2, Some(wa), Some(wr), Pool::Max).unwrap();
        let (nb, _) = knn_neighbors(t.value(x), 3, 2, 2, true).unwrap();
        let m = relative_message(&mut t, x, &nb, Some(wa), Some(wr), Pool::Max).unwrap();
        assert_eq!(t.value(s), t.value(m));
    }

    #[test]
    fn identical_frames_give_identical_rows() {
        let frame = [0.1, 0.2, -0.4, 0.9];
        let mut t = Tape::new();
        let x = t.matrix(4, 2, [frame, frame].concat()).unwrap();
        let w = t.matrix(2, 2, vec![0.5, 0.1, -0.2, 0.3]).unwrap();
        let (s, nb) = spatial_layer(&mut t, x, 2, 2, Some(w), Some(w), Pool::Sum).unwrap();
        assert_eq!(&t.value(s)[..4], &t.value(s)[4..]);
        assert!(nb.lists[2..].iter().flatten().all(|n| n.index >= 2));
    }

    #[test]
    fn mean_aggregation_of_one_frame() {
        let mut t = Tape::new();
        let s = t.matrix(2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let f = aggregate_frames(&mut t, s, 2, Pool::Mean).unwrap();
        assert_eq!(t.value(f), &[3.0, 5.0]);
        let same = aggregate_frames(&mut t, s, 1, Pool::Max).unwrap();
        assert_eq!(t.value(same), t.value(s));
    }

    #[test]
    fn single_frame_temporal_is_absolute_self_loop() {
        let mut t = Tape::new();
        let f = t.matrix(1, 2, vec![0.7, -0.2]).unwrap();
        let wa = t.matrix(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let wr = t.matrix(2, 2, vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        let nb = knn_on_tape(&mut t, f, 1).unwrap();
        let pre = relative_message_pre(&mut t, f, &nb, Some(wa), Some(wr), Pool::Sum).unwrap();
        assert_eq!(t.value(pre), &[0.7 + 2.0 * -0.2, -3.0 * 0.7 + 0.5 * -0.2]);
    }

    #[test]
    fn three_frame_chain_matches_hand_sum() {
        // f = 0, 1, 3 with k_t = 2, sum pooling, identity weights.
        let mut t = Tape::new();
        let f = t.matrix(3, 1, vec![0.0, 1.0, 3.0]).unwrap();
        let eye = t.matrix(1, 1, vec![1.0]).unwrap();
        let (out, _) = temporal_layer(&mut t, f, 2, Some(eye), Some(eye), Pool::Sum).unwrap();
        let want = [0.0 + (1.0 + 1.0), 1.0 + (0.0 - 1.0), 3.0 + (1.0 - 2.0)];
        assert_eq!(t.value(out), &want);
    }
}
