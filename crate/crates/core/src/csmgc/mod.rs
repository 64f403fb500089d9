//! Cross-stage multi-graph consensus.
//!
//! Edge rows are laid out anchor-major: row `i * k + r` holds the edge from
//! anchor `i` to its rank-`r` neighbor.

use crate::blocks::{Init, Linear, ParamBuilder, SeFuse, RESIDUAL_INIT};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Matrix, Scalar, Var};

/// Nearest neighbors of every row, closest first.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    k: usize,
    neighbors: Vec<usize>,
    sq_dists: Vec<f64>,
    /// Smallest squared-distance gap between consecutive ranks, including
    /// the first excluded candidate.
    margin: f64,
}

impl SparseGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, anchor: usize) -> &[usize] {
        &self.neighbors[anchor * self.k..(anchor + 1) * self.k]
    }

    /// Affinity (negative squared distance) of each neighbor of `anchor`.
    pub fn affinities(&self, anchor: usize) -> impl Iterator<Item = f64> + '_ {
        self.sq_dists[anchor * self.k..(anchor + 1) * self.k].iter().map(|d| -d)
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }
}

/// `k` nearest rows of `z` per row by Euclidean distance, self excluded,
/// ordered by increasing distance with ties to the lower index.
pub fn build_knn_graph<T: Scalar>(z: &Matrix<T>, k: usize) -> Result<SparseGraph> {
    let n = z.rows();
    if k == 0 || k >= n {
        return Err(Error::Config(format!("k-NN needs 1 <= k < N, got k={k}, N={n}")));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| z.row(i).iter().map(|v| v.f64()).collect()).collect();
    let mut neighbors = Vec::with_capacity(n * k);
    let mut sq_dists = Vec::with_capacity(n * k);
    let mut margin = f64::INFINITY;
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, a) in rows.iter().enumerate() {
        cand.clear();
        cand.extend(rows.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, b)| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            (d, j)
        }));
        let by = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
        let keep = (k + 1).min(cand.len());
        if keep < cand.len() {
            cand.select_nth_unstable_by(keep - 1, by);
        }
        cand[..keep].sort_by(by);
        for w in cand[..keep].windows(2) {
            margin = margin.min(w[1].0 - w[0].0);
        }
        for &(d, j) in &cand[..k] {
            neighbors.push(j);
            sq_dists.push(d);
        }
    }
    Ok(SparseGraph {
        k,
        neighbors,
        sq_dists,
        margin,
    })
}

/// `N*k x 2d` edge features `[z_i, z_j - z_i]`.
pub fn edge_features<T: Scalar>(g: &mut Graph<'_, T>, z: Var, graph: &SparseGraph) -> Result<Var> {
    let n = g.value(z).rows();
    if graph.len() != n {
        return Err(Error::Shape {
            op: "edge_features",
            detail: format!("graph over {} nodes, features have {n} rows", graph.len()),
        });
    }
    let anchors: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, graph.k)).collect();
    let zi = g.gather_rows(z, &anchors)?;
    let zj = g.gather_rows(z, &graph.neighbors)?;
    let diff = g.sub(zj, zi)?;
    g.concat_cols(&[zi, diff])
}

/// Builds the graph on the current value of `z`, records the selection
/// margin as a kink, and returns `(graph, edge features)`.
pub fn graph_edges<T: Scalar>(g: &mut Graph<'_, T>, z: Var, k: usize) -> Result<(SparseGraph, Var)> {
    let graph = build_knn_graph(g.value(z), k)?;
    g.note_kink(graph.margin);
    g.note_branch(&graph.neighbors);
    let edges = edge_features(g, z, &graph)?;
    Ok((graph, edges))
}

/// Rank-aligned channel concatenation of edge features from graphs over the
/// same anchors with the same k.
pub fn concat_graphs<T: Scalar>(g: &mut Graph<'_, T>, graphs: &[(&SparseGraph, Var)]) -> Result<Var> {
    let Some(&(first, _)) = graphs.first() else {
        return Err(Error::TooFewRows {
            op: "concat_graphs",
            need: 1,
            got: 0,
        });
    };
    if graphs.iter().any(|(s, _)| s.k != first.k || s.len() != first.len()) {
        return Err(Error::Shape {
            op: "concat_graphs",
            detail: "graphs differ in N or k".into(),
        });
    }
    let edges: Vec<Var> = graphs.iter().map(|&(_, e)| e).collect();
    g.concat_cols(&edges)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsmgcShape {
    pub d: usize,
    pub k: usize,
    pub ring: usize,
    /// Number of Z3 maps fused by the SE block (stages 1..M-2).
    pub history: usize,
}

#[derive(Clone, Debug)]
pub struct Csmgc {
    shape: CsmgcShape,
    fuse: SeFuse,
    align: Linear,
    rings: Vec<Linear>,
    combine: Linear,
    mlp1: Linear,
    mlp2: Linear,
}

/// Previous-stage taps.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatureBundle {
    pub z1: Var,
    pub z2: Var,
    pub z3: Var,
}

impl Csmgc {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, shape: CsmgcShape) -> Result<Self> {
        let CsmgcShape { d, k, ring, history } = shape;
        if ring == 0 || !k.is_multiple_of(ring) {
            return Err(Error::Config(format!("ring size {ring} must divide k = {k}")));
        }
        if history == 0 {
            return Err(Error::Config("cross-stage fusion needs at least three stages".into()));
        }
        let n_rings = k / ring;
        let mut rs = b.scope("rings");
        let rings = (0..n_rings)
            .map(|r| rs.linear(&r.to_string(), ring * d, d, Init::FanIn))
            .collect::<Result<_>>()?;
        Ok(Self {
            shape,
            fuse: SeFuse::new(&mut b.scope("fuse"), d, history)?,
            align: b.linear("align", 8 * d, d, Init::FanIn)?,
            rings,
            combine: b.linear("combine", n_rings * d, d, Init::FanIn)?,
            mlp1: b.linear("mlp1", d, d, Init::FanIn)?,
            mlp2: b.linear("mlp2", d, d, Init::Scaled(RESIDUAL_INIT))?,
        })
    }

    pub fn shape(&self) -> CsmgcShape {
        self.shape
    }

    pub fn align_linear(&self) -> Linear {
        self.align
    }

    pub fn ring_linears(&self) -> &[Linear] {
        &self.rings
    }

    pub fn combine_linear(&self) -> Linear {
        self.combine
    }

    /// SE fusion of the Z3 history.
    pub fn cross_stage_fuse<T: Scalar>(&self, g: &mut Graph<'_, T>, history: &[Var]) -> Result<Var> {
        if history.is_empty() {
            return Err(Error::Config("cross-stage fusion needs at least three stages".into()));
        }
        self.fuse.forward(g, history)
    }

    /// Per-edge `relu(e W + b)`, `8d -> d`.
    pub fn align_features<T: Scalar>(&self, g: &mut Graph<'_, T>, fused: Var) -> Result<Var> {
        let h = self.align.forward(g, fused)?;
        g.relu(h)
    }

    /// Per-ring kernels over affinity-ordered neighbors, combined to `N x d`.
    pub fn aggregate_rings<T: Scalar>(&self, g: &mut Graph<'_, T>, edges: Var) -> Result<Var> {
        let CsmgcShape { d, k, ring, .. } = self.shape;
        let (rows, cols) = g.value(edges).shape();
        if cols != d || rows % k != 0 {
            return Err(Error::Shape {
                op: "annular_conv",
                detail: format!("{rows} x {cols} edges for k = {k}, d = {d}"),
            });
        }
        let per_anchor = g.reshape(edges, rows / k, k * d)?;
        let mut outs = Vec::with_capacity(self.rings.len());
        for (r, lin) in self.rings.iter().enumerate() {
            let part = g.slice_cols(per_anchor, r * ring * d, (r + 1) * ring * d)?;
            outs.push(lin.forward(g, part)?);
        }
        let cat = g.concat_cols(&outs)?;
        self.combine.forward(g, cat)
    }

    /// Ring aggregation followed by the per-row MLP.
    pub fn annular_conv<T: Scalar>(&self, g: &mut Graph<'_, T>, edges: Var) -> Result<Var> {
        let h = self.aggregate_rings(g, edges)?;
        let m = self.mlp1.forward(g, h)?;
        let m = g.relu(m)?;
        let m = self.mlp2.forward(g, m)?;
        g.add(h, m)
    }

    /// Full module: fuse history, four graphs, concat, align, annular conv.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        bundle: StageFeatureBundle,
        history: &[Var],
    ) -> Result<Var> {
        let k = self.shape.k;
        let z = self.cross_stage_fuse(g, history)?;
        let (g0, e0) = graph_edges(g, z, k)?;
        let (g1, e1) = graph_edges(g, bundle.z1, k)?;
        let (g2, e2) = graph_edges(g, bundle.z2, k)?;
        let (g3, e3) = graph_edges(g, bundle.z3, k)?;
        let fused = concat_graphs(g, &[(&g0, e0), (&g1, e1), (&g2, e2), (&g3, e3)])?;
        let aligned = self.align_features(g, fused)?;
        self.annular_conv(g, aligned)
    }
}
