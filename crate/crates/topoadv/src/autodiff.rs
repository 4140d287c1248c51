//! Minimal reverse-mode tape over dense matrices.
//!
//! The op set is exactly what the training losses need: affine layers and
//! rectifiers, the classification/distillation losses, and the neighbor-graph
//! chain (cosine distances -> column-normalized graph -> Bernoulli-KL
//! alignment). Each op caches the forward intermediates its backward pass
//! needs, and every backward formula is hand-derived and checked against the
//! central-difference oracle in the gradient test suites.
//!
//! Nodes only reference earlier nodes, so a reverse index sweep is a valid
//! topological order for backpropagation. All loops run in a fixed order;
//! given identical inputs the gradients are bitwise reproducible.
//!
//! Stop-gradients are expressed by *values*: passing a plain `Matrix` (for
//! example [`GraphTarget::Constant`]) detaches that side of a loss, while
//! passing a tape [`Var`] keeps it live. This is how "the topology loss
//! updates only the adversarial model" is enforced structurally rather than
//! by masking gradients after the fact.

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Matrix};
use crate::topology::{self, clamp_prob};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// The target ("P") side of a graph or distance alignment loss.
pub enum GraphTarget {
    /// Detached: gradients stop here.
    Constant(Matrix),
    /// Live: gradients flow into the features that produced it.
    Var(Var),
}

enum Op {
    Leaf,
    Add(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    /// x: n x m plus a 1 x m bias row broadcast over rows.
    AddBias(usize, usize),
    Relu(usize),
    /// Mean cross-entropy of `softmax(logits)` against integer labels.
    CrossEntropyMean {
        logits: usize,
        labels: Vec<usize>,
        probs: Matrix,
    },
    /// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)).
    /// Differentiates through both sides.
    KlMean {
        p_logits: usize,
        q_logits: usize,
        p: Matrix,
        q: Matrix,
        row_kl: Vec<f64>,
    },
    /// Mean over rows of the squared L2 distance between matching rows.
    SqDistRowMean { a: usize, b: usize },
    /// Mean over rows of (max logit over wrong classes - true-class logit).
    MarginMean {
        logits: usize,
        labels: Vec<usize>,
        rivals: Vec<usize>,
    },
    /// Pairwise cosine distances of feature rows.
    CosineDistances {
        f: usize,
        norms: Vec<f64>,
        sims: Matrix,
    },
    /// Distance matrix -> column-normalized neighbor graph.
    NeighborColumns {
        d: usize,
        rho_argmin: Vec<usize>,
        col_sums: Vec<f64>,
    },
    /// Topology-preservation loss against a target graph.
    GraphAlign { p: GraphTargetSlot, q: usize },
    /// Absolute-relation loss against a target distance matrix.
    DistAlign { target: GraphTargetSlot, d: usize },
}

enum GraphTargetSlot {
    Constant(Matrix),
    Var(usize),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of one scalar with respect to every tape node.
pub struct Grads {
    by_node: Vec<Matrix>,
}

impl Grads {
    /// Gradient with respect to the given node (zero matrix if the loss does
    /// not depend on it).
    pub fn wrt(&self, v: Var) -> &Matrix {
        &self.by_node[v.0]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// New input node. Parameters, batch inputs, and detached constants all
    /// enter the tape this way; callers read gradients only for the leaves
    /// they own.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(am.ncols(), bm.nrows(), "matmul inner dims");
        let value = am.dot(bm);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xm, bm) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        assert_eq!(bm.nrows(), 1, "bias must be a single row");
        assert_eq!(xm.ncols(), bm.ncols(), "bias width");
        let value = xm + &bm.row(0);
        self.push(value, Op::AddBias(x.0, bias.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x.0))
    }

    /// Mean cross-entropy against integer labels, computed via log-sum-exp.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lm = &self.nodes[logits.0].value;
        let n = lm.nrows();
        assert_eq!(labels.len(), n, "one label per row");
        assert!(labels.iter().all(|&y| y < lm.ncols()), "label out of range");
        let probs = softmax_rows(lm);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lm.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total -= row[y] - lse;
        }
        let value = Matrix::from_elem((1, 1), total / n as f64);
        self.push(
            value,
            Op::CrossEntropyMean { logits: logits.0, labels: labels.to_vec(), probs },
        )
    }

    /// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)).
    pub fn kl_mean(&mut self, p_logits: Var, q_logits: Var) -> Var {
        let (pm, qm) = (&self.nodes[p_logits.0].value, &self.nodes[q_logits.0].value);
        assert_eq!(pm.raw_dim(), qm.raw_dim(), "kl_mean shapes");
        let n = pm.nrows();
        let p = softmax_rows(pm);
        let q = softmax_rows(qm);
        let mut row_kl = vec![0.0; n];
        let mut total = 0.0;
        for i in 0..n {
            let mut kl = 0.0;
            for c in 0..pm.ncols() {
                // p > 0 always holds for finite logits; guard the limit anyway.
                if p[[i, c]] > 0.0 {
                    kl += p[[i, c]] * (p[[i, c]].ln() - q[[i, c]].ln());
                }
            }
            row_kl[i] = kl;
            total += kl;
        }
        let value = Matrix::from_elem((1, 1), total / n as f64);
        self.push(
            value,
            Op::KlMean { p_logits: p_logits.0, q_logits: q_logits.0, p, q, row_kl },
        )
    }

    /// Mean over rows of the squared L2 distance between matching rows of two
    /// equally-shaped matrices.
    pub fn sq_dist_row_mean(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(am.raw_dim(), bm.raw_dim(), "sq_dist_row_mean shapes");
        let diff = am - bm;
        let total: f64 = diff.iter().map(|&v| v * v).sum();
        let value = Matrix::from_elem((1, 1), total / am.nrows() as f64);
        self.push(value, Op::SqDistRowMean { a: a.0, b: b.0 })
    }

    /// Mean over rows of (best wrong-class logit - true-class logit).
    pub fn margin_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lm = &self.nodes[logits.0].value;
        let c_count = lm.ncols();
        if c_count < 2 {
            return Err(Error::config("margin objective needs at least 2 classes"));
        }
        let n = lm.nrows();
        assert_eq!(labels.len(), n, "one label per row");
        let mut rivals = vec![0usize; n];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < c_count, "label out of range");
            let mut best = f64::NEG_INFINITY;
            let mut best_c = usize::MAX;
            for c in 0..c_count {
                if c != y && lm[[i, c]] > best {
                    best = lm[[i, c]];
                    best_c = c;
                }
            }
            rivals[i] = best_c;
            total += best - lm[[i, y]];
        }
        let value = Matrix::from_elem((1, 1), total / n as f64);
        Ok(self.push(
            value,
            Op::MarginMean { logits: logits.0, labels: labels.to_vec(), rivals },
        ))
    }

    /// Pairwise cosine distances of feature rows (see
    /// [`topology::cosine_distances`] for the value contract).
    pub fn cosine_distances(&mut self, f: Var) -> Result<Var> {
        let fm = &self.nodes[f.0].value;
        let d = topology::cosine_distances(fm)?;
        let norms: Vec<f64> = fm.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        // sims[i][j] = 1 - d[i][j]: recover the clamped similarities.
        let sims = d.mapv(|v| 1.0 - v);
        Ok(self.push(d, Op::CosineDistances { f: f.0, norms, sims }))
    }

    /// Column-normalized neighbor graph of a distance matrix.
    pub fn neighbor_columns(&mut self, d: Var) -> Result<Var> {
        let dm = &self.nodes[d.0].value;
        let parts = topology::graph_from_distances(dm)?;
        Ok(self.push(
            parts.q,
            Op::NeighborColumns {
                d: d.0,
                rho_argmin: parts.rho_argmin,
                col_sums: parts.col_sums,
            },
        ))
    }

    /// Topology-preservation loss of graph `q` against target graph `p`.
    ///
    /// With a constant target this is the standard stop-gradient form; with a
    /// live target, gradients also flow into the features behind `p` (the
    /// both-models-coupled ablation).
    pub fn graph_align(&mut self, p: GraphTarget, q: Var) -> Result<Var> {
        let qm = &self.nodes[q.0].value;
        let pm = match &p {
            GraphTarget::Constant(m) => m,
            GraphTarget::Var(v) => &self.nodes[v.0].value,
        };
        let loss = topology::topology_loss(pm, qm)?;
        let slot = match p {
            GraphTarget::Constant(m) => GraphTargetSlot::Constant(m),
            GraphTarget::Var(v) => GraphTargetSlot::Var(v.0),
        };
        Ok(self.push(Matrix::from_elem((1, 1), loss), Op::GraphAlign { p: slot, q: q.0 }))
    }

    /// Absolute-relation loss of distance matrix `d` against a target.
    pub fn dist_align(&mut self, target: GraphTarget, d: Var) -> Result<Var> {
        let dm = &self.nodes[d.0].value;
        let tm = match &target {
            GraphTarget::Constant(m) => m,
            GraphTarget::Var(v) => &self.nodes[v.0].value,
        };
        let loss = topology::absolute_relation_loss(tm, dm)?;
        let slot = match target {
            GraphTarget::Constant(m) => GraphTargetSlot::Constant(m),
            GraphTarget::Var(v) => GraphTargetSlot::Var(v.0),
        };
        Ok(self.push(Matrix::from_elem((1, 1), loss), Op::DistAlign { target: slot, d: d.0 }))
    }

    /// Backpropagate from a scalar loss node, returning gradients for every
    /// node. Errors if the loss value is not finite.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let loss_value = self.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::non_finite(format!("loss value {loss_value}")));
        }
        let mut g: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.raw_dim()))
            .collect();
        g[loss.0][[0, 0]] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let gout = g[idx].clone();
                    g[*a] += &gout;
                    g[*b] += &gout;
                }
                Op::Scale(a, c) => {
                    let gout = &g[idx] * *c;
                    g[*a] += &gout;
                }
                Op::MatMul(a, b) => {
                    let gout = g[idx].clone();
                    let (am, bm) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    g[*a] += &gout.dot(&bm.t());
                    g[*b] += &am.t().dot(&gout);
                }
                Op::AddBias(x, bias) => {
                    let gout = g[idx].clone();
                    let col_sums = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    g[*x] += &gout;
                    g[*bias] += &col_sums;
                }
                Op::Relu(x) => {
                    let mask = self.nodes[*x].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let gx = &g[idx] * &mask;
                    g[*x] += &gx;
                }
                Op::CrossEntropyMean { logits, labels, probs } => {
                    let gout = g[idx][[0, 0]];
                    let n = labels.len() as f64;
                    let gl = &mut g[*logits];
                    for (i, &y) in labels.iter().enumerate() {
                        for c in 0..probs.ncols() {
                            let indicator = if c == y { 1.0 } else { 0.0 };
                            gl[[i, c]] += gout * (probs[[i, c]] - indicator) / n;
                        }
                    }
                }
                Op::KlMean { p_logits, q_logits, p, q, row_kl } => {
                    let gout = g[idx][[0, 0]];
                    let n = p.nrows() as f64;
                    for i in 0..p.nrows() {
                        for c in 0..p.ncols() {
                            let (pv, qv) = (p[[i, c]], q[[i, c]]);
                            g[*q_logits][[i, c]] += gout * (qv - pv) / n;
                            // d/d p_logit of sum p (lp - lq): p ((lp - lq) - KL_row).
                            let lp_lq = if pv > 0.0 { pv.ln() - qv.ln() } else { 0.0 };
                            g[*p_logits][[i, c]] += gout * pv * (lp_lq - row_kl[i]) / n;
                        }
                    }
                }
                Op::SqDistRowMean { a, b } => {
                    let gout = g[idx][[0, 0]];
                    let n = self.nodes[*a].value.nrows() as f64;
                    let diff = &self.nodes[*a].value - &self.nodes[*b].value;
                    let ga = diff.mapv(|v| gout * 2.0 * v / n);
                    g[*a] += &ga;
                    g[*b] -= &ga;
                }
                Op::MarginMean { logits, labels, rivals } => {
                    let gout = g[idx][[0, 0]];
                    let n = labels.len() as f64;
                    let gl = &mut g[*logits];
                    for i in 0..labels.len() {
                        gl[[i, rivals[i]]] += gout / n;
                        gl[[i, labels[i]]] -= gout / n;
                    }
                }
                Op::CosineDistances { f, norms, sims } => {
                    let gout = &g[idx];
                    let fm = &self.nodes[*f].value;
                    let n = fm.nrows();
                    let mut gf = Matrix::zeros(fm.raw_dim());
                    // d_ij = 1 - s_ij with s_ij = <f_i,f_j>/(r_i r_j):
                    // ds/df_i = f_j/(r_i r_j) - s_ij f_i / r_i^2. The upstream
                    // entries (i,j) and (j,i) share one similarity, so row i
                    // collects their combined weight here and row j collects
                    // it on its own pass. Where the similarity sits clamped at
                    // +-1 the expression is ~0, so no clamp mask is needed.
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let coeff = gout[[i, j]] + gout[[j, i]];
                            if coeff == 0.0 {
                                continue;
                            }
                            let s = sims[[i, j]];
                            for c in 0..fm.ncols() {
                                let ds = fm[[j, c]] / (norms[i] * norms[j])
                                    - s * fm[[i, c]] / (norms[i] * norms[i]);
                                gf[[i, c]] -= coeff * ds;
                            }
                        }
                    }
                    g[*f] += &gf;
                }
                Op::NeighborColumns { d, rho_argmin, col_sums } => {
                    let q = &self.nodes[idx].value;
                    let gq = &g[idx];
                    let n = q.nrows();
                    let mut gd = Matrix::zeros((n, n));
                    for j in 0..n {
                        let s = col_sums[j];
                        let mut inner = 0.0;
                        for i in 0..n {
                            if i != j {
                                inner += gq[[i, j]] * q[[i, j]];
                            }
                        }
                        let mut d_rho = 0.0;
                        for i in 0..n {
                            if i != j {
                                // numerator N_ij = 2 - d_ij + rho_j.
                                let dn = (gq[[i, j]] - inner) / s;
                                gd[[i, j]] -= dn;
                                d_rho += dn;
                            }
                        }
                        // rho_j was read from d[j][argmin].
                        gd[[j, rho_argmin[j]]] += d_rho;
                    }
                    g[*d] += &gd;
                }
                Op::GraphAlign { p, q } => {
                    let gout = g[idx][[0, 0]];
                    let qm = &self.nodes[*q].value;
                    let n = qm.nrows();
                    let pm = match p {
                        GraphTargetSlot::Constant(m) => m,
                        GraphTargetSlot::Var(v) => &self.nodes[*v].value,
                    };
                    let mut gq = Matrix::zeros((n, n));
                    let mut gp = Matrix::zeros((n, n));
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let pv = pm[[i, j]];
                            let qv = qm[[i, j]];
                            // Gradient passes only where the clamp is inactive.
                            if qv > topology::PROB_CLAMP && qv < 1.0 - topology::PROB_CLAMP {
                                gq[[i, j]] = gout * (-pv / qv + (1.0 - pv) / (1.0 - qv));
                            }
                            if matches!(p, GraphTargetSlot::Var(_)) {
                                // d/dp of the aligned Bernoulli term is the
                                // log-odds gap; clamp p inside the logs so the
                                // boundary subgradient stays finite.
                                let pc = clamp_prob(pv);
                                let qc = clamp_prob(qv);
                                gp[[i, j]] = gout
                                    * ((pc / (1.0 - pc)).ln() - (qc / (1.0 - qc)).ln());
                            }
                        }
                    }
                    g[*q] += &gq;
                    if let GraphTargetSlot::Var(v) = p {
                        g[*v] += &gp;
                    }
                }
                Op::DistAlign { target, d } => {
                    let gout = g[idx][[0, 0]];
                    let dm = &self.nodes[*d].value;
                    let n = dm.nrows();
                    let denom = (n * (n - 1)) as f64;
                    let tm = match target {
                        GraphTargetSlot::Constant(m) => m,
                        GraphTargetSlot::Var(v) => &self.nodes[*v].value,
                    };
                    let mut gd = Matrix::zeros((n, n));
                    for i in 0..n {
                        for j in 0..n {
                            if i != j {
                                gd[[i, j]] = gout * 2.0 * (dm[[i, j]] - tm[[i, j]]) / denom;
                            }
                        }
                    }
                    g[*d] += &gd;
                    if let GraphTargetSlot::Var(v) = target {
                        let gt = gd.mapv(|v| -v);
                        g[*v] += &gt;
                    }
                }
            }
        }
        Ok(Grads { by_node: g })
    }

    /// Composite helper: topology loss of live features `q_features` against
    /// the graph of `p_target` (constant matrix or live var).
    pub fn topology_loss(&mut self, p_target: GraphTarget, q_features: Var) -> Result<Var> {
        let dq = self.cosine_distances(q_features)?;
        let qg = self.neighbor_columns(dq)?;
        let p = match p_target {
            GraphTarget::Constant(f) => GraphTarget::Constant(topology::neighbor_graph(&f)?),
            GraphTarget::Var(v) => {
                let dp = self.cosine_distances(v)?;
                GraphTarget::Var(self.neighbor_columns(dp)?)
            }
        };
        self.graph_align(p, qg)
    }

    /// Composite helper: absolute-relation loss of live features against a
    /// target feature matrix (constant or live).
    pub fn absolute_relation_loss(
        &mut self,
        target_features: GraphTarget,
        q_features: Var,
    ) -> Result<Var> {
        let dq = self.cosine_distances(q_features)?;
        let target = match target_features {
            GraphTarget::Constant(f) => {
                GraphTarget::Constant(topology::cosine_distances(&f)?)
            }
            GraphTarget::Var(v) => GraphTarget::Var(self.cosine_distances(v)?),
        };
        self.dist_align(target, dq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Seed;
    use crate::numerics::{finite_diff_grad, max_rel_err};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn rand_matrix(seed: u64, n: usize, m: usize, lo: f64, hi: f64) -> Matrix {
        let mut rng = Seed(seed).rng();
        Matrix::from_shape_fn((n, m), |_| rng.uniform(lo, hi))
    }

    fn rand_labels(seed: u64, n: usize, c: usize) -> Vec<usize> {
        let mut rng = Seed(seed).rng();
        (0..n).map(|_| rng.next_index(c)).collect()
    }

    /// Gradient-check a scalar function of one matrix input.
    fn check_grad<F>(build: F, at: &Matrix, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(at.clone());
        let loss = build(&mut tape, x);
        let analytic = tape.backward(loss).unwrap();
        let numeric = finite_diff_grad(
            |m| {
                let mut t = Tape::new();
                let x = t.leaf(m.clone());
                let l = build(&mut t, x);
                Ok(t.scalar(l))
            },
            at,
            1e-5,
        )
        .unwrap();
        let err = max_rel_err(analytic.wrt(x), &numeric);
        assert!(err < tol, "gradient mismatch: rel err {err}");
    }

    #[test]
    fn cross_entropy_gradient_matches_oracle() {
        for seed in 0..5 {
            let logits = rand_matrix(seed, 6, 4, -2.0, 2.0);
            let labels = rand_labels(seed + 100, 6, 4);
            check_grad(
                |t, x| t.cross_entropy_mean(x, &labels),
                &logits,
                1e-6,
            );
        }
    }

    #[test]
    fn kl_gradient_matches_oracle_both_sides() {
        for seed in 0..5 {
            let p_logits = rand_matrix(seed, 5, 3, -2.0, 2.0);
            let q_logits = rand_matrix(seed + 50, 5, 3, -2.0, 2.0);
            // q side.
            check_grad(
                |t, x| {
                    let p = t.leaf(p_logits.clone());
                    t.kl_mean(p, x)
                },
                &q_logits,
                1e-6,
            );
            // p side.
            check_grad(
                |t, x| {
                    let q = t.leaf(q_logits.clone());
                    t.kl_mean(x, q)
                },
                &p_logits,
                1e-6,
            );
        }
    }

    #[test]
    fn kl_is_zero_at_equal_logits() {
        let mut tape = Tape::new();
        let logits = rand_matrix(3, 4, 3, -1.0, 1.0);
        let a = tape.leaf(logits.clone());
        let b = tape.leaf(logits);
        let kl = tape.kl_mean(a, b);
        assert_abs_diff_eq!(tape.scalar(kl), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sq_dist_gradient_matches_oracle() {
        let a = rand_matrix(1, 4, 3, -1.0, 1.0);
        let b = rand_matrix(2, 4, 3, -1.0, 1.0);
        check_grad(
            |t, x| {
                let bv = t.leaf(b.clone());
                t.sq_dist_row_mean(x, bv)
            },
            &a,
            1e-7,
        );
    }

    #[test]
    fn margin_gradient_matches_oracle() {
        let logits = rand_matrix(4, 5, 4, -2.0, 2.0);
        let labels = rand_labels(7, 5, 4);
        check_grad(
            |t, x| t.margin_mean(x, &labels).unwrap(),
            &logits,
            1e-6,
        );
    }

    #[test]
    fn margin_rejects_single_class() {
        let mut tape = Tape::new();
        let logits = tape.leaf(array![[1.0], [2.0]]);
        assert!(tape.margin_mean(logits, &[0, 0]).is_err());
    }

    #[test]
    fn mlp_chain_gradient_matches_oracle() {
        // Two-layer chain exercising matmul, bias, relu, and CE together.
        let x = rand_matrix(11, 5, 3, 0.0, 1.0);
        let w1 = rand_matrix(12, 3, 6, -0.7, 0.7);
        let b1 = rand_matrix(13, 1, 6, -0.1, 0.1);
        let w2 = rand_matrix(14, 6, 2, -0.7, 0.7);
        let labels = rand_labels(15, 5, 2);

        // Check the gradient with respect to w1 (the deepest parameter).
        let build = |t: &mut Tape, w1v: Var| {
            let xv = t.leaf(x.clone());
            let b1v = t.leaf(b1.clone());
            let w2v = t.leaf(w2.clone());
            let h = t.matmul(xv, w1v);
            let h = t.add_bias(h, b1v);
            let h = t.relu(h);
            let logits = t.matmul(h, w2v);
            t.cross_entropy_mean(logits, &labels)
        };
        check_grad(build, &w1, 1e-5);
    }

    #[test]
    fn cosine_distance_gradient_matches_oracle() {
        let f = rand_matrix(21, 5, 4, 0.2, 1.2);
        check_grad(
            |t, x| {
                let d = t.cosine_distances(x).unwrap();
                // Arbitrary smooth scalar of D: mean of off-diagonal squares.
                let zero = t.leaf(Matrix::zeros((5, 5)));
                t.dist_align(GraphTarget::Var(zero), d).unwrap()
            },
            &f,
            1e-5,
        );
    }

    #[test]
    fn topology_loss_gradient_matches_oracle_q_side() {
        for seed in 0..5 {
            let p_features = rand_matrix(seed, 6, 4, 0.2, 1.2);
            let q_features = rand_matrix(seed + 30, 6, 4, 0.2, 1.2);
            check_grad(
                |t, x| t.topology_loss(GraphTarget::Constant(p_features.clone()), x).unwrap(),
                &q_features,
                1e-5,
            );
        }
    }

    #[test]
    fn topology_loss_p_side_gradient_is_zero_when_constant() {
        // Stop-gradient contract: the target features of a constant-target
        // topology loss receive exactly zero gradient.
        let p_features = rand_matrix(41, 5, 3, 0.2, 1.2);
        let q_features = rand_matrix(42, 5, 3, 0.2, 1.2);
        let mut tape = Tape::new();
        let p_leaf = tape.leaf(p_features.clone());
        let q_leaf = tape.leaf(q_features);
        // p enters by value, so p_leaf is on the tape but outside the loss.
        let loss = tape
            .topology_loss(GraphTarget::Constant(p_features), q_leaf)
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(p_leaf).iter().all(|&v| v == 0.0));
        assert!(grads.wrt(q_leaf).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn topology_loss_live_target_gradient_matches_oracle() {
        // The both-sides-coupled variant: gradient with respect to the
        // *target* features must also match the oracle.
        let p_features = rand_matrix(51, 5, 3, 0.2, 1.2);
        let q_features = rand_matrix(52, 5, 3, 0.2, 1.2);
        check_grad(
            |t, x| {
                let q = t.leaf(q_features.clone());
                t.topology_loss(GraphTarget::Var(x), q).unwrap()
            },
            &p_features,
            1e-5,
        );
    }

    #[test]
    fn absolute_relation_gradient_matches_oracle() {
        let target = rand_matrix(61, 5, 3, 0.2, 1.2);
        let live = rand_matrix(62, 5, 3, 0.2, 1.2);
        check_grad(
            |t, x| {
                t.absolute_relation_loss(GraphTarget::Constant(target.clone()), x)
                    .unwrap()
            },
            &live,
            1e-5,
        );
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[f64::INFINITY]]);
        let loss = tape.scale(x, 1.0);
        assert!(matches!(tape.backward(loss), Err(Error::NonFinite(_))));
    }
}
