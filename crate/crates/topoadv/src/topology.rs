//! Neighborhood-relation graphs over batch features and the losses defined on
//! them.
//!
//! The pipeline: cosine distances between feature rows, per-sample
//! nearest-neighbor offsets that guarantee local connectivity, column-wise
//! conditional neighbor probabilities, and finally a Bernoulli-KL alignment
//! loss between two such graphs. An off-diagonal mean-squared distance loss
//! over raw distance matrices is included as the absolute-relation ablation.
//!
//! Conventions:
//! - `graph[[i, j]]` is the conditional probability that sample `i` is a
//!   neighbor of sample `j`; column `j` is the distribution conditioned on
//!   `j` and sums to 1 over `i != j`.
//! - Diagonals are excluded from every sum and stored as 0.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Minimum feature-row norm; anything smaller is a degenerate feature.
pub const NORM_FLOOR: f64 = 1e-12;

/// Clamp bound for probabilities before logs: the loss diverges at q in
/// {0, 1}, which a graph reaches when a numerator hits its boundary.
pub const PROB_CLAMP: f64 = 1e-7;

/// Pairwise cosine distances `d[i][j] = 1 - <f_i, f_j> / (|f_i| |f_j|)`.
///
/// The output is exactly symmetric with a zero diagonal, and entries are
/// clamped into [0, 2] (cosine similarity is clamped into [-1, 1] before
/// subtraction, absorbing roundoff at the boundaries). The denominator is
/// computed as `sqrt(<f_i,f_i> <f_j,f_j>)` so duplicate rows land on
/// similarity 1 exactly.
///
/// Errors with a degenerate-feature report if any row norm is below
/// [`NORM_FLOOR`]: a zero feature vector has no direction, and silently
/// patching it would hide an upstream model bug.
pub fn cosine_distances(f: &Matrix) -> Result<Matrix> {
    let n = f.nrows();
    if n < 2 {
        return Err(Error::shape("cosine_distances", "at least 2 rows", n));
    }
    let sq_norms: Vec<f64> = f.rows().into_iter().map(|r| r.dot(&r)).collect();
    for (i, &sq) in sq_norms.iter().enumerate() {
        if sq < NORM_FLOOR * NORM_FLOOR {
            return Err(Error::degenerate(format!(
                "feature row {i} has norm {:.3e} < {NORM_FLOOR:.0e}",
                sq.sqrt()
            )));
        }
    }
    let mut d = Matrix::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let dot = f.row(i).dot(&f.row(j));
            let sim = (dot / (sq_norms[i] * sq_norms[j]).sqrt()).clamp(-1.0, 1.0);
            let dist = 1.0 - sim;
            d[[i, j]] = dist;
            d[[j, i]] = dist;
        }
    }
    Ok(d)
}

/// Nearest-neighbor offsets `rho[j] = min over k != j of d[j][k]`.
pub fn offsets(d: &Matrix) -> Vec<f64> {
    let n = d.nrows();
    assert!(n >= 2 && d.ncols() == n, "offsets needs a square matrix, n >= 2");
    (0..n)
        .map(|j| {
            (0..n)
                .filter(|&k| k != j)
                .map(|k| d[[j, k]])
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// A column-normalized neighbor graph together with the intermediates its
/// gradient needs.
pub(crate) struct GraphParts {
    /// `q[[i, j]]`: probability that i neighbors j. Diagonal 0.
    pub q: Matrix,
    /// Row index attaining each column's offset (first on ties).
    pub rho_argmin: Vec<usize>,
    /// Pre-normalization column sums.
    pub col_sums: Vec<f64>,
}

/// Column-normalized graph from a distance matrix.
///
/// Numerator for column j: `2 - (d[i][j] - rho[j])` for `i != j`. Subtracting
/// each sample's nearest-neighbor distance guarantees the nearest neighbor's
/// numerator is exactly 2, keeping every sample locally connected.
pub(crate) fn graph_from_distances(d: &Matrix) -> Result<GraphParts> {
    let n = d.nrows();
    if n < 3 || d.ncols() != n {
        return Err(Error::shape(
            "neighbor_graph",
            "square distance matrix, n >= 3",
            format!("{}x{}", d.nrows(), d.ncols()),
        ));
    }
    let mut rho = vec![0.0; n];
    let mut rho_argmin = vec![0; n];
    for j in 0..n {
        let mut best = f64::INFINITY;
        let mut best_k = usize::MAX;
        for k in 0..n {
            if k != j && d[[j, k]] < best {
                best = d[[j, k]];
                best_k = k;
            }
        }
        rho[j] = best;
        rho_argmin[j] = best_k;
    }

    let mut q = Matrix::zeros((n, n));
    let mut col_sums = vec![0.0; n];
    for j in 0..n {
        let mut sum = 0.0;
        for i in 0..n {
            if i != j {
                // `d` is symmetric, so row-j offsets apply to column j.
                let numerator = 2.0 - (d[[i, j]] - rho[j]);
                q[[i, j]] = numerator;
                sum += numerator;
            }
        }
        if sum < 1e-12 {
            return Err(Error::degenerate(format!(
                "neighbor graph column {j} has numerator sum {sum:.3e}"
            )));
        }
        col_sums[j] = sum;
        for i in 0..n {
            if i != j {
                q[[i, j]] /= sum;
            }
        }
    }
    Ok(GraphParts { q, rho_argmin, col_sums })
}

/// Conditional neighbor-probability graph of a feature matrix (n >= 3 rows).
pub fn neighbor_graph(f: &Matrix) -> Result<Matrix> {
    let d = cosine_distances(f)?;
    Ok(graph_from_distances(&d)?.q)
}

/// Per-entry Bernoulli alignment term between target probability `p` and
/// clamped prediction `qc`, split so the graph loss and its gradient share
/// one definition. The 0 log 0 limits are taken as 0.
#[inline]
pub(crate) fn bernoulli_kl_term(p: f64, qc: f64) -> f64 {
    let mut t = 0.0;
    if p > 0.0 {
        t += p * (p.ln() - qc.ln());
    }
    if p < 1.0 {
        t += (1.0 - p) * ((1.0 - p).ln() - (1.0 - qc).ln());
    }
    t
}

#[inline]
pub(crate) fn clamp_prob(q: f64) -> f64 {
    q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Topology-preservation loss between two neighbor graphs:
/// `sum over i != j of p log(p/q) + (1-p) log((1-p)/(1-q))`.
///
/// Algebraically a sum of Bernoulli KL divergences, so it is nonnegative and
/// zero exactly when the graphs match. `q` (and `1-q`) are clamped at
/// [`PROB_CLAMP`] before the logs.
///
/// This function computes the value only; the differentiable version (which
/// treats `p` as a constant so gradients reach only the model producing `q`)
/// lives on the tape in `autodiff`.
pub fn topology_loss(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.raw_dim() != q.raw_dim() || p.nrows() != p.ncols() {
        return Err(Error::shape(
            "topology_loss",
            format!("matching square graphs, got {}x{}", p.nrows(), p.ncols()),
            format!("{}x{}", q.nrows(), q.ncols()),
        ));
    }
    let n = p.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += bernoulli_kl_term(p[[i, j]], clamp_prob(q[[i, j]]));
            }
        }
    }
    Ok(total)
}

/// Absolute-relation ablation loss: mean over `i != j` of
/// `(d[i][j] - d2[i][j])^2` between two distance matrices.
pub fn absolute_relation_loss(d: &Matrix, d2: &Matrix) -> Result<f64> {
    if d.raw_dim() != d2.raw_dim() || d.nrows() != d.ncols() {
        return Err(Error::shape(
            "absolute_relation_loss",
            format!("matching square matrices, got {}x{}", d.nrows(), d.ncols()),
            format!("{}x{}", d2.nrows(), d2.ncols()),
        ));
    }
    let n = d.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let diff = d[[i, j]] - d2[[i, j]];
                total += diff * diff;
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Diagnostic dump of a neighbor graph: one CSV row per conditioning sample
/// `j`, holding the column `p[.|j]` (so each CSV row sums to 1).
pub fn write_graph_csv(path: &Path, graph: &Matrix) -> Result<()> {
    let n = graph.nrows();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "j")?;
    for i in 0..n {
        write!(out, ",p_{i}")?;
    }
    writeln!(out)?;
    for j in 0..n {
        write!(out, "{j}")?;
        for i in 0..n {
            write!(out, ",{}", graph[[i, j]])?;
        }
        writeln!(out)?;
    }
    Ok(())
}
