//! Brute-force references used by tests and acceptance checks.
//!
//! Everything here is independent of the differentiable implementations it
//! validates: plain loops over plain numbers, no tape, no shared code paths.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Exhaustive enumeration of rooted spanning arborescences.
///
/// Weight of a tree rooted at r with parent map p is
/// root_w[r] * prod over non-root j of edge_w[p(j)][j].
/// Returns the partition function Z, edge marginals (parent row, child
/// column), and root probabilities.
pub fn enumerate_arborescences(
    edge_w: &Matrix,
    root_w: &[f64],
) -> Result<(f64, Matrix, Vec<f64>)> {
    let n = root_w.len();
    if edge_w.shape() != (n, n) {
        return Err(Error::invalid("edge weight matrix shape mismatch"));
    }
    if n == 0 || n > 8 {
        return Err(Error::invalid(format!(
            "enumeration supports 1 <= n <= 8, got {n}"
        )));
    }
    if edge_w.data().iter().chain(root_w).any(|&w| w < 0.0) {
        return Err(Error::invalid("weights must be non-negative"));
    }

    let mut z = 0.0;
    let mut edge_acc = Matrix::zeros(n, n);
    let mut root_acc = vec![0.0; n];

    // parent[j] for every non-root j; mixed-radix counter over candidates.
    let mut parent = vec![0usize; n];
    for root in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != root).collect();
        let mut choice = vec![0usize; others.len()];
        loop {
            for (slot, &j) in others.iter().enumerate() {
                // Candidate parents of j are all nodes except j itself.
                let mut p = choice[slot];
                if p >= j {
                    p += 1;
                }
                parent[j] = p;
            }
            if is_arborescence(root, &parent, n) {
                let mut w = root_w[root];
                for &j in &others {
                    w *= edge_w.get(parent[j], j);
                }
                z += w;
                root_acc[root] += w;
                for &j in &others {
                    edge_acc.add_at(parent[j], j, w);
                }
            }
            // Advance the counter; each slot has n-1 candidate parents.
            let mut slot = 0;
            loop {
                if slot == others.len() {
                    break;
                }
                choice[slot] += 1;
                if choice[slot] < n - 1 {
                    break;
                }
                choice[slot] = 0;
                slot += 1;
            }
            if slot == others.len() {
                break;
            }
        }
    }

    if z <= 0.0 {
        return Err(Error::invalid("degenerate weights: partition function is 0"));
    }
    let marginals = edge_acc.scale(1.0 / z);
    let roots: Vec<f64> = root_acc.iter().map(|&w| w / z).collect();
    Ok((z, marginals, roots))
}

fn is_arborescence(root: usize, parent: &[usize], n: usize) -> bool {
    // Every non-root node must reach the root by following parents,
    // in at most n-1 steps (otherwise there is a cycle).
    for start in 0..n {
        if start == root {
            continue;
        }
        let mut cur = start;
        let mut steps = 0;
        while cur != root {
            cur = parent[cur];
            steps += 1;
            if steps >= n {
                return false;
            }
        }
    }
    true
}

/// Binary band matrix from per-token hard boundaries:
/// band[i][j] = 1 iff lp[i] <= j <= rp[i].
pub fn hard_segment_band(lp: &[usize], rp: &[usize]) -> Result<Matrix> {
    let n = lp.len();
    if rp.len() != n {
        return Err(Error::invalid("boundary vectors differ in length"));
    }
    for i in 0..n {
        if !(lp[i] <= i && i <= rp[i] && rp[i] < n) {
            return Err(Error::invalid(format!(
                "boundaries at token {i} violate lp <= i <= rp < n: lp={}, rp={}",
                lp[i], rp[i]
            )));
        }
    }
    let mut band = Matrix::zeros(n, n);
    for i in 0..n {
        for j in lp[i]..=rp[i] {
            band.set(i, j, 1.0);
        }
    }
    Ok(band)
}

/// Soft band from boundary distributions by explicit summation:
/// out[i][j] = P(lp_i <= j) * P(rp_i >= j).
pub fn soft_segment_band(phi_l: &Matrix, phi_r: &Matrix) -> Matrix {
    let n = phi_l.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let p_left: f64 = (0..=j).map(|k| phi_l.get(i, k)).sum();
            let p_right: f64 = (j..n).map(|k| phi_r.get(i, k)).sum();
            out.set(i, j, p_left * p_right);
        }
    }
    out
}

/// Hand-derivable loss values for closed-form micro cases.
pub fn micro_losses(case: &str) -> Result<f64> {
    match case {
        // Cross-entropy of the uniform 3-class distribution.
        "uniform_3class_ce" => Ok(3f64.ln()),
        // Binary cross-entropy of sigmoid(0) against target 1.
        "bce_sigmoid_zero_vs_one" => Ok(2f64.ln()),
        // Root BCE, n=2, probabilities (0.5, 0.5), targets (1, 0).
        "root_bce_n2_uniform" => Ok(2.0 * 2f64.ln()),
        // 1.0 + 0.1*0.5 + 0.5*0.2 for the weighted-sum example.
        "weighted_total_example" => Ok(1.15),
        other => Err(Error::invalid(format!("unknown micro case: {other}"))),
    }
}
