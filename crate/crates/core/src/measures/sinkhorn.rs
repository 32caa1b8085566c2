use super::{sq_dist, EmpiricalMeasure};

const MAX_ITERS: usize = 20_000;
const MARGINAL_TOL: f64 = 1e-10;

/// Log-domain Sinkhorn between two uniform clouds.
///
/// Returns `(⟨P, C⟩, bias)` for the regularized plan `P`. Couplings of
/// uniform marginals have entropy in `[ln max(n, m), ln(n m)]`, so
/// `0 ≤ ⟨P, C⟩ − W₂² ≤ epsilon · ln min(n, m) = bias` once the iteration has
/// converged. Costs are evaluated on the fly to keep memory linear.
pub(super) fn entropic_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, epsilon: f64) -> (f64, f64) {
    let (n, m) = (mu.len(), nu.len());
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];
    let cost = |i: usize, j: usize| sq_dist(mu.atom(i), nu.atom(j));
    let mut scratch = vec![0.0f64; n.max(m)];

    for _ in 0..MAX_ITERS {
        for i in 0..n {
            for (j, s) in scratch[..m].iter_mut().enumerate() {
                *s = (g[j] - cost(i, j)) / epsilon;
            }
            f[i] = -epsilon * (logsumexp(&scratch[..m]) + log_b);
        }
        let mut err = 0.0f64;
        for j in 0..m {
            for (i, s) in scratch[..n].iter_mut().enumerate() {
                *s = (f[i] - cost(i, j)) / epsilon;
            }
            let g_new = -epsilon * (logsumexp(&scratch[..n]) + log_a);
            err = err.max((g_new - g[j]).abs());
            g[j] = g_new;
        }
        if err < MARGINAL_TOL * epsilon {
            break;
        }
    }

    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = cost(i, j);
            let log_p = (f[i] + g[j] - c) / epsilon + log_a + log_b;
            total += log_p.exp() * c;
        }
    }
    (total, epsilon * (n.min(m) as f64).ln())
}

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
