//! Linear assignment solvers backing the earth mover's distance.
//!
//! [`hungarian`] is the exact shortest-augmenting-path method with row/column
//! potentials (cubic time). [`auction`] is Bertsekas' forward auction with
//! ε-scaling; it stops once the primal cost is within a requested relative gap
//! of the dual lower bound carried by its prices.

/// Minimum-cost perfect matching on a dense `n x n` cost matrix (row-major).
///
/// Returns `assignment[row] = column`.
pub fn hungarian(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let crow = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = crow[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Result of an auction run.
#[derive(Clone, Debug)]
pub struct AuctionResult {
    pub assignment: Vec<usize>,
    pub cost: f64,
    /// Dual lower bound on the optimal cost.
    pub lower_bound: f64,
    /// `(cost - lower_bound) / cost`, zero for a zero-cost matching.
    pub gap: f64,
}

/// ε-scaling auction for minimum-cost assignment, run until the certified
/// relative optimality gap is at most `max_gap`.
pub fn auction(n: usize, cost: &[f64], max_gap: f64) -> AuctionResult {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return AuctionResult {
            assignment: Vec::new(),
            cost: 0.0,
            lower_bound: 0.0,
            gap: 0.0,
        };
    }
    let cmax = cost.iter().fold(0.0f64, |m, &c| m.max(c.abs()));
    if cmax == 0.0 {
        return AuctionResult {
            assignment: (0..n).collect(),
            cost: 0.0,
            lower_bound: 0.0,
            gap: 0.0,
        };
    }
    // Benefits are negated costs; prices live on columns.
    let mut prices = vec![0.0; n];
    let mut eps = cmax / 4.0;
    let min_eps = cmax * 1e-12;
    loop {
        let mut owner: Vec<Option<usize>> = vec![None; n];
        let mut assigned: Vec<Option<usize>> = vec![None; n];
        let mut queue: Vec<usize> = (0..n).rev().collect();
        while let Some(i) = queue.pop() {
            let row = &cost[i * n..(i + 1) * n];
            let (mut best_j, mut best, mut second) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (j, (&c, &p)) in row.iter().zip(&prices).enumerate() {
                let value = -c - p;
                if value > best {
                    second = best;
                    best = value;
                    best_j = j;
                } else if value > second {
                    second = value;
                }
            }
            let increment = if second.is_finite() { best - second } else { 0.0 };
            prices[best_j] += increment + eps;
            if let Some(prev) = owner[best_j].replace(i) {
                assigned[prev] = None;
                queue.push(prev);
            }
            assigned[i] = Some(best_j);
        }
        let assignment: Vec<usize> = assigned.into_iter().map(|a| a.expect("complete")).collect();
        let primal: f64 = assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| cost[i * n + j])
            .sum();
        // Weak duality: min cost >= -(sum_i max_j(-c_ij - p_j) + sum_j p_j).
        let row_max: f64 = (0..n)
            .map(|i| {
                cost[i * n..(i + 1) * n]
                    .iter()
                    .zip(&prices)
                    .fold(f64::NEG_INFINITY, |m, (&c, &p)| m.max(-c - p))
            })
            .sum();
        let lower_bound = -(row_max + prices.iter().sum::<f64>());
        let gap = if primal > 0.0 {
            ((primal - lower_bound) / primal).max(0.0)
        } else {
            0.0
        };
        if gap <= max_gap || eps <= min_eps {
            return AuctionResult {
                assignment,
                cost: primal,
                lower_bound,
                gap,
            };
        }
        eps /= 5.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(n: usize, cost: &[f64]) -> f64 {
        fn rec(n: usize, cost: &[f64], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(n, cost, row + 1, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(n, cost, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    fn total(n: usize, cost: &[f64], a: &[usize]) -> f64 {
        (0..n).map(|i| cost[i * n + a[i]]).sum()
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=7 {
            for _ in 0..20 {
                let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect();
                let a = hungarian(n, &cost);
                let mut seen = a.clone();
                seen.sort();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                assert!((total(n, &cost, &a) - brute(n, &cost)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn auction_within_gap_of_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 60;
        let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let exact = total(n, &cost, &hungarian(n, &cost));
        let r = auction(n, &cost, 0.01);
        assert!(r.gap <= 0.01);
        assert!(r.lower_bound <= exact + 1e-9);
        assert!(r.cost >= exact - 1e-9);
        assert!(r.cost <= exact * 1.01 + 1e-12);
    }

    #[test]
    fn trivial_sizes() {
        assert!(hungarian(0, &[]).is_empty());
        assert_eq!(hungarian(1, &[4.0]), vec![0]);
        assert_eq!(auction(2, &[0.0; 4], 0.01).cost, 0.0);
    }
}
