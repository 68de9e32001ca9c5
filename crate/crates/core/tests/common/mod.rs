/// Maximizes Σ π_i (r_i − ρ log π_i) by exact line searches along e_i − e_j.
pub fn simplex_maximizer(r: &[f64], rho: f64) -> Vec<f64> {
    let m = r.len();
    let mut pi = vec![1.0 / m as f64; m];
    for _ in 0..400 {
        for i in 0..m {
            for j in (i + 1)..m {
                let s = pi[i] + pi[j];
                // d/dx of the objective with π_i = x, π_j = s − x
                let slope = |x: f64| (r[i] - r[j]) - rho * (x.ln() - (s - x).ln());
                let (mut lo, mut hi) = (0.0, s);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if slope(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                pi[i] = 0.5 * (lo + hi);
                pi[j] = s - pi[i];
            }
        }
    }
    pi
}
