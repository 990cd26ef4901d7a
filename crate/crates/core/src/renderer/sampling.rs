//! Sample placement along a ray: stratified coarse draws and inverse-CDF fine draws.

/// Added to every coarse weight before building the fine-sampling PDF.
pub const WEIGHT_FLOOR: f64 = 1e-5;

/// One uniform draw inside each of `count` equal strata of `[near, far]`.
pub fn sample_coarse(near: f64, far: f64, count: usize, mut uniform: impl FnMut() -> f64) -> Vec<f64> {
    let h = (far - near) / count as f64;
    (0..count)
        .map(|i| {
            let u = uniform().clamp(0.0, 1.0);
            (near + (i as f64 + u) * h).min(far)
        })
        .collect()
}

/// Draw `count` positions from the piecewise-constant density `∝ w_i + WEIGHT_FLOOR` over
/// the `weights.len()` equal strata of `[near, far]`, using the given uniforms in `[0, 1]`.
pub fn sample_fine_with(near: f64, far: f64, weights: &[f64], uniforms: &[f64]) -> Vec<f64> {
    let bins = weights.len();
    let h = (far - near) / bins as f64;
    let mut cdf = Vec::with_capacity(bins + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += w.max(0.0) + WEIGHT_FLOOR;
        cdf.push(acc);
    }
    for c in cdf.iter_mut() {
        *c /= acc;
    }
    uniforms
        .iter()
        .map(|&u| {
            let u = u.clamp(0.0, 1.0);
            // first bin whose upper CDF edge reaches u
            let bin = cdf[1..].partition_point(|c| *c < u).min(bins - 1);
            let lo = cdf[bin];
            let span = cdf[bin + 1] - lo;
            let frac = if span > 0.0 { ((u - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
            near + (bin as f64 + frac) * h
        })
        .collect()
}

/// Random inverse-CDF fine samples.
pub fn sample_fine(near: f64, far: f64, weights: &[f64], count: usize, mut uniform: impl FnMut() -> f64) -> Vec<f64> {
    let u: Vec<f64> = (0..count).map(|_| uniform()).collect();
    sample_fine_with(near, far, weights, &u)
}

/// Evenly spaced uniforms `j / (count - 1)`, used for deterministic fine placement.
pub fn even_uniforms(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5],
        n => (0..n).map(|j| j as f64 / (n - 1) as f64).collect(),
    }
}

/// Sorted union of coarse and fine positions, plus for each merged slot its source index
/// in `coarse ++ fine`.
pub fn merge_sorted(coarse: &[f64], fine: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..coarse.len() + fine.len()).collect();
    let value = |i: usize| if i < coarse.len() { coarse[i] } else { fine[i - coarse.len()] };
    order.sort_by(|a, b| value(*a).total_cmp(&value(*b)).then(a.cmp(b)));
    (order.iter().map(|&i| value(i)).collect(), order)
}

/// Quadrature intervals `δ_i = v_{i+1} − v_i`, with the last interval running to `far`.
pub fn intervals(positions: &[f64], far: f64) -> Vec<f64> {
    let n = positions.len();
    (0..n)
        .map(|i| {
            let next = if i + 1 < n { positions[i + 1] } else { far };
            (next - positions[i]).max(0.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_draws_give_stratum_centres() {
        assert_eq!(sample_coarse(0.0, 1.0, 4, || 0.5), vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn coarse_samples_increase_and_stay_in_bounds() {
        let mut state = 0.1f64;
        let s = sample_coarse(2.0, 5.0, 32, || {
            state = (state * 7.3 + 0.31).fract();
            state
        });
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|v| (2.0..=5.0).contains(v)));
    }

    #[test]
    fn point_mass_keeps_fine_samples_in_its_bin() {
        let mut w = vec![0.0; 8];
        w[5] = 1.0;
        let u: Vec<f64> = (0..1000).map(|j| (j as f64 + 0.5) / 1000.0).collect();
        let s = sample_fine_with(0.0, 8.0, &w, &u);
        let inside = s.iter().filter(|v| (5.0..=6.0).contains(*v)).count();
        assert!(inside as f64 >= 0.99 * 1000.0, "{inside}");
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let s = sample_fine_with(0.0, 1.0, &[0.0; 4], &[0.1, 0.6, 0.99]);
        for (v, u) in s.iter().zip([0.1, 0.6, 0.99]) {
            assert!((v - u).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_is_sorted_with_source_indices() {
        let (v, idx) = merge_sorted(&[0.1, 0.5, 0.9], &[0.3, 0.95]);
        assert_eq!(v, vec![0.1, 0.3, 0.5, 0.9, 0.95]);
        assert_eq!(idx, vec![0, 3, 1, 2, 4]);
    }

    #[test]
    fn last_interval_reaches_far_bound() {
        assert_eq!(intervals(&[1.0, 1.5, 3.0], 4.0), vec![0.5, 1.5, 1.0]);
    }
}
