use crate::error::{CoreError, Result};

/// Resamples to `target_len`: Largest-Triangle-Three-Buckets when shrinking,
/// piecewise-linear interpolation when growing, identity otherwise.
pub fn resample(values: &[f64], target_len: usize) -> Result<Vec<f64>> {
    if target_len < 2 {
        return Err(CoreError::InvalidTarget(target_len));
    }
    if values.len() < 2 {
        return Err(CoreError::contract(format!("resampling needs at least 2 points, got {}", values.len())));
    }
    Ok(match target_len.cmp(&values.len()) {
        std::cmp::Ordering::Less => lttb(values, target_len),
        std::cmp::Ordering::Greater => linear_interpolate(values, target_len),
        std::cmp::Ordering::Equal => values.to_vec(),
    })
}

/// Largest-Triangle-Three-Buckets over `(index, value)` points.
///
/// The first and last points are always kept; each interior bucket keeps the
/// point forming the largest triangle with the previously kept point and the
/// mean of the next bucket.
pub fn lttb(values: &[f64], threshold: usize) -> Vec<f64> {
    let n = values.len();
    if threshold >= n || threshold < 3 {
        return if threshold >= n { values.to_vec() } else { vec![values[0], values[n - 1]] };
    }
    let every = (n - 2) as f64 / (threshold - 2) as f64;
    let mut out = Vec::with_capacity(threshold);
    out.push(values[0]);
    let mut a = 0usize;
    for i in 0..threshold - 2 {
        let avg_start = ((i + 1) as f64 * every).floor() as usize + 1;
        let avg_end = (((i + 2) as f64 * every).floor() as usize + 1).min(n);
        let span = (avg_end - avg_start) as f64;
        let avg_x = (avg_start..avg_end).map(|j| j as f64).sum::<f64>() / span;
        let avg_y = values[avg_start..avg_end].iter().sum::<f64>() / span;

        let start = (i as f64 * every).floor() as usize + 1;
        let end = ((i + 1) as f64 * every).floor() as usize + 1;
        let (ax, ay) = (a as f64, values[a]);
        let mut best = start;
        let mut best_area = -1.0;
        for (j, &y) in values.iter().enumerate().take(end).skip(start) {
            let area = ((ax - avg_x) * (y - ay) - (ax - j as f64) * (avg_y - ay)).abs();
            if area > best_area {
                best_area = area;
                best = j;
            }
        }
        out.push(values[best]);
        a = best;
    }
    out.push(values[n - 1]);
    out
}

/// Piecewise-linear interpolation onto `target_len` uniformly spaced points
/// spanning the input.
pub fn linear_interpolate(values: &[f64], target_len: usize) -> Vec<f64> {
    let n = values.len();
    if target_len == 1 {
        return vec![values[0]];
    }
    let scale = (n - 1) as f64 / (target_len - 1) as f64;
    (0..target_len)
        .map(|j| {
            let pos = j as f64 * scale;
            let lo = (pos.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            values[lo] + (values[hi] - values[lo]) * frac
        })
        .collect()
}
