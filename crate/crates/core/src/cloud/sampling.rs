use super::{squared_distance, PointCloud, SampleIndex};
use crate::{Error, Result};

/// Greedy farthest-point sampling starting from `seed_index`.
///
/// Each step adds the point whose distance to the selected set is largest,
/// preferring the lower index on ties, until `max(1, ceil(ratio * N))` points
/// are chosen.
pub fn farthest_point_sample(
    cloud: &PointCloud,
    ratio: f64,
    seed_index: usize,
) -> Result<SampleIndex> {
    let n = cloud.len();
    if n == 0 {
        return Err(Error::Invalid("cannot sample an empty cloud".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("sampling ratio must be in (0, 1], got {ratio}")));
    }
    if seed_index >= n {
        return Err(Error::Invalid(format!(
            "seed index {seed_index} out of range for {n} points"
        )));
    }
    let target = SampleIndex::target_len(ratio, n);
    let p = cloud.positions();
    let mut selected = Vec::with_capacity(target);
    let mut taken = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = seed_index;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == target {
            break;
        }
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            let d2 = squared_distance(&p[current], &p[j]);
            if d2 < min_d2[j] {
                min_d2[j] = d2;
            }
            if best.is_none_or(|(b, _)| min_d2[j] > b) {
                best = Some((min_d2[j], j));
            }
        }
        current = best.expect("target never exceeds point count").1;
    }
    Ok(SampleIndex { selected, ratio })
}
