//! Loss-driven ray budgeting across semantic classes.
//!
//! Each epoch records the per-ray loss of every class. The next epoch draws rays for a
//! frame in proportion to those class averages, restricted to the classes present in the
//! frame.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLossStats {
    sums: Vec<f64>,
    counts: Vec<u64>,
    averages: Vec<f64>,
    /// Completed epochs.
    epochs: usize,
}

impl ClassLossStats {
    /// Fresh statistics; averages start at zero.
    pub fn new(classes: usize) -> Self {
        Self {
            sums: vec![0.0; classes],
            counts: vec![0; classes],
            averages: vec![0.0; classes],
            epochs: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.averages.len()
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn averages(&self) -> &[f64] {
        &self.averages
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn record_ray_loss(&mut self, class: usize, rgb_loss: f64, semantic_loss: f64) -> Result<()> {
        if class >= self.classes() {
            return Err(Error::Contract(format!("class {class} outside {} classes", self.classes())));
        }
        if !(rgb_loss.is_finite() && semantic_loss.is_finite()) || rgb_loss < 0.0 || semantic_loss < 0.0 {
            return Err(Error::Contract(format!(
                "ray losses must be finite and non-negative, got ({rgb_loss}, {semantic_loss})"
            )));
        }
        self.sums[class] += rgb_loss + semantic_loss;
        self.counts[class] += 1;
        Ok(())
    }

    /// Fold another accumulator's current-epoch sums into this one.
    pub fn merge(&mut self, other: &ClassLossStats) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::Contract("class count mismatch".into()));
        }
        for k in 0..self.classes() {
            self.sums[k] += other.sums[k];
            self.counts[k] += other.counts[k];
        }
        Ok(())
    }

    /// Freeze the epoch's averages and reset the accumulators. Classes without rays keep
    /// their previous average.
    pub fn finish_epoch(&mut self) {
        for k in 0..self.classes() {
            if self.counts[k] > 0 {
                self.averages[k] = self.sums[k] / self.counts[k] as f64;
            }
            self.sums[k] = 0.0;
            self.counts[k] = 0;
        }
        self.epochs += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub counts: Vec<usize>,
    pub total: usize,
}

/// Real-valued shares of `total` over the present classes, proportional to `losses`.
/// Present classes with all-zero losses split the budget evenly.
pub fn real_shares(losses: &[f64], total: usize, present: &[usize]) -> Vec<f64> {
    let mut shares = vec![0.0; losses.len()];
    let sum: f64 = present.iter().map(|&k| losses[k].max(0.0)).sum();
    for &k in present {
        shares[k] = if sum > 0.0 {
            losses[k].max(0.0) / sum * total as f64
        } else {
            total as f64 / present.len() as f64
        };
    }
    shares
}

/// Largest-remainder integerization of `shares`; remainders are ranked largest first with
/// the lower index winning ties.
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).filter(|&k| shares[k] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (shares[a] - shares[a].floor(), shares[b] - shares[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let remaining = total.saturating_sub(assigned);
    if !order.is_empty() {
        // rounding error in the shares can leave more than one pass of leftovers
        for &k in order.iter().cycle().take(remaining) {
            counts[k] += 1;
        }
    }
    counts
}

fn present_classes(present: &[usize], classes: usize) -> Result<Vec<usize>> {
    let mut p = present.to_vec();
    p.sort_unstable();
    p.dedup();
    if p.is_empty() {
        return Err(Error::Contract("no class present".into()));
    }
    if let Some(&k) = p.iter().find(|&&k| k >= classes) {
        return Err(Error::Contract(format!("class {k} outside {classes} classes")));
    }
    Ok(p)
}

/// Split `total` rays across the present classes in proportion to their losses.
pub fn allocate_losses(losses: &[f64], total: usize, present: &[usize]) -> Result<AllocationPlan> {
    let present = present_classes(present, losses.len())?;
    if total < present.len() {
        return Err(Error::Contract(format!(
            "{total} rays cannot cover {} present classes",
            present.len()
        )));
    }
    let shares = real_shares(losses, total, &present);
    let mut counts = largest_remainder(&shares, total);
    // every present class gets at least one ray, taken from the largest allocation
    for &k in &present {
        if counts[k] == 0 {
            let donor = (0..counts.len())
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .expect("non-empty");
            counts[donor] -= 1;
            counts[k] = 1;
        }
    }
    Ok(AllocationPlan { counts, total })
}

pub fn allocate(stats: &ClassLossStats, total: usize, present: &[usize]) -> Result<AllocationPlan> {
    allocate_losses(stats.averages(), total, present)
}

/// Classes that occur in a label map.
pub fn classes_in(labels: &[u8], classes: usize) -> Vec<usize> {
    let mut seen = vec![false; classes];
    for &l in labels {
        if (l as usize) < classes {
            seen[l as usize] = true;
        }
    }
    (0..classes).filter(|&k| seen[k]).collect()
}

/// Draw each class's allocated pixels uniformly from that class's pixels. Sampling is
/// without replacement unless the class has fewer pixels than rays. Returns flat pixel
/// indices, grouped by class.
pub fn select_pixels(plan: &AllocationPlan, labels: &[u8], rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); plan.counts.len()];
    for (i, &l) in labels.iter().enumerate() {
        if let Some(v) = by_class.get_mut(l as usize) {
            v.push(i);
        }
    }
    let mut out = Vec::with_capacity(plan.total);
    for (k, &n) in plan.counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let pool = &by_class[k];
        if pool.is_empty() {
            return Err(Error::Contract(format!("class {k} has {n} rays but no pixels")));
        }
        if pool.len() >= n {
            out.extend(sample(rng, pool.len(), n).into_iter().map(|i| pool[i]));
        } else {
            out.extend((0..n).map(|_| pool[rng.gen_range(0..pool.len())]));
        }
    }
    Ok(out)
}

/// `count` pixels drawn uniformly from the whole image without replacement.
pub fn select_uniform(pixels: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if count <= pixels {
        sample(rng, pixels, count).into_vec()
    } else {
        (0..count).map(|_| rng.gen_range(0..pixels)).collect()
    }
}

/// One `train_log.jsonl` line written at an epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub iteration: usize,
    pub class_loss: Vec<f64>,
    pub class_rays: Vec<u64>,
    /// Allocation the averages give when every class is present.
    pub allocation: Vec<usize>,
}
