//! Dirichlet label-skew partitioning into K client shards.
//!
//! For each label class, client proportions are drawn once from Dir(beta) and
//! row counts are rounded by the largest-remainder method, so the shards form
//! an exact disjoint partition of the input and the result is reproducible
//! from the seed alone.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::seed;
use crate::table::Table;

/// Partitioning parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    /// Dirichlet concentration; smaller means heavier label skew.
    pub beta: f64,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "dirichlet beta must be positive, got {}",
                self.beta
            )));
        }
        if self.num_clients < 1 {
            return Err(Error::Config("num_clients must be at least 1".into()));
        }
        Ok(())
    }
}

/// Splits `table` into `plan.num_clients` shards by label-wise Dirichlet draws.
pub fn dirichlet_partition(table: &Table, plan: &PartitionPlan) -> Result<Vec<Table>> {
    plan.validate()?;
    let k = plan.num_clients;
    if table.row_count() < k {
        return Err(Error::Config(format!(
            "cannot split {} rows across {} clients",
            table.row_count(),
            k
        )));
    }
    if k == 1 {
        return Ok(vec![table.clone()]);
    }

    // Group row indices by label, labels processed in sorted order.
    let labels = table.labels();
    let mut by_label: Vec<(String, Vec<usize>)> = Vec::new();
    {
        let mut map = std::collections::BTreeMap::<&str, Vec<usize>>::new();
        for (i, l) in labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        for (l, idx) in map {
            by_label.push((l.to_string(), idx));
        }
    }

    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (ordinal, (_, mut indices)) in by_label.into_iter().enumerate() {
        let mut rng = seed::rng_chain(plan.seed, &[seed::stream::PARTITION, ordinal as u64]);
        let proportions = sample_dirichlet(plan.beta, k, &mut rng);
        let counts = largest_remainder(&proportions, indices.len());
        indices.shuffle(&mut rng);
        let mut offset = 0;
        for (client, &count) in counts.iter().enumerate() {
            assignments[client].extend_from_slice(&indices[offset..offset + count]);
            offset += count;
        }
    }

    Ok(assignments
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            table.select_rows(&idx)
        })
        .collect())
}

/// One draw from Dir(beta, ..., beta) via normalized Gamma variates.
fn sample_dirichlet(beta: f64, k: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        // All mass underflowed (tiny beta); fall back to uniform.
        return vec![1.0 / k as f64; k];
    }
    draws.iter().map(|d| d / total).collect()
}

/// Rounds fractional allocations to integers summing to `total` exactly.
/// Residual units go to the clients with the largest fractional share,
/// ties broken by lower client index.
fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(proportions.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(proportions.len());
    let mut assigned = 0usize;
    for (i, p) in proportions.iter().enumerate() {
        let exact = p * total as f64;
        let floor = exact.floor() as usize;
        counts.push(floor);
        assigned += floor;
        remainders.push((i, exact - floor as f64));
    }
    let mut residual = total - assigned;
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in remainders {
        if residual == 0 {
            break;
        }
        counts[i] += 1;
        residual -= 1;
    }
    counts
}
