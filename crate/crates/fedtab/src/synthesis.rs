//! Covariance-constrained synthesis of raw tables.
//!
//! Rows are produced from i.i.d. standard-normal noise correlated through the
//! Cholesky factor, then decoded through the ICDM and inverse-MDT codecs. The
//! operation reads only codecs and the factor — no client rows flow in — so
//! the interface itself enforces the privacy boundary.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::covariance::CholFactor;
use crate::error::{Error, Result};
use crate::seed;
use crate::table::Table;
use crate::transforms::{decode_row, EncodedMatrix, TableCodecs};

/// Rows synthesize in independent blocks; each block derives its own
/// generator from (seed, block index).
const BLOCK_ROWS: usize = 1024;

/// What to synthesize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthesisRequest {
    pub n_rows: usize,
    pub seed: u64,
}

/// Samples `n_rows` correlated encoded rows: each row is U z with
/// z ~ N(0, I), so the distributional covariance is exactly U U^T.
pub fn sample_encoded(
    codecs: &TableCodecs,
    factor: &CholFactor,
    request: &SynthesisRequest,
) -> Result<EncodedMatrix> {
    let l = codecs.width();
    if factor.dim != l {
        return Err(Error::Contract(format!(
            "cholesky factor has dimension {}, codec layout expects {l}",
            factor.dim
        )));
    }
    let mut data = vec![0.0; request.n_rows * l];
    let mut z = vec![0.0; l];
    for block_start in (0..request.n_rows).step_by(BLOCK_ROWS) {
        let block_index = (block_start / BLOCK_ROWS) as u64;
        let mut rng = seed::rng_chain(request.seed, &[seed::stream::SYNTHESIS, block_index]);
        let block_end = (block_start + BLOCK_ROWS).min(request.n_rows);
        for row in block_start..block_end {
            for zj in z.iter_mut() {
                *zj = StandardNormal.sample(&mut rng);
            }
            factor.correlate(&z, &mut data[row * l..(row + 1) * l]);
        }
    }
    EncodedMatrix::new(codecs.layout.clone(), request.n_rows, data)
}

/// Synthesizes a raw table conforming to the codec schema. Deterministic
/// given the request seed.
pub fn synthesize(
    codecs: &TableCodecs,
    factor: &CholFactor,
    request: &SynthesisRequest,
) -> Result<Table> {
    let encoded = sample_encoded(codecs, factor, request)?;
    let mut rows = Vec::with_capacity(request.n_rows);
    for i in 0..encoded.n_rows() {
        rows.push(decode_row(encoded.row(i), codecs)?);
    }
    Table::new(Arc::clone(&codecs.schema), rows)
}

/// A client shard together with per-row synthetic-provenance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedShard {
    pub table: Table,
    /// One flag per row; true marks a synthesized row.
    pub synthetic: Vec<bool>,
}

/// Union of a client's local rows and its synthetic rows, with provenance.
pub fn augment_client(local: &Table, synthetic: &Table) -> Result<AugmentedShard> {
    let table = local.concat(synthetic)?;
    let mut flags = vec![false; local.row_count()];
    flags.extend(std::iter::repeat(true).take(synthetic.row_count()));
    Ok(AugmentedShard {
        table,
        synthetic: flags,
    })
}
