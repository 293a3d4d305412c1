//! Column codecs between raw tables and the standard-normal representation.
//!
//! Continuous cells become (z-score, mode indicator) pairs under a per-column
//! Gaussian mixture; discrete cells (and mode indicators, which are discrete
//! values too) become reals drawn from the slice of the standard normal whose
//! CDF mass equals the category's global frequency. A table encodes to an
//! N x l matrix, l = 2*n_c + n_d, laid out as
//! [a_1, b_1, ..., a_nc, b_nc, d_1, ..., d_nd].

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gmm::GmmPosterior;
use crate::seed;
use crate::table::{Cell, Schema, Table};

/// Default clip on cumulative probabilities, keeping inverse-CDF values finite.
pub const DEFAULT_LAMBDA: f64 = 1e-4;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Standard normal inverse CDF.
pub fn normal_inverse_cdf(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// How a continuous value picks its mode during encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModePolicy {
    /// Sample proportional to the posterior responsibility (preserves the
    /// mixture weights in the mode-indicator column).
    #[default]
    SampleResponsibility,
    /// Highest-responsibility mode; makes encode/decode an algebraic inverse.
    Argmax,
}

impl ModePolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModePolicy::SampleResponsibility => "sample",
            ModePolicy::Argmax => "argmax",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(ModePolicy::SampleResponsibility),
            "argmax" => Ok(ModePolicy::Argmax),
            other => Err(Error::Config(format!(
                "unknown mode policy '{other}' (expected 'sample' or 'argmax')"
            ))),
        }
    }
}

/// One mixture mode as the encoder sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct MdtMode {
    pub pi: f64,
    pub mu: f64,
    pub sigma: f64,
}

/// Continuous-column codec: z-score against a chosen mixture mode.
#[derive(Debug, Clone, PartialEq)]
pub struct MdtCodec {
    column: String,
    modes: Vec<MdtMode>,
    policy: ModePolicy,
}

impl MdtCodec {
    pub fn new(column: impl Into<String>, modes: Vec<MdtMode>, policy: ModePolicy) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::Config("mdt codec needs at least one mode".into()));
        }
        for m in &modes {
            if !(m.sigma > 0.0) {
                return Err(Error::Config("mdt mode sigma must be positive".into()));
            }
        }
        Ok(MdtCodec {
            column: column.into(),
            modes,
            policy,
        })
    }

    pub fn from_posterior(
        column: impl Into<String>,
        posterior: &GmmPosterior,
        policy: ModePolicy,
    ) -> Result<Self> {
        let modes = posterior
            .modes
            .iter()
            .map(|m| MdtMode {
                pi: m.pi,
                mu: m.mu,
                sigma: m.sigma,
            })
            .collect();
        MdtCodec::new(column, modes, policy)
    }

    pub fn column(&self) -> &str {
        &self.column
    }

    pub fn modes(&self) -> &[MdtMode] {
        &self.modes
    }

    pub fn policy(&self) -> ModePolicy {
        self.policy
    }

    /// Overall mean of the mixture.
    pub fn mixture_mean(&self) -> f64 {
        self.modes.iter().map(|m| m.pi * m.mu).sum()
    }

    /// Overall standard deviation of the mixture.
    pub fn mixture_std(&self) -> f64 {
        let mean = self.mixture_mean();
        let second: f64 = self
            .modes
            .iter()
            .map(|m| m.pi * (m.sigma * m.sigma + m.mu * m.mu))
            .sum();
        (second - mean * mean).max(0.0).sqrt()
    }

    /// Posterior responsibilities of `value` under the mixture, in log space
    /// so far-tail values still normalize.
    fn responsibilities(&self, value: f64) -> Vec<f64> {
        let logs: Vec<f64> = self
            .modes
            .iter()
            .map(|m| {
                let z = (value - m.mu) / m.sigma;
                m.pi.ln() - m.sigma.ln() - 0.5 * z * z
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        weights
    }

    /// Encodes a value as (z-score, mode index).
    pub fn encode<R: Rng + ?Sized>(&self, value: f64, rng: &mut R) -> Result<(f64, usize)> {
        if !value.is_finite() {
            return Err(Error::Encoding {
                column: self.column.clone(),
                message: format!("non-finite value {value}"),
            });
        }
        let resp = self.responsibilities(value);
        let t = match self.policy {
            ModePolicy::Argmax => argmax(&resp),
            ModePolicy::SampleResponsibility => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut picked = resp.len() - 1;
                for (i, r) in resp.iter().enumerate() {
                    acc += r;
                    if u < acc {
                        picked = i;
                        break;
                    }
                }
                picked
            }
        };
        let mode = &self.modes[t];
        Ok(((value - mode.mu) / mode.sigma, t))
    }

    /// Decodes (z-score, mode index) back to a raw value.
    pub fn decode(&self, a: f64, t: usize) -> Result<f64> {
        let mode = self.modes.get(t).ok_or_else(|| Error::Decoding {
            column: self.column.clone(),
            message: format!("mode index {t} out of range ({} modes)", self.modes.len()),
        })?;
        Ok(a * mode.sigma + mode.mu)
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// One category's slice of the cumulative distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct IcdmInterval {
    pub category: String,
    pub frequency: f64,
    pub q_low: f64,
    pub q_high: f64,
}

/// Discrete-column codec: category <-> standard-normal value via frequency
/// intervals. Categories are sorted ascending by global frequency (ties
/// broken lexicographically); interior boundaries are the raw cumulative
/// sums and the outermost are clipped to [lambda, 1 - lambda].
#[derive(Debug, Clone, PartialEq)]
pub struct IcdmCodec {
    column: String,
    lambda: f64,
    intervals: Vec<IcdmInterval>,
    by_category: HashMap<String, usize>,
}

impl IcdmCodec {
    pub fn from_frequencies(
        column: impl Into<String>,
        frequencies: &[(String, f64)],
        lambda: f64,
    ) -> Result<Self> {
        let column = column.into();
        if frequencies.is_empty() {
            return Err(Error::Config(format!(
                "icdm codec for column '{column}' has no categories"
            )));
        }
        if !(lambda > 0.0 && lambda < 0.5) {
            return Err(Error::Config(format!(
                "lambda must be in (0, 0.5), got {lambda}"
            )));
        }
        for (cat, f) in frequencies {
            if !(*f > 0.0) || !f.is_finite() {
                return Err(Error::Config(format!(
                    "category '{cat}' in column '{column}' has nonpositive frequency {f}"
                )));
            }
        }
        let total: f64 = frequencies.iter().map(|(_, f)| f).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "frequencies for column '{column}' sum to {total}, expected 1"
            )));
        }

        let mut sorted: Vec<(String, f64)> = frequencies.to_vec();
        sorted.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));

        let mut intervals = Vec::with_capacity(sorted.len());
        let mut cum = 0.0;
        let last = sorted.len() - 1;
        for (i, (category, raw)) in sorted.into_iter().enumerate() {
            let frequency = raw / total;
            let lo = if i == 0 { lambda } else { cum };
            cum += frequency;
            let hi = if i == last { 1.0 - lambda } else { cum };
            // Frequencies below lambda would invert the outer boundaries.
            let q_low = lo.clamp(lambda, 1.0 - lambda);
            let q_high = hi.clamp(q_low, 1.0 - lambda);
            intervals.push(IcdmInterval {
                category,
                frequency,
                q_low,
                q_high,
            });
        }
        let by_category = intervals
            .iter()
            .enumerate()
            .map(|(i, iv)| (iv.category.clone(), i))
            .collect();
        Ok(IcdmCodec {
            column,
            lambda,
            intervals,
            by_category,
        })
    }

    /// Rebuilds a codec from stored intervals, preserving boundaries exactly
    /// (used when loading a persisted artifact).
    pub fn from_intervals(
        column: impl Into<String>,
        lambda: f64,
        intervals: Vec<IcdmInterval>,
    ) -> Result<Self> {
        let column = column.into();
        if intervals.is_empty() {
            return Err(Error::Config(format!(
                "icdm codec for column '{column}' has no categories"
            )));
        }
        for pair in intervals.windows(2) {
            if pair[1].q_low < pair[0].q_high - 1e-12 {
                return Err(Error::Config(format!(
                    "icdm intervals for column '{column}' overlap"
                )));
            }
        }
        let by_category = intervals
            .iter()
            .enumerate()
            .map(|(i, iv)| (iv.category.clone(), i))
            .collect();
        Ok(IcdmCodec {
            column,
            lambda,
            intervals,
            by_category,
        })
    }

    /// Codec over tokenized mode indices weighted by the mixture weights.
    pub fn for_mode_indicator(
        column: impl Into<String>,
        mdt: &MdtCodec,
        lambda: f64,
    ) -> Result<Self> {
        let freqs: Vec<(String, f64)> = mdt
            .modes()
            .iter()
            .enumerate()
            .map(|(i, m)| (i.to_string(), m.pi))
            .collect();
        IcdmCodec::from_frequencies(column, &freqs, lambda)
    }

    pub fn column(&self) -> &str {
        &self.column
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Intervals in frequency-sorted order.
    pub fn intervals(&self) -> &[IcdmInterval] {
        &self.intervals
    }

    pub fn categories(&self) -> Vec<&str> {
        self.intervals.iter().map(|iv| iv.category.as_str()).collect()
    }

    /// Encodes a category: uniform draw in its probability interval mapped
    /// through the inverse normal CDF, so the whole-column marginal is
    /// standard normal restricted to [F^-1(lambda), F^-1(1-lambda)].
    pub fn encode<R: Rng + ?Sized>(&self, category: &str, rng: &mut R) -> Result<f64> {
        let idx = *self
            .by_category
            .get(category)
            .ok_or_else(|| Error::Encoding {
                column: self.column.clone(),
                message: format!("unknown category '{category}'"),
            })?;
        let iv = &self.intervals[idx];
        let u = if iv.q_high > iv.q_low {
            rng.random_range(iv.q_low..iv.q_high)
        } else {
            iv.q_low
        };
        Ok(normal_inverse_cdf(u))
    }

    /// Decodes any real: locate the enclosing cumulative interval; values in
    /// the clipped tails map to the first/last category.
    pub fn decode(&self, value: f64) -> &str {
        let u = normal_cdf(value);
        if u <= self.intervals[0].q_low {
            return &self.intervals[0].category;
        }
        let last = self.intervals.len() - 1;
        if u >= self.intervals[last].q_high {
            return &self.intervals[last].category;
        }
        let mut lo = 0;
        let mut hi = last;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if u < self.intervals[mid].q_high {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        &self.intervals[lo].category
    }
}

/// Role of one encoded column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodedRole {
    /// z-score of a continuous column.
    ZScore,
    /// ICDM-encoded mode indicator of a continuous column.
    ModeIndicator,
    /// ICDM-encoded discrete column.
    Discrete,
}

impl EncodedRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            EncodedRole::ZScore => "z",
            EncodedRole::ModeIndicator => "mode",
            EncodedRole::Discrete => "discrete",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(EncodedRole::ZScore),
            "mode" => Ok(EncodedRole::ModeIndicator),
            "discrete" => Ok(EncodedRole::Discrete),
            other => Err(Error::Config(format!("unknown encoded role '{other}'"))),
        }
    }
}

/// Ordered descriptors of the encoded columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedLayout {
    pub columns: Vec<(EncodedRole, String)>,
}

impl EncodedLayout {
    pub fn width(&self) -> usize {
        self.columns.len()
    }
}

/// Row-major N x l matrix of encoded values.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMatrix {
    layout: EncodedLayout,
    rows: usize,
    data: Vec<f64>,
}

impl EncodedMatrix {
    pub fn new(layout: EncodedLayout, rows: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * layout.width() {
            return Err(Error::Contract(format!(
                "encoded matrix data length {} does not match {} x {}",
                data.len(),
                rows,
                layout.width()
            )));
        }
        Ok(EncodedMatrix { layout, rows, data })
    }

    pub fn layout(&self) -> &EncodedLayout {
        &self.layout
    }

    pub fn width(&self) -> usize {
        self.layout.width()
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let l = self.width();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i)[j]).collect()
    }
}

/// The full codec bundle for one schema: per-continuous-column MDT plus mode
/// indicator, per-discrete-column ICDM, and the encoded layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TableCodecs {
    pub schema: Arc<Schema>,
    /// (MDT, mode-indicator ICDM) per continuous column, in schema order.
    pub continuous: Vec<(MdtCodec, IcdmCodec)>,
    /// ICDM per discrete column, in schema order.
    pub discrete: Vec<IcdmCodec>,
    pub layout: EncodedLayout,
}

impl TableCodecs {
    pub fn new(
        schema: Arc<Schema>,
        continuous: Vec<(MdtCodec, IcdmCodec)>,
        discrete: Vec<IcdmCodec>,
    ) -> Result<Self> {
        if continuous.len() != schema.n_continuous() || discrete.len() != schema.n_discrete() {
            return Err(Error::Contract(
                "codec counts do not match schema column counts".into(),
            ));
        }
        let mut columns = Vec::with_capacity(2 * continuous.len() + discrete.len());
        for (mdt, _) in &continuous {
            columns.push((EncodedRole::ZScore, mdt.column().to_string()));
            columns.push((EncodedRole::ModeIndicator, mdt.column().to_string()));
        }
        for icdm in &discrete {
            columns.push((EncodedRole::Discrete, icdm.column().to_string()));
        }
        Ok(TableCodecs {
            schema,
            continuous,
            discrete,
            layout: EncodedLayout { columns },
        })
    }

    pub fn width(&self) -> usize {
        self.layout.width()
    }

    /// ICDM codec of the label column.
    pub fn label_codec(&self) -> &IcdmCodec {
        let label = &self.schema.columns()[self.schema.label_index()].name;
        self.discrete
            .iter()
            .find(|c| c.column() == label.as_str())
            .expect("label codec present by construction")
    }
}

/// Encodes a table into the N x l representation. Rows are independent; row
/// i draws from a generator derived from (seed, i), so the result does not
/// depend on scheduling.
pub fn encode_table(table: &Table, codecs: &TableCodecs, seed_value: u64) -> Result<EncodedMatrix> {
    if table.schema().as_ref() != codecs.schema.as_ref() {
        return Err(Error::Contract(
            "table schema does not match codec schema".into(),
        ));
    }
    let cont_idx = table.schema().continuous_indices();
    let disc_idx = table.schema().discrete_indices();
    let l = codecs.width();
    let mut data = Vec::with_capacity(table.row_count() * l);
    for (i, row) in table.rows().iter().enumerate() {
        let mut rng = seed::rng_chain(seed_value, &[seed::stream::ENCODE, i as u64]);
        for (slot, &col) in cont_idx.iter().enumerate() {
            let value = row[col].as_f64().expect("validated");
            let (mdt, indicator) = &codecs.continuous[slot];
            let (a, t) = mdt.encode(value, &mut rng)?;
            let b = indicator.encode(&t.to_string(), &mut rng)?;
            data.push(a);
            data.push(b);
        }
        for (slot, &col) in disc_idx.iter().enumerate() {
            let token = row[col].as_token().expect("validated");
            let d = codecs.discrete[slot].encode(token, &mut rng)?;
            data.push(d);
        }
    }
    EncodedMatrix::new(codecs.layout.clone(), table.row_count(), data)
}

/// Decodes one encoded row back into schema-ordered cells.
pub fn decode_row(encoded: &[f64], codecs: &TableCodecs) -> Result<Vec<Cell>> {
    if encoded.len() != codecs.width() {
        return Err(Error::Contract(format!(
            "encoded row has width {}, layout expects {}",
            encoded.len(),
            codecs.width()
        )));
    }
    let schema = &codecs.schema;
    let mut cells = vec![Cell::Continuous(0.0); schema.len()];
    let cont_idx = schema.continuous_indices();
    let disc_idx = schema.discrete_indices();
    let mut pos = 0;
    for (slot, &col) in cont_idx.iter().enumerate() {
        let a = encoded[pos];
        let b = encoded[pos + 1];
        pos += 2;
        let (mdt, indicator) = &codecs.continuous[slot];
        let token = indicator.decode(b);
        let t: usize = token.parse().map_err(|_| Error::Decoding {
            column: mdt.column().to_string(),
            message: format!("mode token '{token}' is not an index"),
        })?;
        cells[col] = Cell::Continuous(mdt.decode(a, t)?);
    }
    for (slot, &col) in disc_idx.iter().enumerate() {
        let token = codecs.discrete[slot].decode(encoded[pos]);
        pos += 1;
        cells[col] = Cell::Discrete(token.to_string());
    }
    Ok(cells)
}
