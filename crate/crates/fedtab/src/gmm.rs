//! Federated variational-Bayes Gaussian mixture fitting.
//!
//! One global univariate mixture is learned per continuous column by iterating
//! E/M rounds between clients and a server that only ever sees summed
//! statistics. Per round, each client uploads per-mode responsibility sums,
//! responsibility-weighted value sums and scatter, plus two scalars (the
//! responsibility entropy and its share of the data-fit bound term); the
//! server holds the canonical posterior and broadcasts it each round.
//!
//! Posterior per mode t: Dirichlet weight alpha_t, Gaussian mean parameters
//! (beta_t, m_t), and univariate Wishart precision parameters (w_t, nu_t).
//! Derived quantities: pi_t = alpha_t / sum(alpha), mu_t = m_t, and
//! sigma_t = (nu_t * w_t)^(-1/2) from the expected precision.
//!
//! The variational lower bound is the standard one for this model, evaluated
//! each round at the responsibilities of that round's E step and the posterior
//! that produced them, which makes the sequence nondecreasing.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Below this mass a mode is treated as empty when aggregating.
const EMPTY_MODE_EPS: f64 = 1e-12;

/// Fixed hyperparameters of the prior plus fit settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    pub alpha0: f64,
    pub beta0: f64,
    pub m0: f64,
    /// Univariate Wishart scale.
    pub w0: f64,
    /// Wishart degrees of freedom.
    pub nu0: f64,
    /// Mode count T before pruning.
    pub t_max: usize,
    /// Convergence threshold on |delta lower bound|.
    pub conv_eps: f64,
    pub max_rounds: usize,
    /// Modes with weight below this are dropped after convergence.
    pub prune_threshold: f64,
    /// After convergence, modes whose means sit within this many combined
    /// standard deviations are merged by moment matching. Below about 2 a
    /// Gaussian pair is not even bimodal, so such splits are redundant
    /// refinements of one mode. Zero disables merging.
    pub merge_threshold: f64,
    /// Lower bound on derived standard deviations.
    pub sigma_floor: f64,
}

impl GmmPrior {
    /// Stable defaults for `t_max` modes.
    pub fn with_modes(t_max: usize) -> Self {
        GmmPrior {
            alpha0: 1.0 / t_max.max(1) as f64,
            beta0: 1.0,
            m0: 0.0,
            w0: 1.0,
            nu0: 3.0,
            t_max,
            conv_eps: 1e-4,
            max_rounds: 100,
            prune_threshold: 0.005,
            merge_threshold: 2.0,
            sigma_floor: 1e-6,
        }
    }

    /// Defaults with the prior mean centered on the data range, which keeps
    /// the (xbar - m0)^2 precision term harmless on wide-scale columns.
    pub fn for_range(t_max: usize, min: f64, max: f64) -> Self {
        let mut prior = Self::with_modes(t_max);
        prior.m0 = 0.5 * (min + max);
        prior
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha0", self.alpha0),
            ("beta0", self.beta0),
            ("w0", self.w0),
            ("nu0", self.nu0),
            ("conv_eps", self.conv_eps),
            ("prune_threshold", self.prune_threshold),
            ("sigma_floor", self.sigma_floor),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("gmm prior {name} must be positive")));
            }
        }
        if !(self.merge_threshold >= 0.0) || !self.merge_threshold.is_finite() {
            return Err(Error::Config("gmm merge_threshold must be nonnegative".into()));
        }
        if !self.m0.is_finite() {
            return Err(Error::Config("gmm prior m0 must be finite".into()));
        }
        if self.t_max < 1 {
            return Err(Error::Config("gmm t_max must be at least 1".into()));
        }
        if self.max_rounds < 1 {
            return Err(Error::Config("gmm max_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

/// One mixture mode: variational parameters plus derived quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmMode {
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    pub m: f64,
    pub w: f64,
    /// Mixture weight alpha_t / sum(alpha).
    pub pi: f64,
    /// Mode mean (equals m).
    pub mu: f64,
    /// Mode standard deviation from expected precision, floored.
    pub sigma: f64,
}

/// Global mixture posterior for one column.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPosterior {
    pub modes: Vec<GmmMode>,
}

impl GmmPosterior {
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// Drops modes with weight below `threshold` and renormalizes, keeping
    /// the original mode order. At least one mode always survives.
    pub fn pruned(&self, threshold: f64) -> GmmPosterior {
        let mut modes: Vec<GmmMode> = self
            .modes
            .iter()
            .filter(|m| m.pi >= threshold)
            .cloned()
            .collect();
        if modes.is_empty() {
            let best = self
                .modes
                .iter()
                .cloned()
                .max_by(|a, b| a.pi.partial_cmp(&b.pi).unwrap())
                .expect("posterior has at least one mode");
            modes.push(best);
        }
        let total: f64 = modes.iter().map(|m| m.pi).sum();
        for m in &mut modes {
            m.pi /= total;
        }
        GmmPosterior { modes }
    }

    /// Moment-matching merge of modes whose mean separation is below
    /// `threshold * sqrt(sigma_i^2 + sigma_j^2)`. Closest pairs merge first;
    /// the merged mode keeps the lower index. Hyperparameters are rebuilt
    /// from the combined evidence mass so sigma = (nu w)^(-1/2) still holds.
    pub fn merged(&self, threshold: f64, prior: &GmmPrior) -> GmmPosterior {
        let mut modes = self.modes.clone();
        if threshold <= 0.0 {
            return GmmPosterior { modes };
        }
        loop {
            let mut best: Option<(usize, usize, f64)> = None;
            for i in 0..modes.len() {
                for j in (i + 1)..modes.len() {
                    let spread =
                        (modes[i].sigma * modes[i].sigma + modes[j].sigma * modes[j].sigma).sqrt();
                    let d = (modes[i].mu - modes[j].mu).abs() / spread.max(prior.sigma_floor);
                    if d < threshold && best.map_or(true, |(_, _, bd)| d < bd) {
                        best = Some((i, j, d));
                    }
                }
            }
            let Some((i, j, _)) = best else { break };
            let (a, b) = (modes[i].clone(), modes[j].clone());
            let pi = a.pi + b.pi;
            let mu = (a.pi * a.mu + b.pi * b.mu) / pi;
            let second =
                (a.pi * (a.sigma * a.sigma + a.mu * a.mu) + b.pi * (b.sigma * b.sigma + b.mu * b.mu))
                    / pi;
            let sigma = (second - mu * mu).max(0.0).sqrt().max(prior.sigma_floor);
            let evidence = (a.alpha - prior.alpha0) + (b.alpha - prior.alpha0);
            let alpha = prior.alpha0 + evidence;
            let nu = prior.nu0 + evidence;
            modes[i] = GmmMode {
                alpha,
                beta: prior.beta0 + evidence,
                nu,
                m: mu,
                w: 1.0 / (nu * sigma * sigma),
                pi,
                mu,
                sigma,
            };
            modes.remove(j);
        }
        let alpha_hat: f64 = modes.iter().map(|m| m.alpha).sum();
        for m in &mut modes {
            m.pi = m.alpha / alpha_hat;
        }
        GmmPosterior { modes }
    }

    fn expected_log_weights(&self) -> Vec<f64> {
        let alpha_hat: f64 = self.modes.iter().map(|m| m.alpha).sum();
        self.modes
            .iter()
            .map(|m| digamma(m.alpha) - digamma(alpha_hat))
            .collect()
    }

    /// Expected log precision per mode (univariate Wishart).
    fn expected_log_precision(&self) -> Vec<f64> {
        self.modes
            .iter()
            .map(|m| digamma(0.5 * m.nu) + std::f64::consts::LN_2 + m.w.ln())
            .collect()
    }
}

/// Per-client E-step payload: per-mode responsibility sums and weighted value
/// sums, plus the responsibility entropy and the client's share of the
/// data-fit bound term (both needed to assemble the lower bound server-side).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientEStats {
    pub resp_sums: Vec<f64>,
    pub weighted_sums: Vec<f64>,
    pub resp_entropy: f64,
    pub data_fit: f64,
    /// Rows whose density underflowed everywhere and fell back to uniform
    /// responsibilities. Diagnostic, not part of the statistical payload.
    pub uniform_rows: u64,
}

/// Client-side responsibilities kept local between the E and M steps.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    values: Vec<f64>, // row-major n x t
    n_modes: usize,
}

impl Responsibilities {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_modes..(i + 1) * self.n_modes]
    }

    pub fn n_rows(&self) -> usize {
        if self.n_modes == 0 {
            0
        } else {
            self.values.len() / self.n_modes
        }
    }
}

/// Per-client M-step payload: responsibility-weighted squared deviations from
/// the broadcast global mode means.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientMStats {
    pub scatter: Vec<f64>,
}

/// Lower-bound value for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboValue {
    pub value: f64,
    pub round: usize,
}

/// Aggregated E-step quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct EAggregate {
    pub n_t: Vec<f64>,
    pub xbar_t: Vec<f64>,
    pub resp_entropy: f64,
    pub data_fit: f64,
    pub empty_modes: Vec<bool>,
    pub uniform_rows: u64,
}

/// Sums equally-shaped client payload vectors. The plaintext implementation
/// is a plain elementwise sum; an encrypted aggregator can drop in here.
pub trait Aggregator {
    fn sum(&self, payloads: &[Vec<f64>]) -> Vec<f64>;
}

/// Default aggregator: elementwise sum in client order.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlaintextSum;

impl Aggregator for PlaintextSum {
    fn sum(&self, payloads: &[Vec<f64>]) -> Vec<f64> {
        let len = payloads.first().map(|p| p.len()).unwrap_or(0);
        let mut out = vec![0.0; len];
        for p in payloads {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    }
}

/// E step over one client's values: responsibilities from expected log
/// weights and expected log precision, normalized per row.
pub fn e_step_local(values: &[f64], posterior: &GmmPosterior) -> (ClientEStats, Responsibilities) {
    let t = posterior.n_modes();
    let ln_pi = posterior.expected_log_weights();
    let ln_lam = posterior.expected_log_precision();
    let half_inv_beta: Vec<f64> = posterior.modes.iter().map(|m| 0.5 / m.beta).collect();
    let nu_w: Vec<f64> = posterior.modes.iter().map(|m| m.nu * m.w).collect();

    let mut resp = vec![0.0; values.len() * t];
    let mut resp_sums = vec![0.0; t];
    let mut weighted_sums = vec![0.0; t];
    let mut resp_entropy = 0.0;
    let mut data_fit = 0.0;
    let mut uniform_rows = 0u64;

    let mut log_norm = vec![0.0; t];
    let mut log_rho = vec![0.0; t];
    for (i, &x) in values.iter().enumerate() {
        for k in 0..t {
            let d = x - posterior.modes[k].m;
            // Expected log density of x under mode k.
            log_norm[k] = 0.5 * (ln_lam[k] - LN_2PI) - half_inv_beta[k] - 0.5 * nu_w[k] * d * d;
            log_rho[k] = ln_pi[k] + log_norm[k];
        }
        let max = log_rho.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let row = &mut resp[i * t..(i + 1) * t];
        if !max.is_finite() {
            uniform_rows += 1;
            row.fill(1.0 / t as f64);
        } else {
            let mut total = 0.0;
            for k in 0..t {
                row[k] = (log_rho[k] - max).exp();
                total += row[k];
            }
            if total <= 0.0 || !total.is_finite() {
                uniform_rows += 1;
                row.fill(1.0 / t as f64);
            } else {
                for r in row.iter_mut() {
                    *r /= total;
                }
            }
        }
        for k in 0..t {
            let r = row[k];
            if r > 0.0 {
                resp_sums[k] += r;
                weighted_sums[k] += r * x;
                resp_entropy += r * r.ln();
                data_fit += r * log_norm[k];
            }
        }
    }

    (
        ClientEStats {
            resp_sums,
            weighted_sums,
            resp_entropy,
            data_fit,
            uniform_rows,
        },
        Responsibilities {
            values: resp,
            n_modes: t,
        },
    )
}

/// Server-side E aggregation: global mode masses and means. Empty modes get
/// xbar't = m0 and are flagged rather than failing.
pub fn aggregate_e(stats: &[ClientEStats], m0: f64) -> Result<EAggregate> {
    aggregate_e_with(stats, m0, &PlaintextSum)
}

pub fn aggregate_e_with(
    stats: &[ClientEStats],
    m0: f64,
    aggregator: &dyn Aggregator,
) -> Result<EAggregate> {
    let first = stats
        .first()
        .ok_or_else(|| Error::Protocol("aggregate_e requires at least one client".into()))?;
    let t = first.resp_sums.len();
    let mut payloads = Vec::with_capacity(stats.len());
    for s in stats {
        if s.resp_sums.len() != t || s.weighted_sums.len() != t {
            return Err(Error::Protocol(
                "mode count mismatch across client E payloads".into(),
            ));
        }
        let mut p = Vec::with_capacity(2 * t + 2);
        p.extend_from_slice(&s.resp_sums);
        p.extend_from_slice(&s.weighted_sums);
        p.push(s.resp_entropy);
        p.push(s.data_fit);
        payloads.push(p);
    }
    let summed = aggregator.sum(&payloads);

    let n_t = summed[..t].to_vec();
    let mut xbar_t = Vec::with_capacity(t);
    let mut empty_modes = Vec::with_capacity(t);
    for k in 0..t {
        if n_t[k] < EMPTY_MODE_EPS {
            xbar_t.push(m0);
            empty_modes.push(true);
        } else {
            xbar_t.push(summed[t + k] / n_t[k]);
            empty_modes.push(false);
        }
    }
    Ok(EAggregate {
        n_t,
        xbar_t,
        resp_entropy: summed[2 * t],
        data_fit: summed[2 * t + 1],
        empty_modes,
        uniform_rows: stats.iter().map(|s| s.uniform_rows).sum(),
    })
}

/// Standard hyperparameter updates given aggregated evidence.
pub fn update_hyperparameters(
    prior: &GmmPrior,
    n_t: &[f64],
    xbar_t: &[f64],
) -> Vec<(f64, f64, f64, f64)> {
    n_t.iter()
        .zip(xbar_t)
        .map(|(&n, &xbar)| {
            let alpha = prior.alpha0 + n;
            let beta = prior.beta0 + n;
            let nu = prior.nu0 + n;
            let m = (prior.beta0 * prior.m0 + n * xbar) / beta;
            (alpha, beta, nu, m)
        })
        .collect()
}

/// Client-side M step: per-mode scatter around the broadcast global means,
/// using the responsibilities kept from this round's E step.
pub fn m_step_scatter(values: &[f64], resp: &Responsibilities, xbar_t: &[f64]) -> ClientMStats {
    let t = xbar_t.len();
    let mut scatter = vec![0.0; t];
    for (i, &x) in values.iter().enumerate() {
        let row = resp.row(i);
        for k in 0..t {
            let d = x - xbar_t[k];
            scatter[k] += row[k] * d * d;
        }
    }
    ClientMStats { scatter }
}

/// Server-side M aggregation: S_t = sum(scatter) / N_t, with a 1/w0
/// placeholder for empty modes (never used with nonzero weight downstream).
pub fn aggregate_m(stats: &[ClientMStats], n_t: &[f64], w0: f64) -> Result<Vec<f64>> {
    aggregate_m_with(stats, n_t, w0, &PlaintextSum)
}

pub fn aggregate_m_with(
    stats: &[ClientMStats],
    n_t: &[f64],
    w0: f64,
    aggregator: &dyn Aggregator,
) -> Result<Vec<f64>> {
    if stats.is_empty() {
        return Err(Error::Protocol("aggregate_m requires at least one client".into()));
    }
    let t = n_t.len();
    let mut payloads = Vec::with_capacity(stats.len());
    for s in stats {
        if s.scatter.len() != t {
            return Err(Error::Protocol(
                "mode count mismatch across client M payloads".into(),
            ));
        }
        payloads.push(s.scatter.clone());
    }
    let summed = aggregator.sum(&payloads);
    Ok(summed
        .iter()
        .zip(n_t)
        .map(|(&s, &n)| if n < EMPTY_MODE_EPS { 1.0 / w0 } else { s / n })
        .collect())
}

/// ln B(W, nu) for the univariate Wishart.
fn ln_wishart_b(w: f64, nu: f64) -> f64 {
    -0.5 * nu * (w.ln() + std::f64::consts::LN_2) - ln_gamma(0.5 * nu)
}

/// Standard variational lower bound, evaluated at `posterior` together with
/// the E-step aggregates computed against that same posterior.
pub fn lower_bound(posterior: &GmmPosterior, prior: &GmmPrior, agg: &EAggregate) -> f64 {
    let t = posterior.n_modes() as f64;
    let ln_pi = posterior.expected_log_weights();
    let ln_lam = posterior.expected_log_precision();
    let alpha_hat: f64 = posterior.modes.iter().map(|m| m.alpha).sum();

    // E[ln p(X | Z, mu, Lambda)] arrives pre-summed from the clients.
    let term_data = agg.data_fit;

    let mut term_z = 0.0; // E[ln p(Z | pi)]
    let mut term_p_pi = ln_gamma(t * prior.alpha0) - t * ln_gamma(prior.alpha0);
    let mut term_p_mulam = t * ln_wishart_b(prior.w0, prior.nu0);
    let mut term_q_pi = ln_gamma(alpha_hat);
    let mut term_q_mulam = 0.0;

    for (k, mode) in posterior.modes.iter().enumerate() {
        term_z += agg.n_t[k] * ln_pi[k];
        term_p_pi += (prior.alpha0 - 1.0) * ln_pi[k];

        let dm = mode.m - prior.m0;
        term_p_mulam += 0.5
            * ((prior.beta0 / (2.0 * std::f64::consts::PI)).ln() + ln_lam[k]
                - prior.beta0 / mode.beta
                - prior.beta0 * mode.nu * mode.w * dm * dm)
            + 0.5 * (prior.nu0 - 2.0) * ln_lam[k]
            - 0.5 * mode.nu * mode.w / prior.w0;

        term_q_pi += (mode.alpha - 1.0) * ln_pi[k] - ln_gamma(mode.alpha);

        let wishart_entropy =
            -ln_wishart_b(mode.w, mode.nu) - 0.5 * (mode.nu - 2.0) * ln_lam[k] + 0.5 * mode.nu;
        term_q_mulam += 0.5 * ln_lam[k]
            + 0.5 * (mode.beta / (2.0 * std::f64::consts::PI)).ln()
            - 0.5
            - wishart_entropy;
    }

    term_data + term_z + term_p_pi + term_p_mulam - agg.resp_entropy - term_q_pi - term_q_mulam
}

/// Completes a round: updates all hyperparameters (including the Wishart
/// scale) from the aggregates and evaluates the lower bound at the posterior
/// the round started from.
pub fn finalize_round(
    posterior: &GmmPosterior,
    prior: &GmmPrior,
    e_agg: &EAggregate,
    s_t: &[f64],
    round: usize,
) -> Result<(GmmPosterior, ElboValue)> {
    let t = posterior.n_modes();
    if e_agg.n_t.len() != t || s_t.len() != t {
        return Err(Error::Protocol("aggregate shape mismatch in finalize_round".into()));
    }

    let elbo = lower_bound(posterior, prior, e_agg);
    if !elbo.is_finite() {
        return Err(Error::Numerical(format!(
            "lower bound is not finite at round {round}"
        )));
    }

    let hyper = update_hyperparameters(prior, &e_agg.n_t, &e_agg.xbar_t);
    let alpha_hat: f64 = hyper.iter().map(|h| h.0).sum();
    let mut modes = Vec::with_capacity(t);
    for (k, (alpha, beta, nu, m)) in hyper.into_iter().enumerate() {
        let n = e_agg.n_t[k];
        let dx = e_agg.xbar_t[k] - prior.m0;
        let w_inv =
            1.0 / prior.w0 + (prior.beta0 * n) / (prior.beta0 + n) * dx * dx + n * s_t[k];
        if !(w_inv > 0.0) || !w_inv.is_finite() {
            return Err(Error::Numerical(format!(
                "wishart scale update produced non-positive precision for mode {k}"
            )));
        }
        let w = 1.0 / w_inv;
        let sigma = (nu * w).powf(-0.5).max(prior.sigma_floor);
        modes.push(GmmMode {
            alpha,
            beta,
            nu,
            m,
            w,
            pi: alpha / alpha_hat,
            mu: m,
            sigma,
        });
    }

    Ok((GmmPosterior { modes }, ElboValue { value: elbo, round }))
}

/// A client's view for one column fit. The trait carries only statistics, so
/// the fitting driver never observes raw values.
pub trait GmmClient {
    fn row_count(&self) -> usize;
    /// (min, max) over local values; `None` when the client has no rows.
    fn value_range(&self) -> Option<(f64, f64)>;
    fn e_step(&mut self, posterior: &GmmPosterior) -> ClientEStats;
    fn scatter(&mut self, xbar_t: &[f64]) -> ClientMStats;
}

/// In-memory client over a borrowed column slice.
pub struct SliceClient<'a> {
    values: &'a [f64],
    resp: Option<Responsibilities>,
}

impl<'a> SliceClient<'a> {
    pub fn new(values: &'a [f64]) -> Self {
        SliceClient { values, resp: None }
    }
}

impl GmmClient for SliceClient<'_> {
    fn row_count(&self) -> usize {
        self.values.len()
    }

    fn value_range(&self) -> Option<(f64, f64)> {
        if self.values.is_empty() {
            return None;
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in self.values {
            min = min.min(v);
            max = max.max(v);
        }
        Some((min, max))
    }

    fn e_step(&mut self, posterior: &GmmPosterior) -> ClientEStats {
        let (stats, resp) = e_step_local(self.values, posterior);
        self.resp = Some(resp);
        stats
    }

    fn scatter(&mut self, xbar_t: &[f64]) -> ClientMStats {
        let resp = self.resp.as_ref().expect("scatter called before e_step");
        m_step_scatter(self.values, resp, xbar_t)
    }
}

/// Result of a federated fit.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub posterior: GmmPosterior,
    /// Rounds actually executed.
    pub rounds: usize,
    pub final_elbo: f64,
    pub elbo_trace: Vec<ElboValue>,
    /// Total uniform-responsibility fallbacks across all clients and rounds.
    pub uniform_rows: u64,
    /// Mode count during fitting, before pruning.
    pub modes_before_prune: usize,
}

/// Fits one global mixture over column shards held by simulated clients.
pub fn fit_federated_gmm(shards: &[&[f64]], prior: &GmmPrior) -> Result<GmmFit> {
    let mut clients: Vec<SliceClient> = shards.iter().map(|s| SliceClient::new(s)).collect();
    fit_federated_gmm_clients(&mut clients, prior, &PlaintextSum)
}

/// Trait-based fit driver. Aggregation folds client payloads in slice order,
/// so the result is independent of any internal client concurrency.
pub fn fit_federated_gmm_clients<C: GmmClient>(
    clients: &mut [C],
    prior: &GmmPrior,
    aggregator: &dyn Aggregator,
) -> Result<GmmFit> {
    prior.validate()?;
    if clients.iter().all(|c| c.row_count() == 0) {
        return Err(Error::Config(
            "federated gmm fit requires at least one nonempty shard".into(),
        ));
    }
    for &v in clients
        .iter()
        .flat_map(|c| c.value_range())
        .flat_map(|(lo, hi)| [lo, hi])
        .collect::<Vec<_>>()
        .iter()
    {
        if !v.is_finite() {
            return Err(Error::Config("gmm fit requires finite values".into()));
        }
    }

    // Preliminary range round: global [min, max] for quantile initialization.
    let (min, max) = clients
        .iter()
        .filter_map(|c| c.value_range())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
            (lo.min(a), hi.max(b))
        });

    // A constant column needs a single mode; more would never separate.
    let t = if min == max { 1 } else { prior.t_max };
    // Means spread at quantile midpoints; starting widths cover half the data
    // range so every mode initially competes for every point, which lets
    // redundant modes drain instead of freezing into a tiling of the data.
    let init_sigma = (0.5 * (max - min)).max(prior.sigma_floor);
    let init_w = 1.0 / (prior.nu0 * init_sigma * init_sigma);
    let modes: Vec<GmmMode> = (0..t)
        .map(|k| {
            let m = min + (max - min) * (k as f64 + 0.5) / t as f64;
            GmmMode {
                alpha: prior.alpha0,
                beta: prior.beta0,
                nu: prior.nu0,
                m,
                w: init_w,
                pi: 1.0 / t as f64,
                mu: m,
                sigma: init_sigma,
            }
        })
        .collect();
    let mut posterior = GmmPosterior { modes };

    let mut elbo_trace: Vec<ElboValue> = Vec::new();
    let mut uniform_rows = 0u64;
    let mut rounds = 0usize;
    for round in 1..=prior.max_rounds {
        let e_stats: Vec<ClientEStats> =
            clients.iter_mut().map(|c| c.e_step(&posterior)).collect();
        let e_agg = aggregate_e_with(&e_stats, prior.m0, aggregator)?;
        let m_stats: Vec<ClientMStats> = clients
            .iter_mut()
            .map(|c| c.scatter(&e_agg.xbar_t))
            .collect();
        let s_t = aggregate_m_with(&m_stats, &e_agg.n_t, prior.w0, aggregator)?;
        let (next, elbo) = finalize_round(&posterior, prior, &e_agg, &s_t, round)?;
        uniform_rows += e_agg.uniform_rows;
        posterior = next;
        rounds = round;
        let converged = elbo_trace
            .last()
            .is_some_and(|prev| (elbo.value - prev.value).abs() < prior.conv_eps);
        elbo_trace.push(elbo);
        if converged {
            break;
        }
    }

    let final_elbo = elbo_trace.last().map(|e| e.value).unwrap_or(f64::NAN);
    let modes_before_prune = posterior.n_modes();
    let mut posterior = posterior
        .pruned(prior.prune_threshold)
        .merged(prior.merge_threshold, prior);
    if min == max {
        // Degenerate column: pin the mode to the constant and floor the
        // spread so encoding maps every cell to z = 0 and decoding returns
        // (numerically) the constant.
        let mode = &mut posterior.modes[0];
        mode.m = min;
        mode.mu = min;
        mode.sigma = prior.sigma_floor;
        mode.w = 1.0 / (mode.nu * mode.sigma * mode.sigma);
    }
    Ok(GmmFit {
        posterior,
        rounds,
        final_elbo,
        elbo_trace,
        uniform_rows,
        modes_before_prune,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn symmetric_posterior() -> GmmPosterior {
        let mode = |m: f64| GmmMode {
            alpha: 2.0,
            beta: 3.0,
            nu: 4.0,
            m,
            w: 0.5,
            pi: 0.5,
            mu: m,
            sigma: (4.0 * 0.5f64).powf(-0.5),
        };
        GmmPosterior {
            modes: vec![mode(-2.0), mode(2.0)],
        }
    }

    #[test]
    fn single_mode_responsibility_is_one() {
        let posterior = GmmPosterior {
            modes: vec![GmmMode {
                alpha: 1.0,
                beta: 1.0,
                nu: 3.0,
                m: 0.0,
                w: 1.0,
                pi: 1.0,
                mu: 0.0,
                sigma: 1.0,
            }],
        };
        let (stats, resp) = e_step_local(&[0.3, -7.0, 100.0], &posterior);
        for i in 0..3 {
            assert_eq!(resp.row(i), &[1.0]);
        }
        assert_eq!(stats.resp_sums, vec![3.0]);
    }

    #[test]
    fn symmetric_modes_split_center_value() {
        let (_, resp) = e_step_local(&[0.0], &symmetric_posterior());
        assert!((resp.row(0)[0] - 0.5).abs() < 1e-15);
        assert!((resp.row(0)[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn well_separated_values_split_mass_evenly() {
        // Modes near +-5: two values on each side should give resp_sums ~ [2, 2].
        let mode = |m: f64| GmmMode {
            alpha: 5.0,
            beta: 10.0,
            nu: 12.0,
            m,
            w: 1.0 / 12.0,
            pi: 0.5,
            mu: m,
            sigma: 1.0,
        };
        let posterior = GmmPosterior {
            modes: vec![mode(-5.0), mode(5.0)],
        };
        let (stats, _) = e_step_local(&[-5.1, -4.9, 4.9, 5.1], &posterior);
        assert!((stats.resp_sums[0] - 2.0).abs() < 1e-3);
        assert!((stats.resp_sums[1] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn responsibilities_sum_to_one_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f64> = (0..200).map(|_| rng.random_range(-10.0..10.0)).collect();
        let (_, resp) = e_step_local(&values, &symmetric_posterior());
        for i in 0..values.len() {
            let total: f64 = resp.row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_e_single_client_identity() {
        let posterior = symmetric_posterior();
        let (stats, _) = e_step_local(&[1.0, -1.0, 0.5], &posterior);
        let agg = aggregate_e(&[stats.clone()], 0.0).unwrap();
        assert_eq!(agg.n_t, stats.resp_sums);
        assert_eq!(agg.resp_entropy, stats.resp_entropy);
        assert_eq!(agg.data_fit, stats.data_fit);
    }

    #[test]
    fn aggregate_e_adds_masses() {
        let a = ClientEStats {
            resp_sums: vec![3.0, 1.0],
            weighted_sums: vec![6.0, 2.0],
            resp_entropy: -1.0,
            data_fit: -10.0,
            uniform_rows: 0,
        };
        let b = ClientEStats {
            resp_sums: vec![1.0, 3.0],
            weighted_sums: vec![1.0, 9.0],
            resp_entropy: -2.0,
            data_fit: -20.0,
            uniform_rows: 1,
        };
        let agg = aggregate_e(&[a, b], 0.0).unwrap();
        assert_eq!(agg.n_t, vec![4.0, 4.0]);
        assert_eq!(agg.xbar_t, vec![7.0 / 4.0, 11.0 / 4.0]);
        assert_eq!(agg.resp_entropy, -3.0);
        assert_eq!(agg.data_fit, -30.0);
        assert_eq!(agg.uniform_rows, 1);
    }

    #[test]
    fn empty_mode_takes_prior_mean() {
        let a = ClientEStats {
            resp_sums: vec![2.0, 0.0],
            weighted_sums: vec![4.0, 0.0],
            resp_entropy: 0.0,
            data_fit: 0.0,
            uniform_rows: 0,
        };
        let agg = aggregate_e(&[a], 7.5).unwrap();
        assert_eq!(agg.xbar_t[1], 7.5);
        assert!(agg.empty_modes[1]);
        assert!(!agg.empty_modes[0]);
    }

    #[test]
    fn hyperparameter_updates_match_formulas() {
        let mut prior = GmmPrior::with_modes(2);
        prior.alpha0 = 1.0;
        prior.beta0 = 1.0;
        prior.m0 = 0.0;
        // alpha = alpha0 + N
        let updates = update_hyperparameters(&prior, &[9.0, 0.0], &[1.0, 0.0]);
        assert_eq!(updates[0].0, 10.0);
        // N = 0 leaves the prior untouched
        assert_eq!(updates[1].0, 1.0);
        assert_eq!(updates[1].3, 0.0);
        // m = (beta0 m0 + N xbar) / beta
        let updates = update_hyperparameters(&prior, &[4.0], &[5.0]);
        assertcmp(updates[0].3, 4.0);
        fn assertcmp(a: f64, b: f64) {
            assert!((a - b).abs() < 1e-15, "{a} != {b}");
        }
    }

    #[test]
    fn wishart_update_matches_hand_computation() {
        // beta0=1, m0=0, N=1, xbar=2, S=0, w0=1 -> w^-1 = 1 + (1/2)*4 + 0 = 3.
        let mut prior = GmmPrior::with_modes(1);
        prior.alpha0 = 1.0;
        prior.beta0 = 1.0;
        prior.m0 = 0.0;
        prior.w0 = 1.0;
        let posterior = GmmPosterior {
            modes: vec![GmmMode {
                alpha: 1.0,
                beta: 1.0,
                nu: 3.0,
                m: 0.0,
                w: 1.0,
                pi: 1.0,
                mu: 0.0,
                sigma: 1.0,
            }],
        };
        let agg = EAggregate {
            n_t: vec![1.0],
            xbar_t: vec![2.0],
            resp_entropy: 0.0,
            data_fit: -1.0,
            empty_modes: vec![false],
            uniform_rows: 0,
        };
        let (next, _) = finalize_round(&posterior, &prior, &agg, &[0.0], 1).unwrap();
        assert!((next.modes[0].w - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_evidence_keeps_prior_wishart_scale() {
        let mut prior = GmmPrior::with_modes(1);
        prior.w0 = 0.25;
        let posterior = GmmPosterior {
            modes: vec![GmmMode {
                alpha: prior.alpha0,
                beta: prior.beta0,
                nu: prior.nu0,
                m: prior.m0,
                w: prior.w0,
                pi: 1.0,
                mu: prior.m0,
                sigma: 1.0,
            }],
        };
        let agg = EAggregate {
            n_t: vec![0.0],
            xbar_t: vec![prior.m0],
            resp_entropy: 0.0,
            data_fit: 0.0,
            empty_modes: vec![true],
            uniform_rows: 0,
        };
        let (next, _) = finalize_round(&posterior, &prior, &agg, &[1.0 / prior.w0], 1).unwrap();
        assert!((next.modes[0].w - 0.25).abs() < 1e-15);
    }

    #[test]
    fn aggregate_m_divides_by_mass() {
        let s = aggregate_m(
            &[ClientMStats {
                scatter: vec![8.0],
            }],
            &[4.0],
            1.0,
        )
        .unwrap();
        assert_eq!(s, vec![2.0]);
        // Identical values at the mean give zero scatter.
        let (_, resp) = e_step_local(
            &[3.0, 3.0],
            &GmmPosterior {
                modes: vec![GmmMode {
                    alpha: 1.0,
                    beta: 1.0,
                    nu: 3.0,
                    m: 3.0,
                    w: 1.0,
                    pi: 1.0,
                    mu: 3.0,
                    sigma: 1.0,
                }],
            },
        );
        let m = m_step_scatter(&[3.0, 3.0], &resp, &[3.0]);
        assert_eq!(m.scatter, vec![0.0]);
    }

    /// Data-fit term assembled from client payloads must equal the same term
    /// recomputed from (N_t, xbar_t, S_t) via the scatter decomposition.
    #[test]
    fn data_fit_routes_agree() {
        let posterior = symmetric_posterior();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, 2.0).unwrap();
        let values: Vec<f64> = (0..500).map(|_| normal.sample(&mut rng)).collect();
        let shards = [&values[..200], &values[200..]];
        let stats: Vec<ClientEStats> = shards
            .iter()
            .map(|s| e_step_local(s, &posterior).0)
            .collect();
        let agg = aggregate_e(&stats, 0.0).unwrap();
        let m_stats: Vec<ClientMStats> = shards
            .iter()
            .map(|s| {
                let (_, resp) = e_step_local(s, &posterior);
                m_step_scatter(s, &resp, &agg.xbar_t)
            })
            .collect();
        let s_t = aggregate_m(&m_stats, &agg.n_t, 1.0).unwrap();

        let ln_lam = posterior.expected_log_precision();
        let mut from_aggregates = 0.0;
        for (k, mode) in posterior.modes.iter().enumerate() {
            let dm = agg.xbar_t[k] - mode.m;
            from_aggregates += 0.5
                * agg.n_t[k]
                * (ln_lam[k]
                    - 1.0 / mode.beta
                    - mode.nu * mode.w * s_t[k]
                    - mode.nu * mode.w * dm * dm
                    - LN_2PI);
        }
        let rel = (from_aggregates - agg.data_fit).abs() / agg.data_fit.abs().max(1.0);
        assert!(rel < 1e-9, "routes differ: {from_aggregates} vs {}", agg.data_fit);
    }

    #[test]
    fn elbo_nondecreasing_on_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n1 = Normal::new(0.0, 1.0).unwrap();
        let n2 = Normal::new(6.0, 0.5).unwrap();
        let values: Vec<f64> = (0..400)
            .map(|i| {
                if i % 2 == 0 {
                    n1.sample(&mut rng)
                } else {
                    n2.sample(&mut rng)
                }
            })
            .collect();
        let mut prior = GmmPrior::with_modes(4);
        prior.m0 = 3.0;
        prior.conv_eps = 1e-12;
        prior.max_rounds = 60;
        let fit = fit_federated_gmm(&[&values[..150], &values[150..]], &prior).unwrap();
        for pair in fit.elbo_trace.windows(2) {
            assert!(
                pair[1].value >= pair[0].value - 1e-8,
                "elbo decreased: {} -> {} at round {}",
                pair[0].value,
                pair[1].value,
                pair[1].round
            );
        }
    }

    #[test]
    fn recovers_standard_normal_with_single_surviving_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 1.0).unwrap();
        let values: Vec<f64> = (0..3000).map(|_| n.sample(&mut rng)).collect();
        let shards = [&values[..1000], &values[1000..2000], &values[2000..]];
        let mut prior = GmmPrior::with_modes(3);
        prior.conv_eps = 1e-6;
        prior.max_rounds = 300;
        let fit = fit_federated_gmm(&shards, &prior).unwrap();
        assert_eq!(fit.posterior.n_modes(), 1, "pi: {:?}", pis(&fit.posterior));
        let mode = &fit.posterior.modes[0];
        assert!(mode.mu.abs() < 0.1, "mu = {}", mode.mu);
        assert!((mode.sigma - 1.0).abs() < 0.1, "sigma = {}", mode.sigma);
    }

    #[test]
    fn recovers_two_mode_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let lo = Normal::new(0.0, 1.0).unwrap();
        let hi = Normal::new(5.0, 1.0).unwrap();
        let values: Vec<f64> = (0..5000)
            .map(|_| {
                if rng.random::<f64>() < 0.5 {
                    lo.sample(&mut rng)
                } else {
                    hi.sample(&mut rng)
                }
            })
            .collect();
        let shards = [&values[..1700], &values[1700..3400], &values[3400..]];
        let mut prior = GmmPrior::with_modes(5);
        prior.conv_eps = 1e-6;
        prior.max_rounds = 300;
        let fit = fit_federated_gmm(&shards, &prior).unwrap();
        assert_eq!(fit.posterior.n_modes(), 2, "pi: {:?}", pis(&fit.posterior));
        let mut modes = fit.posterior.modes.clone();
        modes.sort_by(|a, b| a.mu.partial_cmp(&b.mu).unwrap());
        assert!(modes[0].mu.abs() < 0.2);
        assert!((modes[1].mu - 5.0).abs() < 0.2);
        assert!((modes[0].pi - 0.5).abs() < 0.05);
        assert!((modes[1].pi - 0.5).abs() < 0.05);
    }

    #[test]
    fn federated_equals_pooled() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n1 = Normal::new(-1.0, 0.7).unwrap();
        let n2 = Normal::new(3.0, 1.3).unwrap();
        let values: Vec<f64> = (0..900)
            .map(|i| {
                if i % 3 == 0 {
                    n1.sample(&mut rng)
                } else {
                    n2.sample(&mut rng)
                }
            })
            .collect();
        let mut prior = GmmPrior::with_modes(4);
        prior.m0 = 1.0;
        prior.conv_eps = 1e-30;
        prior.max_rounds = 12;
        let fed = fit_federated_gmm(&[&values[..300], &values[300..600], &values[600..]], &prior)
            .unwrap();
        let pooled = fit_federated_gmm(&[&values[..]], &prior).unwrap();
        assert_eq!(fed.rounds, pooled.rounds);
        assert_eq!(fed.posterior.n_modes(), pooled.posterior.n_modes());
        for (a, b) in fed.posterior.modes.iter().zip(&pooled.posterior.modes) {
            for (x, y) in [
                (a.alpha, b.alpha),
                (a.beta, b.beta),
                (a.nu, b.nu),
                (a.m, b.m),
                (a.w, b.w),
                (a.pi, b.pi),
                (a.sigma, b.sigma),
            ] {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
                assert!(rel < 1e-9, "field mismatch: {x} vs {y}");
            }
        }
    }

    #[test]
    fn constant_column_yields_floored_single_mode() {
        let values = vec![4.25; 50];
        let prior = GmmPrior::with_modes(6);
        let fit = fit_federated_gmm(&[&values[..20], &values[20..]], &prior).unwrap();
        assert_eq!(fit.posterior.n_modes(), 1);
        let mode = &fit.posterior.modes[0];
        assert!((mode.mu - 4.25).abs() < 1e-9);
        assert_eq!(mode.sigma, prior.sigma_floor);
    }

    #[test]
    fn all_empty_shards_rejected() {
        let prior = GmmPrior::with_modes(2);
        assert!(fit_federated_gmm(&[&[], &[]], &prior).is_err());
    }

    #[test]
    fn pruning_renormalizes_weights() {
        let posterior = GmmPosterior {
            modes: vec![
                GmmMode {
                    alpha: 1.0,
                    beta: 1.0,
                    nu: 3.0,
                    m: 0.0,
                    w: 1.0,
                    pi: 0.697,
                    mu: 0.0,
                    sigma: 1.0,
                },
                GmmMode {
                    alpha: 1.0,
                    beta: 1.0,
                    nu: 3.0,
                    m: 1.0,
                    w: 1.0,
                    pi: 0.003,
                    mu: 1.0,
                    sigma: 1.0,
                },
                GmmMode {
                    alpha: 1.0,
                    beta: 1.0,
                    nu: 3.0,
                    m: 2.0,
                    w: 1.0,
                    pi: 0.3,
                    mu: 2.0,
                    sigma: 1.0,
                },
            ],
        };
        let pruned = posterior.pruned(0.005);
        assert_eq!(pruned.n_modes(), 2);
        let total: f64 = pruned.modes.iter().map(|m| m.pi).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(pruned.modes[0].m, 0.0);
        assert_eq!(pruned.modes[1].m, 2.0);
    }

    fn pis(p: &GmmPosterior) -> Vec<f64> {
        p.modes.iter().map(|m| m.pi).collect()
    }
}
