//! End-to-end pipeline driver: partition, fit, synthesize, evaluate.
//!
//! Federation is simulated in-process but keeps a strict message boundary:
//! client tables live inside [`ClientNode`]s, and everything the server-side
//! code consumes is a statistics payload (mixture E/M stats, category sets
//! and counts, local moments, model weights). Synthesis itself takes no table
//! at all. A wire transport would replace only the function calls between the
//! two sides.
//!
//! Every stage is deterministic from (config, master seed): stream seeds are
//! derived per phase and per client, so reruns produce byte-identical
//! artifacts, tables, and reports.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::artifact::{ModeParams, StatsArtifact};
use crate::covariance::{
    add_dp_noise, aggregate_covariance, local_moments, psd_cholesky, DpParams, LocalMoments,
};
use crate::error::{Error, Result};
use crate::gmm::{fit_federated_gmm_clients, GmmFit, GmmPrior, PlaintextSum, SliceClient};
use crate::ledger::{closed_form, CommLedger, Direction, Phase};
use crate::metrics::{similarity_report, SimilarityReport};
use crate::partition::{dirichlet_partition, PartitionPlan};
use crate::seed;
use crate::synthesis::{augment_client, synthesize, SynthesisRequest};
use crate::table::{load_table_with_schema, write_csv, Table};
use crate::train::{train_federated, Featurizer, TrainConfig, TrainOutcome};
use crate::transforms::{encode_table, IcdmCodec, MdtCodec, ModePolicy, TableCodecs};

/// Full pipeline configuration, loaded from one TOML document.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct PipelineConfig {
    /// Master seed; all phase seeds derive from it.
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub gmm: GmmSection,
    #[serde(default)]
    pub transform: TransformSection,
    #[serde(default)]
    pub privacy: PrivacySection,
    #[serde(default)]
    pub synthesis: SynthesisSection,
    #[serde(default)]
    pub train: TrainSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct DataSection {
    pub train_csv: PathBuf,
    pub schema: PathBuf,
    /// Required by `evaluate`.
    pub test_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default)]
pub struct PartitionSection {
    pub clients: usize,
    pub beta: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            clients: 5,
            beta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default)]
pub struct GmmSection {
    pub modes: usize,
    pub max_rounds: usize,
    pub conv_eps: f64,
    pub prune_threshold: f64,
    pub merge_threshold: f64,
    pub sigma_floor: f64,
}

impl Default for GmmSection {
    fn default() -> Self {
        let p = GmmPrior::with_modes(10);
        GmmSection {
            modes: 10,
            max_rounds: p.max_rounds,
            conv_eps: p.conv_eps,
            prune_threshold: p.prune_threshold,
            merge_threshold: p.merge_threshold,
            sigma_floor: p.sigma_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default)]
pub struct TransformSection {
    pub lambda: f64,
    /// "sample" or "argmax".
    pub mode_policy: String,
}

impl Default for TransformSection {
    fn default() -> Self {
        TransformSection {
            lambda: crate::transforms::DEFAULT_LAMBDA,
            mode_policy: ModePolicy::default().as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default)]
pub struct PrivacySection {
    /// Privacy budget; `inf` disables the Gaussian mechanism.
    #[serde(with = "crate::covariance::epsilon_serde")]
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for PrivacySection {
    fn default() -> Self {
        PrivacySection {
            epsilon: f64::INFINITY,
            delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default)]
pub struct SynthesisSection {
    /// Either the string "match_local" or a fixed row count.
    pub rows_per_client: RowsPolicy,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        SynthesisSection {
            rows_per_client: RowsPolicy::MatchLocal,
        }
    }
}

/// Synthetic volume per client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowsPolicy {
    /// N_s = N_k: doubles each client without imbalance.
    MatchLocal,
    Fixed(usize),
}

impl RowsPolicy {
    pub fn resolve(&self, local_rows: usize) -> usize {
        match self {
            RowsPolicy::MatchLocal => local_rows,
            RowsPolicy::Fixed(n) => *n,
        }
    }
}

impl Serialize for RowsPolicy {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RowsPolicy::MatchLocal => ser.serialize_str("match_local"),
            RowsPolicy::Fixed(n) => ser.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for RowsPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(usize),
            Tag(String),
        }
        match Repr::deserialize(de)? {
            Repr::Count(n) => Ok(RowsPolicy::Fixed(n)),
            Repr::Tag(s) if s == "match_local" => Ok(RowsPolicy::MatchLocal),
            Repr::Tag(s) => Err(serde::de::Error::custom(format!(
                "rows_per_client must be a count or \"match_local\", got '{s}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default)]
pub struct TrainSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            rounds: t.rounds,
            local_epochs: t.local_epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl PipelineConfig {
    /// Parses a TOML config; relative paths resolve against the file's parent.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: PipelineConfig = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| {
            if p.is_relative() {
                base.join(p)
            } else {
                p.clone()
            }
        };
        cfg.data.train_csv = resolve(&cfg.data.train_csv);
        cfg.data.schema = resolve(&cfg.data.schema);
        cfg.data.test_csv = cfg.data.test_csv.as_ref().map(|p| resolve(p));
        cfg.output.dir = resolve(&cfg.output.dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.data.train_csv.exists() {
            return Err(Error::Config(format!(
                "training csv not found: {}",
                self.data.train_csv.display()
            )));
        }
        if !self.data.schema.exists() {
            return Err(Error::Config(format!(
                "schema file not found: {}",
                self.data.schema.display()
            )));
        }
        if let Some(test) = &self.data.test_csv {
            if !test.exists() {
                return Err(Error::Config(format!(
                    "test csv not found: {}",
                    test.display()
                )));
            }
        }
        self.partition_plan().validate()?;
        self.gmm_prior(0.0, 1.0)?.validate()?;
        ModePolicy::parse(&self.transform.mode_policy)?;
        if !(self.transform.lambda > 0.0 && self.transform.lambda < 0.5) {
            return Err(Error::Config("transform.lambda must be in (0, 0.5)".into()));
        }
        // Exercises the epsilon/delta checks.
        crate::covariance::gaussian_sigma(self.privacy.epsilon, self.privacy.delta, 2.0)?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn partition_plan(&self) -> PartitionPlan {
        PartitionPlan {
            beta: self.partition.beta,
            num_clients: self.partition.clients,
            seed: seed::derive(self.seed, seed::stream::PARTITION),
        }
    }

    pub fn gmm_prior(&self, min: f64, max: f64) -> Result<GmmPrior> {
        let mut prior = GmmPrior::for_range(self.gmm.modes, min, max);
        prior.max_rounds = self.gmm.max_rounds;
        prior.conv_eps = self.gmm.conv_eps;
        prior.prune_threshold = self.gmm.prune_threshold;
        prior.merge_threshold = self.gmm.merge_threshold;
        prior.sigma_floor = self.gmm.sigma_floor;
        Ok(prior)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            rounds: self.train.rounds,
            local_epochs: self.train.local_epochs,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            seed: seed::derive(self.seed, seed::stream::TRAIN),
        }
    }

    fn mode_policy(&self) -> ModePolicy {
        ModePolicy::parse(&self.transform.mode_policy).expect("validated")
    }

    fn stats_path(&self) -> PathBuf {
        self.output.dir.join("stats.json")
    }

    fn ledger_path(&self) -> PathBuf {
        self.output.dir.join("ledger.csv")
    }
}

/// A simulated client: owns its raw shard. Only statistics leave through the
/// methods below; the table itself is private.
pub struct ClientNode {
    pub id: u32,
    table: Table,
}

impl ClientNode {
    pub fn new(id: u32, table: Table) -> Self {
        ClientNode { id, table }
    }

    pub fn row_count(&self) -> usize {
        self.table.row_count()
    }

    /// Raw values of one continuous column, for the client-side half of a
    /// mixture fit. Stays inside the federation driver.
    fn column_values(&self, index: usize) -> Result<Vec<f64>> {
        self.table.continuous_column(index)
    }

    /// Distinct category tokens per discrete column (schema order).
    pub fn category_sets(&self) -> Result<Vec<BTreeSet<String>>> {
        let mut sets = Vec::new();
        for idx in self.table.schema().discrete_indices() {
            let mut set = BTreeSet::new();
            for token in self.table.discrete_column(idx)? {
                set.insert(token.to_string());
            }
            sets.push(set);
        }
        Ok(sets)
    }

    /// Dense local counts over the broadcast global category lists.
    pub fn category_counts(&self, global: &[Vec<String>]) -> Result<Vec<Vec<u64>>> {
        let disc = self.table.schema().discrete_indices();
        if disc.len() != global.len() {
            return Err(Error::Protocol("category list count mismatch".into()));
        }
        let mut counts: Vec<Vec<u64>> = global.iter().map(|g| vec![0; g.len()]).collect();
        for (slot, idx) in disc.iter().enumerate() {
            for token in self.table.discrete_column(*idx)? {
                if let Some(j) = global[slot].iter().position(|c| c == token) {
                    counts[slot][j] += 1;
                }
            }
        }
        Ok(counts)
    }

    /// Encodes the local shard with the broadcast codecs and returns only
    /// the first and second moments.
    pub fn local_moments(&self, codecs: &TableCodecs, master_seed: u64) -> Result<LocalMoments> {
        let encode_seed = seed::derive_chain(master_seed, &[seed::stream::ENCODE, self.id as u64]);
        let encoded = encode_table(&self.table, codecs, encode_seed)?;
        local_moments(&encoded)
    }

    /// Synthesizes locally from broadcast statistics and unions with the
    /// local shard.
    pub fn augmented_table(
        &self,
        codecs: &TableCodecs,
        factor: &crate::covariance::CholFactor,
        request: &SynthesisRequest,
    ) -> Result<Table> {
        let synth = synthesize(codecs, factor, request)?;
        Ok(augment_client(&self.table, &synth)?.table)
    }

    pub fn table(&self) -> &Table {
        &self.table
    }
}

/// Per-client synthesis seed: derived from (master seed, client id) so
/// client tables differ but reproduce.
pub fn client_synthesis_seed(master_seed: u64, client: u32) -> u64 {
    seed::derive_chain(master_seed, &[seed::stream::SYNTHESIS, client as u64])
}

fn load_train_table(cfg: &PipelineConfig) -> Result<Table> {
    load_table_with_schema(&cfg.data.train_csv, &cfg.data.schema)
}

fn make_clients(cfg: &PipelineConfig, table: &Table) -> Result<Vec<ClientNode>> {
    let shards = dirichlet_partition(table, &cfg.partition_plan())?;
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(k, t)| ClientNode::new(k as u32, t))
        .collect())
}

/// Writes the partition to `client_<k>.csv` and returns the shards.
pub fn run_partition(cfg: &PipelineConfig) -> Result<Vec<Table>> {
    let table = load_train_table(cfg)?;
    let clients = make_clients(cfg, &table)?;
    std::fs::create_dir_all(&cfg.output.dir)?;
    for client in &clients {
        let path = cfg.output.dir.join(format!("client_{}.csv", client.id));
        let file = std::fs::File::create(path)?;
        write_csv(client.table(), file, None)?;
    }
    Ok(clients.into_iter().map(|c| c.table).collect())
}

/// Fit metadata kept for the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostics {
    pub shard_sizes: Vec<usize>,
    pub gmm_rounds: Vec<usize>,
    pub clamp_events: u64,
    pub repair_shift: f64,
    pub uniform_rows: u64,
}

pub struct FitOutput {
    pub artifact: StatsArtifact,
    pub diagnostics: FitDiagnostics,
}

/// Executes the statistics flow: federated mixtures per continuous column,
/// global frequencies and ICDM, per-client encoding and moments, covariance
/// with optional noise, Cholesky. Persists `stats.json` and `ledger.csv`.
pub fn run_fit(cfg: &PipelineConfig) -> Result<FitOutput> {
    let table = load_train_table(cfg)?;
    let clients = make_clients(cfg, &table)?;
    let schema = Arc::clone(table.schema());
    let ledger = CommLedger::new();
    let policy = cfg.mode_policy();
    let lambda = cfg.transform.lambda;

    // Mixture fits, one continuous column at a time.
    let mut continuous_codecs: Vec<(MdtCodec, IcdmCodec)> = Vec::new();
    let mut gmm_meta: Vec<(Vec<ModeParams>, usize, f64)> = Vec::new();
    let mut gmm_rounds = Vec::new();
    let mut uniform_rows = 0u64;
    for &col in &schema.continuous_indices() {
        let name = schema.columns()[col].name.clone();
        let columns: Vec<Vec<f64>> = clients
            .iter()
            .map(|c| c.column_values(col))
            .collect::<Result<_>>()?;
        let (min, max) = columns
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            });
        if !min.is_finite() {
            return Err(Error::Config(format!(
                "continuous column '{name}' has no values to fit"
            )));
        }
        let prior = cfg.gmm_prior(min, max)?;
        let mut slice_clients: Vec<SliceClient> =
            columns.iter().map(|c| SliceClient::new(c)).collect();
        let fit: GmmFit = fit_federated_gmm_clients(&mut slice_clients, &prior, &PlaintextSum)?;

        // Per-round traffic: (3t+2) up / (6t+1) down per client, plus the
        // one-time range scan.
        let t = prior.t_max as u64;
        let m = fit.rounds as u64;
        for client in &clients {
            ledger.record(
                Phase::GmmRound,
                Direction::Upload,
                client.id,
                closed_form::gmm_range_upload_per_column(1),
            );
            ledger.record(
                Phase::GmmRound,
                Direction::Upload,
                client.id,
                closed_form::gmm_upload_per_column(1, t, m),
            );
            ledger.record(
                Phase::GmmRound,
                Direction::Download,
                client.id,
                closed_form::gmm_download_per_column(1, t, m),
            );
        }

        gmm_rounds.push(fit.rounds);
        uniform_rows += fit.uniform_rows;
        gmm_meta.push((
            fit.posterior
                .modes
                .iter()
                .map(|m| ModeParams {
                    pi: m.pi,
                    mu: m.mu,
                    sigma: m.sigma,
                    alpha: m.alpha,
                    beta: m.beta,
                    nu: m.nu,
                    w: m.w,
                })
                .collect(),
            fit.rounds,
            fit.final_elbo,
        ));
        let mdt = MdtCodec::from_posterior(name.clone(), &fit.posterior, policy)?;
        let indicator = IcdmCodec::for_mode_indicator(name, &mdt, lambda)?;
        continuous_codecs.push((mdt, indicator));
    }

    // Frequency phase: category sets up, union down, dense counts up,
    // global frequencies down.
    let discrete_indices = schema.discrete_indices();
    let mut global_sets: Vec<BTreeSet<String>> = vec![BTreeSet::new(); discrete_indices.len()];
    for client in &clients {
        let sets = client.category_sets()?;
        let token_bytes: u64 = sets
            .iter()
            .flat_map(|s| s.iter())
            .map(|t| t.len() as u64)
            .sum();
        ledger.record_with_tokens(Phase::Frequency, Direction::Upload, client.id, 0, token_bytes);
        for (acc, s) in global_sets.iter_mut().zip(sets) {
            acc.extend(s);
        }
    }
    let global_categories: Vec<Vec<String>> = global_sets
        .into_iter()
        .map(|s| s.into_iter().collect())
        .collect();
    let union_bytes: u64 = global_categories
        .iter()
        .flat_map(|g| g.iter())
        .map(|t| t.len() as u64)
        .sum();
    let total_categories: u64 = global_categories.iter().map(|g| g.len() as u64).sum();
    let mut count_sums: Vec<Vec<u64>> = global_categories
        .iter()
        .map(|g| vec![0; g.len()])
        .collect();
    for client in &clients {
        ledger.record_with_tokens(Phase::Frequency, Direction::Download, client.id, 0, union_bytes);
        let counts = client.category_counts(&global_categories)?;
        let uploaded: u64 = counts.iter().map(|c| c.len() as u64).sum();
        ledger.record(Phase::Frequency, Direction::Upload, client.id, uploaded);
        for (acc, c) in count_sums.iter_mut().zip(counts) {
            for (a, v) in acc.iter_mut().zip(c) {
                *a += v;
            }
        }
    }
    for client in &clients {
        ledger.record(Phase::Frequency, Direction::Download, client.id, total_categories);
    }
    let mut discrete_codecs = Vec::with_capacity(discrete_indices.len());
    for (slot, &col) in discrete_indices.iter().enumerate() {
        let name = schema.columns()[col].name.clone();
        let total: u64 = count_sums[slot].iter().sum();
        if total == 0 {
            return Err(Error::Config(format!(
                "discrete column '{name}' has no category observations"
            )));
        }
        let freqs: Vec<(String, f64)> = global_categories[slot]
            .iter()
            .zip(&count_sums[slot])
            .map(|(cat, cnt)| (cat.clone(), *cnt as f64 / total as f64))
            .collect();
        discrete_codecs.push(IcdmCodec::from_frequencies(name, &freqs, lambda)?);
    }

    let codecs = TableCodecs::new(Arc::clone(&schema), continuous_codecs, discrete_codecs)?;

    // Moments phase: clients with rows upload E(X_k) and E(X_k^T X_k).
    let mut moments = Vec::new();
    for client in &clients {
        if client.row_count() == 0 {
            continue;
        }
        let m = client.local_moments(&codecs, cfg.seed)?;
        // Actual payload size: E(X_k) is l scalars, E(X_k^T X_k) is l*l.
        let uploaded = (m.mean.len() + m.second_moment.len()) as u64;
        moments.push(m);
        ledger.record(Phase::Moments, Direction::Upload, client.id, uploaded);
    }
    let cov = aggregate_covariance(&moments)?;
    let dp = DpParams::new(
        cfg.privacy.epsilon,
        cfg.privacy.delta,
        seed::derive(cfg.seed, seed::stream::DP_NOISE),
    )?;
    let noisy = add_dp_noise(&cov, &dp);
    let factor = psd_cholesky(&noisy)?;
    for client in &clients {
        // The dense l x l factor goes to every client.
        ledger.record(
            Phase::CovarianceBroadcast,
            Direction::Download,
            client.id,
            factor.u.len() as u64,
        );
    }

    let artifact = StatsArtifact::from_parts(&codecs, &gmm_meta, &noisy, &factor, dp)?;
    std::fs::create_dir_all(&cfg.output.dir)?;
    artifact.save(&cfg.stats_path())?;
    let file = std::fs::File::create(cfg.ledger_path())?;
    ledger.write_csv(file)?;

    let diagnostics = FitDiagnostics {
        shard_sizes: clients.iter().map(|c| c.row_count()).collect(),
        gmm_rounds,
        clamp_events: cov.clamp_events,
        repair_shift: factor.repair_shift,
        uniform_rows,
    };
    write_manifest(cfg, Some(&diagnostics), None, None)?;
    Ok(FitOutput {
        artifact,
        diagnostics,
    })
}

/// Loads the artifact and synthesizes one table per client, persisted as
/// `client_<k>_synth.csv`.
pub fn run_synthesize(cfg: &PipelineConfig) -> Result<Vec<Table>> {
    let artifact = StatsArtifact::load(&cfg.stats_path())?;
    let codecs = artifact.to_codecs()?;
    let factor = artifact.chol_factor();
    let table = load_train_table(cfg)?;
    let clients = make_clients(cfg, &table)?;

    let mut outputs = Vec::with_capacity(clients.len());
    let mut synth_rows = Vec::with_capacity(clients.len());
    for client in &clients {
        let request = SynthesisRequest {
            n_rows: cfg.synthesis.rows_per_client.resolve(client.row_count()),
            seed: client_synthesis_seed(cfg.seed, client.id),
        };
        let synth = synthesize(&codecs, &factor, &request)?;
        let path = cfg.output.dir.join(format!("client_{}_synth.csv", client.id));
        let file = std::fs::File::create(path)?;
        write_csv(&synth, file, None)?;
        synth_rows.push(synth.row_count());
        outputs.push(synth);
    }
    write_manifest(cfg, None, Some(&synth_rows), None)?;
    Ok(outputs)
}

/// Evaluation bundle: similarity plus raw-vs-augmented learning curves.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationSummary {
    pub avg_jsd: Option<f64>,
    pub avg_wd: Option<f64>,
    pub raw_final_accuracy: f64,
    pub augmented_final_accuracy: f64,
    pub raw_final_rocauc: Option<f64>,
    pub augmented_final_rocauc: Option<f64>,
}

pub struct EvaluateOutput {
    pub similarity: SimilarityReport,
    pub raw: TrainOutcome,
    pub augmented: TrainOutcome,
    pub summary: EvaluationSummary,
}

/// Scores synthetic data against the real pool and trains the FedAvg probe
/// on raw vs augmented shards. Writes `similarity.{json,csv}`, `curves.csv`,
/// an updated `ledger.csv`, and the manifest.
pub fn run_evaluate(cfg: &PipelineConfig) -> Result<EvaluateOutput> {
    let test_path = cfg.data.test_csv.as_ref().ok_or_else(|| {
        Error::Config("evaluate requires data.test_csv in the configuration".into())
    })?;
    let artifact = StatsArtifact::load(&cfg.stats_path())?;
    let codecs = artifact.to_codecs()?;
    let factor = artifact.chol_factor();
    let table = load_train_table(cfg)?;
    let test_table = load_table_with_schema(test_path, &cfg.data.schema)?;
    if test_table.schema().as_ref() != table.schema().as_ref() {
        return Err(Error::Schema("test schema differs from training schema".into()));
    }
    let clients = make_clients(cfg, &table)?;

    // Synthetic tables regenerate deterministically from the artifact; the
    // persisted CSVs are the same rows.
    let mut synthetic = Vec::with_capacity(clients.len());
    for client in &clients {
        let request = SynthesisRequest {
            n_rows: cfg.synthesis.rows_per_client.resolve(client.row_count()),
            seed: client_synthesis_seed(cfg.seed, client.id),
        };
        synthetic.push(synthesize(&codecs, &factor, &request)?);
    }

    // Statistical similarity: pooled real vs pooled synthetic.
    let mut pooled_synth = synthetic[0].clone();
    for s in &synthetic[1..] {
        pooled_synth = pooled_synth.concat(s)?;
    }
    let similarity = similarity_report(
        &table,
        &pooled_synth,
        seed::derive(cfg.seed, seed::stream::METRICS),
    )?;

    // FedAvg probe on raw and augmented shards.
    let featurizer = Featurizer::from_codecs(&codecs);
    let test = featurizer.featurize(&test_table)?;
    let raw_shards = clients
        .iter()
        .map(|c| featurizer.featurize(c.table()))
        .collect::<Result<Vec<_>>>()?;
    let augmented_shards = clients
        .iter()
        .zip(&synthetic)
        .map(|(c, s)| {
            let aug = augment_client(c.table(), s)?;
            featurizer.featurize(&aug.table)
        })
        .collect::<Result<Vec<_>>>()?;

    let ledger = if cfg.ledger_path().exists() {
        let file = std::fs::File::open(cfg.ledger_path())?;
        CommLedger::read_csv(file)?
    } else {
        CommLedger::new()
    };
    ledger.clear_phase(Phase::ModelRound);

    let mut train_cfg = cfg.train_config();
    train_cfg.seed = seed::derive_chain(cfg.seed, &[seed::stream::TRAIN, 0]);
    let raw = train_federated(&raw_shards, &test, &train_cfg, Some(&ledger))?;
    train_cfg.seed = seed::derive_chain(cfg.seed, &[seed::stream::TRAIN, 1]);
    let augmented = train_federated(&augmented_shards, &test, &train_cfg, Some(&ledger))?;

    std::fs::create_dir_all(&cfg.output.dir)?;
    std::fs::write(
        cfg.output.dir.join("similarity.json"),
        serde_json::to_string_pretty(&similarity)? + "\n",
    )?;
    {
        let mut w = csv::Writer::from_writer(std::fs::File::create(
            cfg.output.dir.join("similarity.csv"),
        )?);
        w.write_record(["column", "kind", "score"])?;
        for c in &similarity.per_column {
            w.write_record([c.column.as_str(), c.kind.as_str(), &c.score.to_string()])?;
        }
        w.flush()?;
    }
    {
        let mut w =
            csv::Writer::from_writer(std::fs::File::create(cfg.output.dir.join("curves.csv"))?);
        w.write_record(["run", "round", "accuracy", "rocauc"])?;
        for (name, outcome) in [("raw", &raw), ("augmented", &augmented)] {
            for point in &outcome.curve {
                w.write_record([
                    name.to_string(),
                    point.round.to_string(),
                    point.metrics.accuracy.to_string(),
                    point
                        .metrics
                        .rocauc
                        .map(|a| a.to_string())
                        .unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
    }
    let file = std::fs::File::create(cfg.ledger_path())?;
    ledger.write_csv(file)?;

    let last = |o: &TrainOutcome| o.curve.last().map(|p| p.metrics).expect("nonempty curve");
    let (raw_last, aug_last) = (last(&raw), last(&augmented));
    let summary = EvaluationSummary {
        avg_jsd: similarity.avg_jsd,
        avg_wd: similarity.avg_wd,
        raw_final_accuracy: raw_last.accuracy,
        augmented_final_accuracy: aug_last.accuracy,
        raw_final_rocauc: raw_last.rocauc,
        augmented_final_rocauc: aug_last.rocauc,
    };
    write_manifest(cfg, None, None, Some(&summary))?;
    Ok(EvaluateOutput {
        similarity,
        raw,
        augmented,
        summary,
    })
}

/// Runs fit, synthesize, and evaluate in sequence.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<EvaluateOutput> {
    run_fit(cfg)?;
    run_synthesize(cfg)?;
    run_evaluate(cfg)
}

#[derive(Debug, Clone, Serialize)]
struct LedgerLine {
    phase: String,
    direction: String,
    measured_scalars: u64,
    formula_scalars: Option<u64>,
    token_bytes: u64,
    payload_bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
struct SeedTable {
    master: u64,
    partition: u64,
    dp_noise: u64,
    train: u64,
    metrics: u64,
}

/// The manifest is rebuilt deterministically from config plus whatever
/// artifacts exist on disk, so stage reruns leave identical bytes.
fn write_manifest(
    cfg: &PipelineConfig,
    fit: Option<&FitDiagnostics>,
    synth_rows: Option<&[usize]>,
    evaluation: Option<&EvaluationSummary>,
) -> Result<()> {
    std::fs::create_dir_all(&cfg.output.dir)?;
    let manifest_path = cfg.output.dir.join("manifest.json");
    let previous: Option<serde_json::Value> = std::fs::read_to_string(&manifest_path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let keep = |key: &str| -> Option<serde_json::Value> {
        previous.as_ref().and_then(|p| p.get(key)).cloned()
    };

    let fit_value = match fit {
        Some(f) => Some(serde_json::to_value(f)?),
        None => keep("fit"),
    };
    let synth_value: Option<Vec<usize>> = match synth_rows {
        Some(rows) => Some(rows.to_vec()),
        None => keep("synthesis_rows").and_then(|v| serde_json::from_value(v).ok()),
    };
    let eval_value: Option<EvaluationSummary> = match evaluation {
        Some(e) => Some(e.clone()),
        None => None,
    };
    let eval_json = match (&eval_value, keep("evaluation")) {
        (Some(e), _) => Some(serde_json::to_value(e)?),
        (None, prev) => prev,
    };

    let ledger_lines = if cfg.ledger_path().exists() {
        let file = std::fs::File::open(cfg.ledger_path())?;
        let ledger = CommLedger::read_csv(file)?;
        Some(ledger_comparison(cfg, &ledger)?)
    } else {
        None
    };

    // Assemble through Value so preserved sections keep their exact shape.
    let mut doc = serde_json::Map::new();
    doc.insert("version".into(), serde_json::json!(crate::artifact::ARTIFACT_VERSION));
    doc.insert("config".into(), serde_json::to_value(cfg)?);
    doc.insert(
        "seeds".into(),
        serde_json::to_value(SeedTable {
            master: cfg.seed,
            partition: seed::derive(cfg.seed, seed::stream::PARTITION),
            dp_noise: seed::derive(cfg.seed, seed::stream::DP_NOISE),
            train: seed::derive(cfg.seed, seed::stream::TRAIN),
            metrics: seed::derive(cfg.seed, seed::stream::METRICS),
        })?,
    );
    if let Some(v) = fit_value {
        doc.insert("fit".into(), v);
    }
    if let Some(v) = synth_value {
        doc.insert("synthesis_rows".into(), serde_json::to_value(v)?);
    }
    if let Some(v) = eval_json {
        doc.insert("evaluation".into(), v);
    }
    if let Some(v) = ledger_lines {
        doc.insert("ledger".into(), serde_json::to_value(v)?);
    }
    std::fs::write(
        manifest_path,
        serde_json::to_string_pretty(&serde_json::Value::Object(doc))? + "\n",
    )?;
    Ok(())
}

/// Measured per-phase totals next to the closed-form expectations evaluated
/// on this run's dimensions.
fn ledger_comparison(cfg: &PipelineConfig, ledger: &CommLedger) -> Result<Vec<LedgerLine>> {
    let summary = ledger.summarize();
    // Dimensions from the artifact when present.
    let (k, l, total_categories, gmm_formula_up, gmm_formula_down) =
        match StatsArtifact::load(&cfg.stats_path()) {
            Ok(artifact) => {
                let schema = artifact.schema()?;
                let k = cfg.partition.clients as u64;
                let l = artifact.covariance.l as u64;
                let cats: u64 = artifact
                    .icdm
                    .iter()
                    .map(|c| c.intervals.len() as u64)
                    .sum();
                let t = cfg.gmm.modes as u64;
                let up: u64 = artifact
                    .gmm
                    .iter()
                    .map(|g| closed_form::gmm_upload_per_column(k, t, g.rounds as u64))
                    .sum::<u64>()
                    + closed_form::gmm_range_upload_per_column(k) * schema.n_continuous() as u64;
                let down: u64 = artifact
                    .gmm
                    .iter()
                    .map(|g| closed_form::gmm_download_per_column(k, t, g.rounds as u64))
                    .sum();
                (k, l, cats, up, down)
            }
            Err(_) => (cfg.partition.clients as u64, 0, 0, 0, 0),
        };
    let mut lines = Vec::new();
    for pt in &summary.per_phase {
        let formula = match (pt.phase, pt.direction) {
            (Phase::Frequency, Direction::Upload) => {
                Some(closed_form::frequency_upload(k, total_categories))
            }
            (Phase::Frequency, Direction::Download) => {
                Some(closed_form::frequency_download(k, total_categories))
            }
            (Phase::Moments, Direction::Upload) => Some(closed_form::covariance_upload(k, l)),
            (Phase::CovarianceBroadcast, Direction::Download) => {
                Some(closed_form::covariance_download(k, l))
            }
            (Phase::GmmRound, Direction::Upload) => Some(gmm_formula_up),
            (Phase::GmmRound, Direction::Download) => Some(gmm_formula_down),
            _ => None,
        };
        lines.push(LedgerLine {
            phase: pt.phase.as_str().to_string(),
            direction: pt.direction.as_str().to_string(),
            measured_scalars: pt.totals.scalar_count,
            formula_scalars: formula,
            token_bytes: pt.totals.token_bytes,
            payload_bytes: pt.totals.payload_bytes,
        });
    }
    Ok(lines)
}
