//! The persisted statistics bundle that fully determines synthesis: mixture
//! posteriors per continuous column, category codecs per discrete column and
//! per mode indicator, the global covariance with its factor, and the privacy
//! parameters. Serialization is plain JSON with a fixed field order, so
//! serialize -> deserialize -> serialize is byte-identical.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::covariance::{CholFactor, DpParams, GlobalCovariance};
use crate::error::{Error, Result};
use crate::table::{ColumnSchema, Schema};
use crate::transforms::{
    EncodedRole, IcdmCodec, IcdmInterval, MdtCodec, MdtMode, ModePolicy, TableCodecs,
};

pub const ARTIFACT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeParams {
    pub pi: f64,
    pub mu: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnGmm {
    pub column: String,
    pub modes: Vec<ModeParams>,
    pub rounds: usize,
    pub final_elbo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSpec {
    pub category: String,
    pub frequency: f64,
    pub q_low: f64,
    pub q_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnIcdm {
    pub column: String,
    pub intervals: Vec<IntervalSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub role: String,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub l: usize,
    /// Row-major l x l matrix.
    pub sigma: Vec<f64>,
    pub clamped: bool,
    pub clamp_events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CholeskySpec {
    /// Row-major l x l lower-triangular factor.
    pub u: Vec<f64>,
    pub repair_shift: f64,
}

/// Everything a client needs to synthesize, in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsArtifact {
    pub version: String,
    pub columns: Vec<ColumnSchema>,
    pub lambda: f64,
    pub mode_policy: String,
    pub layout: Vec<LayoutEntry>,
    pub gmm: Vec<ColumnGmm>,
    pub mode_indicators: Vec<ColumnIcdm>,
    pub icdm: Vec<ColumnIcdm>,
    pub covariance: CovarianceSpec,
    pub cholesky: CholeskySpec,
    pub dp: DpParams,
}

fn icdm_to_spec(codec: &IcdmCodec) -> ColumnIcdm {
    ColumnIcdm {
        column: codec.column().to_string(),
        intervals: codec
            .intervals()
            .iter()
            .map(|iv| IntervalSpec {
                category: iv.category.clone(),
                frequency: iv.frequency,
                q_low: iv.q_low,
                q_high: iv.q_high,
            })
            .collect(),
    }
}

impl StatsArtifact {
    /// Assembles the artifact from fitted pieces. `gmm_fits` pairs each
    /// continuous column's codec with its (rounds, final_elbo) fit metadata
    /// and full posterior parameters.
    pub fn from_parts(
        codecs: &TableCodecs,
        gmm_meta: &[(Vec<ModeParams>, usize, f64)],
        cov: &GlobalCovariance,
        factor: &CholFactor,
        dp: DpParams,
    ) -> Result<Self> {
        if gmm_meta.len() != codecs.continuous.len() {
            return Err(Error::Contract(
                "gmm metadata count does not match continuous columns".into(),
            ));
        }
        let gmm = codecs
            .continuous
            .iter()
            .zip(gmm_meta)
            .map(|((mdt, _), (modes, rounds, final_elbo))| ColumnGmm {
                column: mdt.column().to_string(),
                modes: modes.clone(),
                rounds: *rounds,
                final_elbo: *final_elbo,
            })
            .collect();
        let layout = codecs
            .layout
            .columns
            .iter()
            .map(|(role, column)| LayoutEntry {
                role: role.as_str().to_string(),
                column: column.clone(),
            })
            .collect();
        Ok(StatsArtifact {
            version: ARTIFACT_VERSION.to_string(),
            columns: codecs.schema.columns().to_vec(),
            lambda: codecs
                .discrete
                .first()
                .map(|c| c.lambda())
                .or_else(|| codecs.continuous.first().map(|(_, ind)| ind.lambda()))
                .unwrap_or(crate::transforms::DEFAULT_LAMBDA),
            mode_policy: codecs
                .continuous
                .first()
                .map(|(mdt, _)| mdt.policy().as_str().to_string())
                .unwrap_or_else(|| ModePolicy::default().as_str().to_string()),
            layout,
            gmm,
            mode_indicators: codecs
                .continuous
                .iter()
                .map(|(_, ind)| icdm_to_spec(ind))
                .collect(),
            icdm: codecs.discrete.iter().map(icdm_to_spec).collect(),
            covariance: CovarianceSpec {
                l: cov.dim,
                sigma: cov.sigma.clone(),
                clamped: cov.clamped,
                clamp_events: cov.clamp_events,
            },
            cholesky: CholeskySpec {
                u: factor.u.clone(),
                repair_shift: factor.repair_shift,
            },
            dp,
        })
    }

    /// Checks internal consistency: layout width matches the schema and the
    /// matrices, and every layout column has its codec.
    pub fn validate(&self) -> Result<()> {
        let schema = self.schema()?;
        let l = 2 * schema.n_continuous() + schema.n_discrete();
        if self.layout.len() != l {
            return Err(Error::Contract(format!(
                "layout has {} entries, schema implies {l}",
                self.layout.len()
            )));
        }
        if self.covariance.l != l || self.covariance.sigma.len() != l * l {
            return Err(Error::Contract("covariance dimensions disagree with layout".into()));
        }
        if self.cholesky.u.len() != l * l {
            return Err(Error::Contract("cholesky dimensions disagree with layout".into()));
        }
        if self.gmm.len() != schema.n_continuous()
            || self.mode_indicators.len() != schema.n_continuous()
            || self.icdm.len() != schema.n_discrete()
        {
            return Err(Error::Contract("codec counts disagree with schema".into()));
        }
        for entry in &self.layout {
            EncodedRole::parse(&entry.role)?;
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<Schema> {
        Schema::new(self.columns.clone())
    }

    /// Rebuilds the runtime codecs. Interval boundaries are restored exactly
    /// as stored, so a reloaded artifact synthesizes bit-identically.
    pub fn to_codecs(&self) -> Result<TableCodecs> {
        self.validate()?;
        let schema = Arc::new(self.schema()?);
        let policy = ModePolicy::parse(&self.mode_policy)?;
        let mut continuous = Vec::with_capacity(self.gmm.len());
        for (gmm, indicator) in self.gmm.iter().zip(&self.mode_indicators) {
            let modes = gmm
                .modes
                .iter()
                .map(|m| MdtMode {
                    pi: m.pi,
                    mu: m.mu,
                    sigma: m.sigma,
                })
                .collect();
            let mdt = MdtCodec::new(gmm.column.clone(), modes, policy)?;
            let ind = IcdmCodec::from_intervals(
                indicator.column.clone(),
                self.lambda,
                indicator
                    .intervals
                    .iter()
                    .map(|iv| IcdmInterval {
                        category: iv.category.clone(),
                        frequency: iv.frequency,
                        q_low: iv.q_low,
                        q_high: iv.q_high,
                    })
                    .collect(),
            )?;
            continuous.push((mdt, ind));
        }
        let mut discrete = Vec::with_capacity(self.icdm.len());
        for spec in &self.icdm {
            discrete.push(IcdmCodec::from_intervals(
                spec.column.clone(),
                self.lambda,
                spec.intervals
                    .iter()
                    .map(|iv| IcdmInterval {
                        category: iv.category.clone(),
                        frequency: iv.frequency,
                        q_low: iv.q_low,
                        q_high: iv.q_high,
                    })
                    .collect(),
            )?);
        }
        TableCodecs::new(schema, continuous, discrete)
    }

    pub fn chol_factor(&self) -> CholFactor {
        CholFactor {
            u: self.cholesky.u.clone(),
            dim: self.covariance.l,
            repair_shift: self.cholesky.repair_shift,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let artifact: StatsArtifact = serde_json::from_str(text)?;
        if artifact.version != ARTIFACT_VERSION {
            return Err(Error::Config(format!(
                "unsupported artifact version '{}'",
                artifact.version
            )));
        }
        artifact.validate()?;
        Ok(artifact)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}
