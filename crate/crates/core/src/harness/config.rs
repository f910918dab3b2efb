//! Experiment configuration: sectioned key-value text (TOML).
//!
//! Every key has a default mirroring the isotropic desk-scale experiment, so an
//! empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::LevelPlan;
use crate::fem::{BoundaryData, Source};
use crate::gmsfem::OfflineConfig;
use crate::grid::StructuredGridPair;
use crate::randfield::CovarianceSpec;
use crate::samplers::{MlmcmcConfig, PosteriorSpec, ProposalAnchor, ProposalSpec};

/// Bumped whenever the meaning of the offline inputs changes.
pub const OFFLINE_FORMAT_REVISION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub field: FieldConfig,
    pub problem: ProblemConfig,
    pub offline: OfflineSection,
    pub forward: ForwardSection,
    pub mlmc: MlmcSection,
    pub mlmcmc: MlmcmcSection,
    pub seeds: SeedConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Fine cells in x and y.
    pub fine: [usize; 2],
    /// Coarse elements in x and y.
    pub coarse: [usize; 2],
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            fine: [50, 50],
            coarse: [5, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub sigma2: f64,
    pub l1: f64,
    pub l2: f64,
    /// KLE terms kept.
    pub modes: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            sigma2: 2.0,
            l1: 0.1,
            l2: 0.1,
            modes: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryKind {
    /// `g = x₁` on the whole boundary.
    LinearX1,
    /// `g = x₂` on the whole boundary.
    LinearX2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    /// Constant source term f.
    pub source: f64,
    pub boundary: BoundaryKind,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            source: 1.0,
            boundary: BoundaryKind::LinearX1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineSection {
    /// J, prior draws used for snapshots.
    pub snapshot_parameters: usize,
    /// L_i, snapshots per draw and neighborhood.
    pub per_parameter: usize,
    pub m_off: usize,
    pub seed: u64,
    /// Cache file; defaults to `offline.bin` in the output directory.
    pub cache: Option<PathBuf>,
}

impl Default for OfflineSection {
    fn default() -> Self {
        let d = OfflineConfig::default();
        OfflineSection {
            snapshot_parameters: d.n_parameters,
            per_parameter: d.per_parameter,
            m_off: d.m_off,
            seed: d.seed,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardSection {
    /// Explicit KLE coefficients; otherwise prior draw `sample` of the prior stream.
    pub eta: Option<Vec<f64>>,
    pub sample: u64,
    /// Online dimensions to report.
    pub dims: Vec<usize>,
}

impl Default for ForwardSection {
    fn default() -> Self {
        ForwardSection {
            eta: None,
            sample: 0,
            dims: vec![1, 2, 4, 8, 16],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceLevel {
    /// Finest online level N_L.
    Finest,
    /// Fine-grid solve.
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmcSection {
    pub dims: Vec<usize>,
    pub samples: Vec<usize>,
    /// Cost-matched MC sample count; derived from the plan when absent.
    pub mc_samples: Option<usize>,
    pub reference_samples: usize,
    pub reference: ReferenceLevel,
    pub replicates: usize,
    /// When set, `samples` is replaced by a pilot-based allocation with this M.
    pub allocate_m: Option<usize>,
    pub pilot_samples: usize,
}

impl Default for MlmcSection {
    fn default() -> Self {
        MlmcSection {
            dims: vec![4, 8, 16],
            samples: vec![128, 32, 8],
            mc_samples: None,
            reference_samples: 5000,
            reference: ReferenceLevel::Finest,
            replicates: 10,
            allocate_m: None,
            pilot_samples: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorKind {
    Shared,
    InitialLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmcmcSection {
    pub dims: Vec<usize>,
    /// Random-walk step δ.
    pub delta: f64,
    pub burn_in: usize,
    pub final_accepts: usize,
    /// σ_L = noise_rel·‖F_obs‖/√(#points) unless `sigmas` is given.
    pub noise_rel: f64,
    pub sigmas: Option<Vec<f64>>,
    pub points: Vec<[f64; 2]>,
    pub anchor: AnchorKind,
    /// Chain start; zeros when absent.
    pub initial: Option<Vec<f64>>,
    /// Parameter that generates the data; an observation-stream prior draw when absent.
    pub reference_eta: Option<Vec<f64>>,
    pub max_iterations: usize,
    /// Accepted fields written out, evenly spaced over the accepted samples.
    pub field_snapshots: usize,
}

impl Default for MlmcmcSection {
    fn default() -> Self {
        let mut points = Vec::new();
        for y in [0.25, 0.5, 0.75] {
            for x in [0.25, 0.5, 0.75] {
                points.push([x, y]);
            }
        }
        MlmcmcSection {
            dims: vec![4, 8, 16],
            delta: 0.2,
            burn_in: 300,
            final_accepts: 1000,
            noise_rel: 0.05,
            sigmas: None,
            points,
            anchor: AnchorKind::Shared,
            initial: None,
            reference_eta: None,
            max_iterations: 200_000,
            field_snapshots: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    /// Prior draws for MLMC, MC and the `forward` stage.
    pub prior: u64,
    pub reference: u64,
    pub chain: u64,
    pub observation: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            prior: 1,
            reference: 2,
            chain: 3,
            observation: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            grid: GridConfig::default(),
            field: FieldConfig::default(),
            problem: ProblemConfig::default(),
            offline: OfflineSection::default(),
            forward: ForwardSection::default(),
            mlmc: MlmcSection::default(),
            mlmcmc: MlmcmcSection::default(),
            seeds: SeedConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Replaces every experiment seed; the snapshot seed stays so caches remain valid.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = SeedConfig {
            prior: seed,
            reference: seed,
            chain: seed,
            observation: seed,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.covariance()?;
        if self.field.modes == 0 {
            return Err(Error::config("field.modes must be >= 1"));
        }
        if !self.problem.source.is_finite() {
            return Err(Error::config("problem.source must be finite"));
        }
        let off = self.offline_config();
        if off.n_parameters == 0 || off.per_parameter == 0 || off.m_off == 0 {
            return Err(Error::config("offline.snapshot_parameters, per_parameter and m_off must be >= 1"));
        }
        let plan = self.plan()?;
        let top = plan.finest_dim().max(self.mlmcmc.dims.iter().copied().max().unwrap_or(0));
        if top > off.m_off {
            return Err(Error::config(format!(
                "level dimension {top} exceeds offline.m_off = {}",
                off.m_off
            )));
        }
        if let Some(&d) = self.forward.dims.iter().find(|&&d| d == 0 || d > off.m_off) {
            return Err(Error::config(format!("forward.dims entry {d} is outside 1..={}", off.m_off)));
        }
        if self.mlmc.reference_samples == 0 || self.mlmc.replicates == 0 {
            return Err(Error::config("mlmc.reference_samples and mlmc.replicates must be >= 1"));
        }
        if self.mlmc.mc_samples == Some(0) {
            return Err(Error::config("mlmc.mc_samples must be >= 1"));
        }
        self.mlmcmc_config()?;
        ProposalSpec::new(self.mlmcmc.delta)?;
        if self.mlmcmc.dims.is_empty() || self.mlmcmc.dims.windows(2).any(|w| w[0] >= w[1]) || self.mlmcmc.dims[0] == 0 {
            return Err(Error::config(format!(
                "mlmcmc.dims must be positive and strictly increasing, got {:?}",
                self.mlmcmc.dims
            )));
        }
        if let Some(s) = &self.mlmcmc.sigmas {
            PosteriorSpec::new(vec![0.0; self.mlmcmc.points.len()], s.clone(), self.points())?;
            if s.len() != self.mlmcmc.dims.len() {
                return Err(Error::config(format!(
                    "mlmcmc.sigmas has {} entries for {} levels",
                    s.len(),
                    self.mlmcmc.dims.len()
                )));
            }
        } else if !(self.mlmcmc.noise_rel > 0.0) {
            return Err(Error::config("mlmcmc.noise_rel must be positive"));
        }
        if self.mlmcmc.points.is_empty() {
            return Err(Error::config("mlmcmc.points must not be empty"));
        }
        PosteriorSpec::new(vec![0.0; self.mlmcmc.points.len()], vec![1.0], self.points())?;
        for (name, v) in [("initial", &self.mlmcmc.initial), ("reference_eta", &self.mlmcmc.reference_eta), ("forward.eta", &self.forward.eta)] {
            if let Some(v) = v {
                if v.len() != self.field.modes {
                    return Err(Error::config(format!(
                        "{name} has {} entries but field.modes = {}",
                        v.len(),
                        self.field.modes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<StructuredGridPair> {
        let [nx, ny] = self.grid.fine;
        let [cx, cy] = self.grid.coarse;
        StructuredGridPair::new(nx, ny, cx, cy)
    }

    pub fn covariance(&self) -> Result<CovarianceSpec> {
        CovarianceSpec::new(self.field.sigma2, self.field.l1, self.field.l2)
    }

    pub fn source(&self) -> Source {
        Source::Constant(self.problem.source)
    }

    pub fn boundary(&self) -> BoundaryData {
        match self.problem.boundary {
            BoundaryKind::LinearX1 => BoundaryData::LinearX1,
            BoundaryKind::LinearX2 => BoundaryData::LinearX2,
        }
    }

    pub fn offline_config(&self) -> OfflineConfig {
        OfflineConfig {
            n_parameters: self.offline.snapshot_parameters,
            per_parameter: self.offline.per_parameter,
            m_off: self.offline.m_off,
            seed: self.offline.seed,
        }
    }

    pub fn plan(&self) -> Result<LevelPlan> {
        LevelPlan::new(self.mlmc.dims.clone(), self.mlmc.samples.clone())
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        self.mlmcmc.points.iter().map(|p| (p[0], p[1])).collect()
    }

    pub fn anchor(&self) -> ProposalAnchor {
        match self.mlmcmc.anchor {
            AnchorKind::Shared => ProposalAnchor::Shared,
            AnchorKind::InitialLevel => ProposalAnchor::InitialLevel,
        }
    }

    pub fn mlmcmc_config(&self) -> Result<MlmcmcConfig> {
        let m = &self.mlmcmc;
        if m.burn_in >= m.final_accepts {
            return Err(Error::config(format!(
                "mlmcmc.burn_in = {} must be below final_accepts = {}",
                m.burn_in, m.final_accepts
            )));
        }
        Ok(MlmcmcConfig {
            burn_in: m.burn_in,
            final_accepts: m.final_accepts,
            anchor: self.anchor(),
            max_iterations: m.max_iterations,
        })
    }

    pub fn cache_path(&self) -> PathBuf {
        self.offline
            .cache
            .clone()
            .unwrap_or_else(|| self.output.dir.join("offline.bin"))
    }

    /// Digest of the whole configuration.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Digest of the inputs the offline spaces depend on.
    pub fn offline_hash(&self) -> [u8; 32] {
        let key = format!(
            "rev={OFFLINE_FORMAT_REVISION};grid={:?}/{:?};cov={:?},{:?},{:?};modes={};J={};L={};Moff={};seed={}",
            self.grid.fine,
            self.grid.coarse,
            self.field.sigma2,
            self.field.l1,
            self.field.l2,
            self.field.modes,
            self.offline.snapshot_parameters,
            self.offline.per_parameter,
            self.offline.m_off,
            self.offline.seed,
        );
        Sha256::digest(key.as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.plan().unwrap().dims, vec![4, 8, 16]);
        assert_eq!(c.mlmcmc.points.len(), 9);
    }

    #[test]
    fn roundtrip_through_text() {
        let mut c = ExperimentConfig::default();
        c.field.l2 = 0.05;
        c.mlmcmc.sigmas = Some(vec![0.4, 0.2, 0.1]);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(ExperimentConfig::from_toml("[grid]\nfnie = [4, 4]"), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml("[grid]\nfine = [50, 50]\ncoarse = [7, 5]"),
            Err(Error::Config(_))
        ));
        assert!(matches!(ExperimentConfig::from_toml("[mlmc]\nsamples = [8, 32, 128]"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[mlmcmc]\nburn_in = 1000"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[offline]\nm_off = 8"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[field]\nsigma2 = -1.0"), Err(Error::Config(_))));
    }

    #[test]
    fn missing_file_names_the_path() {
        let e = ExperimentConfig::from_path(Path::new("/nonexistent/iso.toml")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("/nonexistent/iso.toml"));
    }

    #[test]
    fn offline_hash_tracks_only_offline_inputs() {
        let a = ExperimentConfig::default();
        let mut b = a.clone().with_seed(99);
        b.mlmc.replicates = 3;
        assert_eq!(a.offline_hash(), b.offline_hash());
        b.field.l1 = 0.05;
        assert_ne!(a.offline_hash(), b.offline_hash());
    }
}
