//! Run configuration file.
//!
//! ```toml
//! format_version = 1
//! system = "network.toml"          # relative to this file
//! certificate = "certificate.toml"
//! seed = 7                         # --seed overrides
//!
//! [integrator]
//! step = 0.01
//! max_norm = 1e6
//!
//! [[quantization]]                 # one per subsystem, or a single shared entry
//! eta_x = 0.05
//! eta_w = 0.05
//! eta_u = 0.1
//!
//! [certify]      # samples, refine, lmi_tol, inclusion_cap, mu, mu_candidates
//! [compose]      # dump, cap
//! [verify]       # condition1_samples, [verify.local], [verify.global]
//! [simulate]     # runs, horizon, initial_level, eps_tilde_override, max_traces
//! [synthesize]   # safe = one list of [lo, hi] per subsystem, cap
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use impabs::abstraction::Quantization;
use impabs::flow::IntegratorConfig;
use impabs::verify::{GlobalFitOptions, LocalFitOptions};
use serde::Deserialize;

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub system: PathBuf,
    pub certificate: Option<PathBuf>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub quantization: Vec<Quantization>,
    #[serde(default)]
    pub certify: CertifySection,
    #[serde(default)]
    pub compose: ComposeSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub synthesize: SynthesizeSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySection {
    pub samples: usize,
    pub refine: usize,
    pub lmi_tol: f64,
    pub inclusion_cap: usize,
    pub mu: Option<Vec<f64>>,
    pub mu_candidates: Option<Vec<Vec<f64>>>,
}

impl Default for CertifySection {
    fn default() -> Self {
        CertifySection {
            samples: 4096,
            refine: 8,
            lmi_tol: impabs::certificate::DEFAULT_LMI_TOL,
            inclusion_cap: impabs::certificate::DEFAULT_INCLUSION_CAP,
            mu: None,
            mu_candidates: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposeSection {
    pub dump: bool,
    pub cap: usize,
}

impl Default for ComposeSection {
    fn default() -> Self {
        ComposeSection { dump: false, cap: 1_000_000 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub condition1_samples: usize,
    pub local: LocalFitOptions,
    pub global: GlobalFitOptions,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            condition1_samples: 4096,
            local: LocalFitOptions::default(),
            global: GlobalFitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub runs: usize,
    pub horizon: usize,
    pub initial_level: Option<f64>,
    /// Replaces the fitted ε̃ (fault injection).
    pub eps_tilde_override: Option<f64>,
    pub max_traces: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            runs: 1000,
            horizon: 50,
            initial_level: None,
            eps_tilde_override: None,
            max_traces: 3,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesizeSection {
    /// Safe box of every subsystem.
    pub safe: Vec<Vec<[f64; 2]>>,
    pub cap: usize,
}

impl Default for SynthesizeSection {
    fn default() -> Self {
        SynthesizeSection {
            safe: Vec::new(),
            cap: 1_000_000,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(RunConfig, PathBuf)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {}", path.display(), e))?;
        if cfg.format_version != RUN_CONFIG_VERSION {
            bail!(
                "{}: unsupported config format version {} (expected {RUN_CONFIG_VERSION})",
                path.display(),
                cfg.format_version
            );
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    /// Per-subsystem quantization; a single entry is shared by all subsystems.
    pub fn quantization_for(&self, subsystems: usize) -> Result<Vec<Quantization>> {
        match self.quantization.len() {
            0 => bail!("config has no [[quantization]] entry"),
            1 => Ok(vec![self.quantization[0]; subsystems]),
            k if k == subsystems => Ok(self.quantization.clone()),
            k => bail!("config has {k} [[quantization]] entries for {subsystems} subsystems"),
        }
    }
}
