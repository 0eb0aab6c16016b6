//! Flag groups shared by the subcommands, configuration resolution and
//! backend construction.

use std::fmt::Display;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use helix_core::backend::{Backend, ExternalBackend, ReplayBackend, SyntheticBackend, SyntheticSpec};
use helix_core::config::{
    parse_config_file, resolve_steering, ConfigLayers, ResolvedSteering, Source, STEERING_KEYS,
};
use helix_core::manifold::Manifold;
use helix_core::steering::DEFAULT_STEERING_LAYERS;

use crate::exit::{CliError, CliResult};

/// Keys a config file may set besides the steering ones.
const RUN_KEYS: [&str; 7] = ["seed", "temperature", "max-tokens", "samples", "grid", "theta", "tau-ppl"];

#[derive(Debug, Clone, Default, Args)]
pub struct SteeringFlags {
    /// Flat `key = value` file using the flag names.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub tau0: Option<String>,
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long = "t-base")]
    pub t_base: Option<String>,
    #[arg(long)]
    pub kappa: Option<String>,
    #[arg(long = "t-c")]
    pub t_c: Option<String>,
    #[arg(long = "penalty-scale")]
    pub penalty_scale: Option<String>,
    /// paper_literal or boundary_continuous.
    #[arg(long = "penalty-shape")]
    pub penalty_shape: Option<String>,
    /// mean, min or max.
    #[arg(long = "sd-agg")]
    pub sd_agg: Option<String>,
    /// Steering layer ids, comma separated.
    #[arg(long)]
    pub layers: Option<String>,
}

/// Resolved configuration plus the provenance of every value used.
pub struct RunConfig {
    layers: ConfigLayers,
    pub steering: ResolvedSteering,
    extra: Vec<(String, String, Source)>,
}

impl RunConfig {
    pub fn resolve(flags: &SteeringFlags) -> CliResult<Self> {
        let mut layers = ConfigLayers::new().with_process_env();
        if let Some(path) = &flags.config {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
            layers = layers.with_file(parse_config_file(&text)?);
            let mut known: Vec<&str> = STEERING_KEYS.iter().map(|(k, _)| *k).collect();
            known.extend(RUN_KEYS);
            for key in layers.unknown_file_keys(&known) {
                log::warn!("ignoring unknown config key {key:?} in {}", path.display());
            }
        }
        let given = [
            ("tau0", &flags.tau0),
            ("gamma", &flags.gamma),
            ("t-base", &flags.t_base),
            ("kappa", &flags.kappa),
            ("t-c", &flags.t_c),
            ("penalty-scale", &flags.penalty_scale),
            ("penalty-shape", &flags.penalty_shape),
            ("sd-agg", &flags.sd_agg),
            ("layers", &flags.layers),
        ];
        for (key, value) in given {
            if let Some(v) = value {
                layers.set_flag(key, v);
            }
        }
        let steering = resolve_steering(&layers)?;
        Ok(Self {
            layers,
            steering,
            extra: Vec::new(),
        })
    }

    /// Resolves a run setting: flag > config file > `default`.
    pub fn value<T>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        if let Some(v) = flag {
            self.layers.set_flag(key, &v);
        }
        let r = self.layers.resolve(key, default)?;
        self.extra.push((key.to_owned(), r.value.to_string(), r.source));
        Ok(r.value)
    }

    pub fn header(&self) -> Vec<String> {
        let mut lines = self.steering.header_lines();
        lines.extend(self.extra.iter().map(|(k, v, s)| format!("{k} = {v} ({s})")));
        lines
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Synthetic,
    Replay,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    DivergenceProne,
    OnManifold,
}

#[derive(Debug, Clone, Args)]
pub struct BackendFlags {
    #[arg(long, value_enum, default_value = "synthetic")]
    pub backend: BackendKind,
    /// Seed of the synthetic backend's planted geometry.
    #[arg(long = "world-seed", default_value_t = 7)]
    pub world_seed: u64,
    #[arg(long, value_enum, default_value = "divergence-prone")]
    pub profile: Profile,
    /// Hidden width of the synthetic backend.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Vocabulary size of the synthetic backend.
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    /// Recorded step file for the replay backend.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    /// Shell command that speaks the NDJSON step protocol on stdio.
    #[arg(long, value_name = "CMD")]
    pub engine: Option<String>,
}

impl BackendFlags {
    pub fn synthetic_spec(&self) -> CliResult<SyntheticSpec> {
        if self.dim == 0 || self.vocab < 2 {
            return Err(CliError::bad_input("synthetic backend needs --dim >= 1 and --vocab >= 2"));
        }
        let spec = SyntheticSpec::planted(self.world_seed, self.dim, self.vocab, &DEFAULT_STEERING_LAYERS);
        Ok(match self.profile {
            Profile::DivergenceProne => spec,
            Profile::OnManifold => spec.with_drift(0.0),
        })
    }
}

/// Everything needed to open fresh backend streams.
pub enum BackendSource {
    Synthetic(SyntheticSpec),
    Replay(Vec<u8>),
    External(String),
}

impl BackendSource {
    pub fn from_flags(flags: &BackendFlags) -> CliResult<Self> {
        match flags.backend {
            BackendKind::Synthetic => Ok(Self::Synthetic(flags.synthetic_spec()?)),
            BackendKind::Replay => {
                let path = flags
                    .trace
                    .as_ref()
                    .ok_or_else(|| CliError::bad_input("--backend replay needs --trace FILE"))?;
                let bytes =
                    fs::read(path).map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
                // fail early on a file that is not a trace at all
                ReplayBackend::from_bytes(&bytes).map_err(|e| CliError::from(e).context(path.display()))?;
                Ok(Self::Replay(bytes))
            }
            BackendKind::External => flags
                .engine
                .clone()
                .map(Self::External)
                .ok_or_else(|| CliError::bad_input("--backend external needs --engine CMD")),
        }
    }

    pub fn create(&self, seed: u64) -> helix_core::Result<Box<dyn Backend>> {
        Ok(match self {
            Self::Synthetic(spec) => Box::new(SyntheticBackend::new(spec.clone().with_seed(seed))?),
            Self::Replay(bytes) => Box::new(ReplayBackend::from_bytes(bytes)?),
            Self::External(cmd) => Box::new(ExternalBackend::spawn(cmd)?),
        })
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Synthetic(s) => format!("synthetic (d={}, V={}, drift={})", s.dim, s.vocab_size, s.drift_rate),
            Self::Replay(b) => format!("replay ({} bytes)", b.len()),
            Self::External(cmd) => format!("external ({cmd})"),
        }
    }
}

pub fn load_manifold(path: &Path) -> CliResult<Manifold> {
    Manifold::load(path).map_err(|e| CliError::from(e).context(format!("manifold {}", path.display())))
}

/// Opens `path` for writing, refusing to touch an existing file.
pub fn create_exclusive(path: &Path) -> CliResult<File> {
    OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| {
        let hint = if e.kind() == io::ErrorKind::AlreadyExists {
            " (refusing to overwrite)"
        } else {
            ""
        };
        CliError::io(format!("cannot create {}: {e}{hint}", path.display()))
    })
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path)
        .map_err(|e| CliError::io(format!("cannot write {}: {}", path.display(), e.error)))?;
    Ok(())
}
