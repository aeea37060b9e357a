//! Run configuration: a TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, NUM_LEVELS};
use crate::cdap::CdapConfig;
use crate::error::{HrError, Result};
use crate::hppm::HppmConfig;
use crate::losses::DEFAULT_MARGIN;
use crate::metrics::ReMode;
use crate::synthdata::{PseudoKind, RigidRanges, SynthConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: [usize; NUM_LEVELS],
    pub d_sub: Option<usize>,
    pub msbn: bool,
    pub cdap: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { widths: [16, 32, 48, 64, 96], d_sub: None, msbn: true, cdap: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DssSection {
    pub hard_ortho: bool,
}

impl Default for DssSection {
    fn default() -> Self {
        Self { hard_ortho: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub method: String,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when non-zero.
    pub steps: usize,
    pub grad_clip: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self { method: "adam".into(), lr: 1e-4, batch_size: 8, epochs: 20, steps: 0, grad_clip: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory of source images; synthetic scenes are used when unset.
    pub source_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub num_pairs: usize,
    pub eval_pairs: usize,
    pub rigid: RigidRanges,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub pseudo: PseudoKind,
    pub max_residual: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            source_dir: None,
            manifest: None,
            num_pairs: 2000,
            eval_pairs: 64,
            rigid: s.rigid,
            elastic_alpha: s.elastic_alpha,
            elastic_sigma: s.elastic_sigma,
            pseudo: s.pseudo,
            max_residual: s.max_residual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub ccd: bool,
    pub bo: bool,
    pub cs: bool,
    pub tri: bool,
    pub margin: f64,
    pub ccd_scale_weights: [f64; NUM_LEVELS],
    /// Average the cross-scale consistency term over both modalities.
    pub cs_both_modalities: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            ccd: true,
            bo: true,
            cs: true,
            tri: true,
            margin: DEFAULT_MARGIN,
            ccd_scale_weights: [1.0; NUM_LEVELS],
            cs_both_modalities: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Train on one fixed batch of this many pairs when non-zero.
    pub overfit: usize,
    /// Data-generation threads; 0 generates on the calling thread.
    pub workers: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { checkpoint_every: 500, overfit: 0, workers: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub re_mode: ReMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub model: ModelSection,
    pub dss: DssSection,
    pub hppm: HppmConfig,
    pub optim: OptimSection,
    pub data: DataSection,
    pub losses: LossSection,
    pub train: TrainSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            channels: 1,
            model: ModelSection::default(),
            dss: DssSection::default(),
            hppm: HppmConfig::default(),
            optim: OptimSection::default(),
            data: DataSection::default(),
            losses: LossSection::default(),
            train: TrainSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl RunConfig {
    /// Full-resolution setting: 256×256 images, 100 epochs, elastic
    /// deformation of degree 140 with smoothing radius 35.
    pub fn paper_scale() -> Self {
        let mut c = Self::default();
        c.image_size = 256;
        c.optim.epochs = 100;
        c.data.elastic_alpha = 140.0;
        c.data.elastic_sigma = 35.0;
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| HrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HrError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HrError::Config(e.to_string()))
    }

    /// Applies dotted `key=value` overrides. Values are parsed as TOML
    /// literals, falling back to bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| HrError::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| HrError::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_literal(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| HrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HrError::Config(m));
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return bad(format!("image_size must be a positive multiple of 16, got {}", self.image_size));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.model.widths.contains(&0) || self.model.widths.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("model.widths must be positive and non-decreasing, got {:?}", self.model.widths));
        }
        self.cdap_config().sub_dims()?;
        self.hppm.validate()?;
        if self.optim.method != "adam" {
            return bad(format!("unsupported optimiser `{}`", self.optim.method));
        }
        if !(self.optim.lr > 0.0) || !(self.optim.grad_clip > 0.0) {
            return bad("optim.lr and optim.grad_clip must be > 0".into());
        }
        if self.optim.batch_size < 2 {
            return bad(format!("optim.batch_size must be >= 2, got {}", self.optim.batch_size));
        }
        if !(self.losses.margin > 0.0) {
            return bad(format!("losses.margin must be > 0, got {}", self.losses.margin));
        }
        if self.losses.ccd_scale_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("losses.ccd_scale_weights must be >= 0".into());
        }
        if !(self.data.elastic_alpha >= 0.0) || !(self.data.elastic_sigma > 0.0) {
            return bad("data.elastic_alpha must be >= 0 and data.elastic_sigma > 0".into());
        }
        let r = &self.data.rigid;
        if r.rotation_deg < 0.0 || r.translation < 0.0 || !(0.0..1.0).contains(&r.scale) {
            return bad(format!("invalid rigid ranges {r:?}"));
        }
        if self.train.overfit == 1 {
            return bad("train.overfit needs at least 2 pairs".into());
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig { in_channels: self.channels, widths: self.model.widths, msbn: self.model.msbn }
    }

    pub fn cdap_config(&self) -> CdapConfig {
        CdapConfig { widths: self.model.widths, d_sub: self.model.d_sub, hard_ortho: self.dss.hard_ortho }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            image_size: self.image_size,
            channels: self.channels,
            rigid: self.data.rigid,
            elastic_alpha: self.data.elastic_alpha,
            elastic_sigma: self.data.elastic_sigma,
            pseudo: self.data.pseudo,
            max_residual: self.data.max_residual,
        }
    }

    /// Stable digest of the canonical (JSON, declaration-ordered) config.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    /// Settings that determine checkpoint layout; eval refuses checkpoints
    /// whose architecture digest differs.
    pub fn architecture_hash(&self) -> String {
        let arch = (
            self.image_size,
            self.channels,
            &self.model,
            &self.dss,
            &self.hppm,
        );
        let canonical = serde_json::to_string(&arch).expect("config serialises");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| HrError::Config(format!("`{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}
