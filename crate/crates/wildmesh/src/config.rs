//! Run-level configuration: one structured-text file wiring every module's
//! settings together, schema-validated with unknown keys rejected, plus
//! dotted `key=value` overrides (last wins) and a verbatim echo of the
//! resolved configuration into run outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{CameraConfig, FixedSamplerConfig};
use crate::datagen::DataConfig;
use crate::error::{Error, Result};
use crate::metrics::ChamferVariant;
use crate::nets::NetConfig;
use crate::render::RenderConfig;
use crate::schedule::TrainConfig;

pub const CONFIG_ECHO_FILE: &str = "run-config.toml";

/// Shape-set evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Surface samples per mesh when scoring.
    pub points_per_mesh: usize,
    /// How many shapes `export-mesh` draws from a checkpoint.
    pub generated_count: usize,
    /// Seed for evaluation-side sampling (latent draws and surface points).
    pub seed: u64,
    pub chamfer_variant: ChamferVariant,
    /// Also write the pairwise chamfer matrix next to the report.
    pub write_distance_csv: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            points_per_mesh: 2048,
            generated_count: 10,
            seed: 0,
            chamfer_variant: ChamferVariant::SumSquared,
            write_distance_csv: false,
        }
    }
}

/// Everything a run needs, grouped by module. Every field has a documented
/// default (`RunConfig::default()` serialized is the reference config), so
/// an empty file is a valid configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Where training/evaluation artifacts go.
    pub out_dir: String,
    /// Where `gen-data` writes and the other commands read the dataset.
    pub dataset_dir: String,
    pub data: DataConfig,
    pub camera: CameraConfig,
    pub fixed_sampler: FixedSamplerConfig,
    pub net: NetConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: "runs/default".into(),
            dataset_dir: "data/default".into(),
            data: DataConfig::default(),
            camera: CameraConfig::default(),
            fixed_sampler: FixedSamplerConfig::default(),
            net: NetConfig::default(),
            render: RenderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_dir.is_empty() || self.dataset_dir.is_empty() {
            return Err(Error::BadConfig("out_dir and dataset_dir must be set".into()));
        }
        self.data.validate()?;
        self.train.validate()?;
        self.render.validate()?;
        let c = &self.camera;
        if !(c.orbit_radius > 0.0)
            || !(c.fov > 0.0 && c.fov < std::f64::consts::PI)
            || !(c.near > 0.0 && c.near < c.far)
            || !(c.k_min > 0.0)
            || !(c.phi_margin > 0.0 && c.phi_margin < std::f64::consts::FRAC_PI_2)
            || !(c.clamp_sharpness > 0.0)
        {
            return Err(Error::BadConfig(
                "camera geometry values must be positive and ordered".into(),
            ));
        }
        let n = &self.net;
        if n.z_dim == 0 || n.w_dim == 0 || n.field_hidden == 0 || n.disc_channels.is_empty() {
            return Err(Error::BadConfig("network dimensions must be positive".into()));
        }
        if self.eval.points_per_mesh == 0 || self.eval.generated_count == 0 {
            return Err(Error::BadConfig("evaluation counts must be positive".into()));
        }
        Ok(())
    }

    /// Read a config file and layer `key=value` overrides on top, in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::BadInput(format!("config {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    /// Parse configuration text plus overrides. Unknown keys anywhere are
    /// rejected with the offending key named.
    pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::BadConfig(format!("config parse: {e}")))?;
        for spec in overrides {
            apply_override(&mut value, spec)?;
        }
        let cfg: RunConfig =
            value.try_into().map_err(|e| Error::BadConfig(format!("config schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The resolved configuration as TOML — every key explicit.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Write the resolved configuration next to a run's outputs.
    pub fn echo(&self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(CONFIG_ECHO_FILE);
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

/// Apply one `dotted.path=value` override to a parsed TOML tree. The value
/// side is parsed as TOML (so numbers, booleans, and arrays work) and falls
/// back to a plain string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::BadConfig(format!("override '{spec}' is not key=value")))?;
    let (path, raw) = (path.trim(), raw.trim());
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::BadConfig(format!("override '{spec}' has an empty key segment")));
    }
    let parsed = toml::from_str::<toml::Value>(&format!("v = {raw}"))
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| {
            Error::BadConfig(format!(
                "override '{path}': '{}' is not a table",
                parts[..i].join(".")
            ))
        })?;
        if i == parts.len() - 1 {
            table.insert((*part).to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry((*part).to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("override paths have at least one segment");
}
