//! TOML run configuration. Every key has a default, so an empty file is valid.

use std::path::{Path, PathBuf};

use blockbuild::dronesim::{BuildConfig, CameraParams, ErrorModel, OffsetDist};
use blockbuild::evalharness::SuiteConfig;
use blockbuild::framesync::{pad_map_hardcoded, PadMap};
use blockbuild::gridworld::{GridWorld, WorldDims};
use blockbuild::planner::{LiveConfig, PlannerConfig};
use blockbuild::vision::DetectorConfig;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for every simulation command.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub backend: BackendConfig,
    pub errors: ErrorConfig,
    pub build: BuildSettings,
    pub planner: PlannerConfig,
    pub detector: Option<DetectorConfig>,
    pub camera: CameraParams,
    pub eval: EvalSettings,
    pub matrix: MatrixSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            world: WorldConfig::default(),
            backend: BackendConfig::default(),
            errors: ErrorConfig::default(),
            build: BuildSettings::default(),
            planner: PlannerConfig::default(),
            detector: None,
            camera: CameraParams::default(),
            eval: EvalSettings::default(),
            matrix: MatrixSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub pad_size: usize,
    pub cell_size_m: f64,
    /// World extent in cells as `[h, w, l]`; defaults to the pad footprint.
    pub dims_cells: Option<[usize; 3]>,
    pub pad_origin_cell: [usize; 2],
    /// Distance between neighbouring pad cells.
    pub spacing_m: f64,
    /// World position of the pad's bottom-right cell.
    pub anchor_m: [f64; 3],
    pub yaw_rad: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            pad_size: 5,
            cell_size_m: 0.01,
            dims_cells: None,
            pad_origin_cell: [0, 0],
            spacing_m: 0.04,
            anchor_m: [0.5, 0.2, 0.0],
            yaw_rad: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub live: LiveConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            live: LiveConfig::default(),
        }
    }
}

/// Error-model settings; the seed comes from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorConfig {
    pub misplace_prob: f64,
    pub offset_dist: OffsetDist,
    pub drop_fail_prob: f64,
    pub pickup_fail_prob: f64,
    /// Forced offsets as `[attempt, dx, dy]`.
    pub forced: Vec<[i64; 3]>,
}

impl Default for ErrorConfig {
    fn default() -> Self {
        Self {
            misplace_prob: 0.0,
            offset_dist: OffsetDist::Uniform4,
            drop_fail_prob: 0.0,
            pickup_fail_prob: 0.0,
            forced: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildSettings {
    pub request: Option<String>,
    pub reprompt: bool,
    pub max_reprompts: usize,
    pub max_steps: usize,
    pub placement_retries: usize,
    pub dump_frames: bool,
}

impl Default for BuildSettings {
    fn default() -> Self {
        let b = BuildConfig::default();
        Self {
            request: None,
            reprompt: b.reprompt_enabled,
            max_reprompts: b.max_reprompts,
            max_steps: b.max_steps,
            placement_retries: b.placement_retries,
            dump_frames: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Directory of prompt files; the built-in corpus when unset.
    pub suite: Option<PathBuf>,
    pub trials: usize,
    pub parallelism: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let s = SuiteConfig::default();
        Self {
            suite: None,
            trials: s.trials_per_prompt,
            parallelism: s.parallelism,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSettings {
    /// Design requests; every mock design when empty.
    pub designs: Vec<String>,
    pub seeds: usize,
}

impl Default for MatrixSettings {
    fn default() -> Self {
        Self {
            designs: Vec::new(),
            seeds: 10,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Apply `key.path=value` assignments. Values are read as TOML, falling
    /// back to a bare string.
    pub fn with_overrides(&self, assignments: &[String]) -> Result<Self, CliError> {
        let mut root = toml::Value::try_from(self).map_err(|e| CliError::Config(e.to_string()))?;
        for a in assignments {
            let (path, raw) = a
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set `{a}`: expected KEY=VALUE")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let keys: Vec<&str> = path.trim().split('.').collect();
            let (last, parents) = keys.split_last().expect("split yields one item");
            let mut node = &mut root;
            for k in parents {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| CliError::Config(format!("--set `{path}`: `{k}` is not a table")))?;
                node = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            }
            node.as_table_mut()
                .ok_or_else(|| CliError::Config(format!("--set `{path}`: parent is not a table")))?
                .insert(last.to_string(), value);
        }
        root.try_into().map_err(|e| CliError::Config(format!("--set: {e}")))
    }

    pub fn grid(&self) -> Result<GridWorld, CliError> {
        let w = &self.world;
        let n = w.pad_size;
        let [h, wd, l] = w.dims_cells.unwrap_or([1, n + w.pad_origin_cell[0], n + w.pad_origin_cell[1]]);
        GridWorld::new(WorldDims::new(h, wd, l), w.cell_size_m, n, (w.pad_origin_cell[0], w.pad_origin_cell[1]))
            .map_err(|e| CliError::Config(format!("world: {e}")))
    }

    pub fn pad_map(&self) -> Result<PadMap, CliError> {
        let w = &self.world;
        pad_map_hardcoded(&Vector3::from(w.anchor_m), w.yaw_rad, w.spacing_m, w.pad_size)
            .map_err(|e| CliError::Config(format!("world: {e}")))
    }

    pub fn error_model(&self) -> Result<ErrorModel, CliError> {
        let e = &self.errors;
        let mut m = ErrorModel {
            misplace_prob: e.misplace_prob,
            offset_dist: e.offset_dist.clone(),
            drop_fail_prob: e.drop_fail_prob,
            pickup_fail_prob: e.pickup_fail_prob,
            seed: self.seed,
            ..ErrorModel::none(self.seed)
        };
        for &[attempt, dx, dy] in &e.forced {
            let attempt = usize::try_from(attempt).map_err(|_| CliError::Config(format!("errors.forced: bad attempt {attempt}")))?;
            m = m.with_forced(attempt, [dx, dy]);
        }
        m.validate().map_err(|e| CliError::Config(format!("errors: {e}")))?;
        Ok(m)
    }

    pub fn build_config(&self) -> Result<BuildConfig, CliError> {
        let b = &self.build;
        let detector = self
            .detector
            .unwrap_or_else(|| DetectorConfig::for_geometry(self.camera.cell_px as f64, self.camera.block_px as f64));
        detector.validate().map_err(|e| CliError::Config(format!("detector: {e}")))?;
        if self.camera.block_px == 0 || self.camera.block_px + 2 * self.camera.stack_offset_px > self.camera.cell_px {
            return Err(CliError::Config("camera: blocks plus stack offset must fit inside a cell".into()));
        }
        Ok(BuildConfig {
            reprompt_enabled: b.reprompt,
            max_reprompts: b.max_reprompts,
            max_steps: b.max_steps,
            placement_retries: b.placement_retries,
            planner: self.planner.clone(),
            detector,
            camera: self.camera,
            target: None,
            frame_dump_dir: None,
        })
    }

    pub fn suite_config(&self) -> Result<SuiteConfig, CliError> {
        if self.eval.trials == 0 {
            return Err(CliError::Config("eval.trials must be at least 1".into()));
        }
        Ok(SuiteConfig {
            trials_per_prompt: self.eval.trials,
            parallelism: self.eval.parallelism.max(1),
            temperature: self.planner.temperature,
            max_tokens: self.planner.max_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.grid().unwrap().pad_size(), 5);
        assert!(c.build_config().unwrap().reprompt_enabled);
    }

    #[test]
    fn full_file_parses() {
        let text = r#"
seed = 9
output_dir = "runs"
[world]
pad_size = 6
yaw_rad = 0.5
[backend]
kind = "live"
[backend.live]
provider = "anthropic"
model = "m"
base_url = "http://localhost:1"
api_key_env = "K"
[errors]
misplace_prob = 0.2
offset_dist = { fixed = [1, 0] }
forced = [[0, 0, 1]]
[build]
reprompt = false
max_reprompts = 3
[planner]
max_corrections = 1
[eval]
trials = 2
[matrix]
designs = ["square", "cross"]
seeds = 4
"#;
        let c: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(c.world.pad_size, 6);
        assert_eq!(c.backend.kind, BackendKind::Live);
        let m = c.error_model().unwrap();
        assert_eq!(m.seed, 9);
        assert_eq!(m.offset_dist, OffsetDist::Fixed([1, 0]));
        assert_eq!(m.scripted.get(&0), Some(&[0, 1]));
        assert!(!c.build_config().unwrap().reprompt_enabled);
        assert_eq!(c.matrix.designs.len(), 2);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = RunConfig::default()
            .with_overrides(&[
                "world.yaw_rad=0.25".into(),
                "errors.offset_dist={ fixed = [0, 1] }".into(),
                "build.request=square".into(),
                "detector.pickup_threshold=5.0".into(),
            ])
            .unwrap();
        assert_eq!(c.world.yaw_rad, 0.25);
        assert_eq!(c.errors.offset_dist, OffsetDist::Fixed([0, 1]));
        assert_eq!(c.build.request.as_deref(), Some("square"));
        assert!(RunConfig::default().with_overrides(&["world.nope=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["seed".into()]).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
    }

    #[test]
    fn bad_probability_is_config_error() {
        let c: RunConfig = toml::from_str("[errors]\nmisplace_prob = 2.0").unwrap();
        assert!(matches!(c.error_model(), Err(CliError::Config(_))));
    }
}
