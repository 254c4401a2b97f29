//! Run configuration: one nested key-value (TOML) file covering every stage
//! of the pipeline, plus dotted-path overrides of the form `group.key=value`
//! from the command line. Unknown keys are rejected so typos surface instead
//! of silently falling back to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override {0:?} is not of the form group.key=value")]
    BadOverride(String),
    #[error("camera and imu cannot be disabled")]
    MinimumSensors,
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Which measurement streams the estimator consumes. Camera and IMU form the
/// minimum viable pipeline and cannot be disabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sensors {
    pub camera: bool,
    pub imu: bool,
    pub lidar: bool,
    pub gps: bool,
}

impl Default for Sensors {
    fn default() -> Self {
        Sensors {
            camera: true,
            imu: true,
            lidar: true,
            gps: true,
        }
    }
}

/// Feature tracking and sensor ingestion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    /// A frame becomes a keyframe when fewer features survive tracking.
    pub feature_threshold: usize,
    /// A keyframe fires after this much time even if tracking stays strong,
    /// bounding every preintegration interval, s.
    pub max_keyframe_interval: f64,
    /// Match dropout rate of the correspondence provider.
    pub dropout: f64,
    /// Injected wrong-identity match rate of the provider.
    pub false_match_rate: f64,
    /// Fault injection: IMU samples inside these [start, end] time windows
    /// are discarded before ingestion, simulating a stream interruption.
    pub imu_gaps: Vec<[f64; 2]>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            feature_threshold: 50,
            max_keyframe_interval: 0.5,
            dropout: 0.0,
            false_match_rate: 0.0,
            imu_gaps: Vec::new(),
        }
    }
}

/// Sliding-window odometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryConfig {
    /// Window length in keyframes.
    pub window: usize,
    /// Keyframes accumulated before the velocity/bias initialization solve.
    pub init_keyframes: usize,
    /// Constant visual factor weight (replaced by the agent when enabled).
    pub visual_weight: f64,
    /// Constant lidar factor weight (replaced by the agent when enabled).
    pub lidar_weight: f64,
    /// Inertial factor weight; never robustified, never learned.
    pub inertial_weight: f64,
    /// Solver iteration cap per window pass.
    pub max_iterations: usize,
    /// Scans kept in the rolling lidar map.
    pub lidar_map_scans: usize,
    /// Spatial index cell size of the lidar map, m.
    pub lidar_cell: f64,
    /// Plane association radius, m.
    pub lidar_search_radius: f64,
    /// Fewer correspondences than this skips an alignment step.
    pub lidar_min_correspondences: usize,
    /// Cap on lidar factors added per keyframe.
    pub max_lidar_factors: usize,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        OdometryConfig {
            window: 10,
            init_keyframes: 10,
            visual_weight: 1.0,
            lidar_weight: 1.0,
            inertial_weight: 1.0,
            max_iterations: 20,
            lidar_map_scans: 3,
            lidar_cell: 1.0,
            lidar_search_radius: 1.0,
            lidar_min_correspondences: 10,
            max_lidar_factors: 300,
        }
    }
}

/// Segmented global optimization and its GPS/loop inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseGraphConfig {
    /// Keyframe span of the yaw window used to classify turning.
    pub yaw_window: usize,
    /// Yaw change over the window that marks a turn, rad.
    pub turn_thresh: f64,
    /// Revisit proximity radius, m.
    pub loop_radius: f64,
    /// Minimum keyframe index gap of a loop pair.
    pub loop_min_gap: usize,
    /// Minimum keyframe spacing between emitted loops.
    pub loop_min_spacing: usize,
    /// Innovation gate width in sigmas.
    pub gate_sigma: f64,
    /// GPS measurement sigma, m; 0 takes the dataset's configured noise.
    pub gps_sigma: f64,
    /// Odometry rotation sigma between keyframes, rad.
    pub odometry_rot_sigma: f64,
    /// Odometry translation sigma between keyframes, m.
    pub odometry_trans_sigma: f64,
    /// Information ratio of the stage-2 soft-freeze priors over odometry.
    pub prior_ratio: f64,
}

impl Default for PoseGraphConfig {
    fn default() -> Self {
        PoseGraphConfig {
            yaw_window: 5,
            turn_thresh: 0.175,
            loop_radius: 5.0,
            loop_min_gap: 50,
            loop_min_spacing: 10,
            gate_sigma: 5.0,
            gps_sigma: 0.0,
            odometry_rot_sigma: 0.02,
            odometry_trans_sigma: 0.2,
            prior_ratio: 10.0,
        }
    }
}

/// Learned factor weighting: agent architecture, training protocol, and the
/// checkpoint consumed at run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Use the learned policy for factor weights during runs.
    pub enabled: bool,
    /// Checkpoint file; empty means a freshly initialized actor.
    pub checkpoint: PathBuf,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub hidden: usize,
    pub discount: f64,
    pub tau: f64,
    pub policy_delay: u64,
    pub batch: usize,
    pub lr: f64,
    pub explore_noise: f64,
    pub target_noise: f64,
    pub noise_clip: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub epochs: usize,
    /// Keyframes per training episode.
    pub episode_keyframes: usize,
    pub replay_capacity: usize,
    /// Gradient updates after each training episode.
    pub train_steps_per_episode: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            enabled: false,
            checkpoint: PathBuf::new(),
            grid_rows: 4,
            grid_cols: 6,
            hidden: 64,
            discount: 0.99,
            tau: 0.005,
            policy_delay: 2,
            batch: 64,
            lr: 3e-4,
            explore_noise: 0.5,
            target_noise: 1.0,
            noise_clip: 2.5,
            weight_min: 0.1,
            weight_max: 10.0,
            epochs: 3,
            episode_keyframes: 10,
            replay_capacity: 10_000,
            train_steps_per_episode: 10,
        }
    }
}

/// Scene corruption for training and robustness runs: time alternates
/// between visual-noise bursts and lidar-sparse regions, so the two factor
/// families degrade out of phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub enabled: bool,
    /// Full alternation cycle, s: first half visual burst, second half lidar
    /// sparsity.
    pub period: f64,
    /// Extra pixel noise during bursts, px.
    pub pixel_sigma: f64,
    /// Match dropout during bursts.
    pub match_dropout: f64,
    /// Lidar feature dropout during sparse regions.
    pub lidar_drop: f64,
    /// Radial noise on surviving lidar features during sparse regions, m.
    pub lidar_range_sigma: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            enabled: false,
            period: 8.0,
            pixel_sigma: 3.0,
            match_dropout: 0.5,
            lidar_drop: 0.95,
            lidar_range_sigma: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory.
    pub dataset: PathBuf,
    /// Output directory for trajectories, logs, and checkpoints.
    pub output: PathBuf,
    /// Root seed; every random stream derives from it.
    pub seed: u64,
    pub sensors: Sensors,
    pub frontend: FrontendConfig,
    pub odometry: OdometryConfig,
    pub pose_graph: PoseGraphConfig,
    pub agent: AgentConfig,
    pub corruption: CorruptionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::new(),
            output: PathBuf::from("out"),
            seed: 42,
            sensors: Sensors::default(),
            frontend: FrontendConfig::default(),
            odometry: OdometryConfig::default(),
            pose_graph: PoseGraphConfig::default(),
            agent: AgentConfig::default(),
            corruption: CorruptionConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config document and applies overrides on top. An empty
    /// document yields the defaults.
    pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut table: toml::Table = if text.trim().is_empty() {
            toml::Table::new()
        } else {
            text.parse()
                .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?
        };
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        let template =
            toml::Value::try_from(RunConfig::default()).expect("defaults must serialize");
        let mut value = toml::Value::Table(table);
        coerce_numbers(&template, &mut value);
        let config: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.sensors.camera && self.sensors.imu) {
            return Err(ConfigError::MinimumSensors);
        }
        if self.odometry.window < 2 {
            return Err(ConfigError::Invalid("odometry.window must be >= 2".into()));
        }
        if self.frontend.feature_threshold == 0 {
            return Err(ConfigError::Invalid(
                "frontend.feature_threshold must be positive".into(),
            ));
        }
        if !(self.frontend.max_keyframe_interval > 0.0) {
            return Err(ConfigError::Invalid(
                "frontend.max_keyframe_interval must be positive".into(),
            ));
        }
        for (name, w) in [
            ("visual", self.odometry.visual_weight),
            ("lidar", self.odometry.lidar_weight),
            ("inertial", self.odometry.inertial_weight),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(ConfigError::Invalid(format!(
                    "odometry.{name}_weight must be finite and nonnegative"
                )));
            }
        }
        if self.agent.grid_rows == 0 || self.agent.grid_cols == 0 {
            return Err(ConfigError::Invalid("agent grid must be nonempty".into()));
        }
        if !(self.agent.weight_min < self.agent.weight_max) {
            return Err(ConfigError::Invalid(
                "agent.weight_min must be below agent.weight_max".into(),
            ));
        }
        if self.agent.episode_keyframes < 2 {
            return Err(ConfigError::Invalid(
                "agent.episode_keyframes must be >= 2".into(),
            ));
        }
        if self.agent.epochs == 0 {
            return Err(ConfigError::Invalid("agent.epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical document form, round-trippable through [`parse`](Self::parse).
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config must serialize")
    }
}

/// Applies one `path.to.key=value` override into the raw table. The value is
/// parsed as a TOML literal when possible and treated as a bare string
/// otherwise, so paths need no quoting.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let Some((path, raw)) = spec.split_once('=') else {
        return Err(ConfigError::BadOverride(spec.to_string()));
    };
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let value = parse_literal(raw.trim());
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        node = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Integer literals written where the schema holds a float (`seed=7` is fine,
/// `lr=1` should mean 1.0) deserialize strictly, so widen them against the
/// default-config template before deserializing.
fn coerce_numbers(template: &toml::Value, value: &mut toml::Value) {
    match (template, value) {
        (toml::Value::Table(t), toml::Value::Table(v)) => {
            for (key, val) in v.iter_mut() {
                if let Some(tmpl) = t.get(key) {
                    coerce_numbers(tmpl, val);
                }
            }
        }
        (toml::Value::Float(_), v @ toml::Value::Integer(_)) => {
            let i = v.as_integer().unwrap();
            *v = toml::Value::Float(i as f64);
        }
        (toml::Value::Array(t), toml::Value::Array(v)) => {
            if let Some(tmpl) = t.first() {
                for item in v.iter_mut() {
                    coerce_numbers(tmpl, item);
                }
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = RunConfig::default();
        let text = config.to_toml();
        let back = RunConfig::parse(&text, &[]).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn partial_document_fills_remaining_defaults() {
        let text = "seed = 7\n[sensors]\nlidar = false\n[odometry]\nwindow = 6\n";
        let config = RunConfig::parse(text, &[]).unwrap();
        assert_eq!(config.seed, 7);
        assert!(!config.sensors.lidar);
        assert!(config.sensors.gps);
        assert_eq!(config.odometry.window, 6);
        assert_eq!(config.odometry.max_iterations, 20);
    }

    #[test]
    fn overrides_replace_file_values() {
        let text = "[odometry]\nwindow = 6\n";
        let overrides = vec![
            "odometry.window=8".to_string(),
            "sensors.gps=false".to_string(),
            "dataset=data/run1".to_string(),
            "agent.lr=0.001".to_string(),
        ];
        let config = RunConfig::parse(text, &overrides).unwrap();
        assert_eq!(config.odometry.window, 8);
        assert!(!config.sensors.gps);
        assert_eq!(config.dataset, PathBuf::from("data/run1"));
        assert_eq!(config.agent.lr, 0.001);
    }

    #[test]
    fn integer_literal_widens_into_float_field() {
        let config = RunConfig::parse("", &["pose_graph.gps_sigma=2".to_string()]).unwrap();
        assert_eq!(config.pose_graph.gps_sigma, 2.0);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("[odometry]\nwidnow = 6\n", &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)), "{err}");
        let err = RunConfig::parse("", &["odometry.widnow=6".to_string()]).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)), "{err}");
    }

    #[test]
    fn malformed_override_is_reported() {
        for bad in ["odometry.window", "=5", "a..b=1"] {
            let err = RunConfig::parse("", &[bad.to_string()]).unwrap_err();
            assert!(matches!(err, ConfigError::BadOverride(_)), "{bad}: {err}");
        }
    }

    #[test]
    fn camera_and_imu_are_mandatory() {
        let err = RunConfig::parse("[sensors]\ncamera = false\n", &[]).unwrap_err();
        assert!(matches!(err, ConfigError::MinimumSensors));
        let err = RunConfig::parse("", &["sensors.imu=false".to_string()]).unwrap_err();
        assert!(matches!(err, ConfigError::MinimumSensors));
    }

    #[test]
    fn imu_gap_windows_parse_as_nested_arrays() {
        let text = "[frontend]\nimu_gaps = [[1.0, 2.0], [5.5, 6.0]]\n";
        let config = RunConfig::parse(text, &[]).unwrap();
        assert_eq!(config.frontend.imu_gaps, vec![[1.0, 2.0], [5.5, 6.0]]);
    }
}
