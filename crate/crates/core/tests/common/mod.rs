#![allow(dead_code)]

use selc::config::{ExperimentConfig, MethodKind, MethodSpec, NoiseSpec};
use selc::dataset::TrainTest;
use selc::experiment::load_dataset;

pub const DESK_TOML: &str = include_str!("../../../../configs/desk.toml");

/// The in-repo desk benchmark with its methods replaced.
pub fn desk_config(methods: Vec<MethodSpec>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(DESK_TOML).unwrap();
    cfg.methods = methods;
    cfg
}

pub fn desk_data() -> TrainTest {
    load_dataset(&desk_config(vec![MethodSpec::new(MethodKind::Ce)]).dataset).unwrap()
}

pub fn clean(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.noise = NoiseSpec::None;
    cfg
}
