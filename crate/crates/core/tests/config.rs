use std::path::PathBuf;

use samamba_core::config::RunConfig;
use samamba_core::model::{forward_macs, param_count, ModelConfig};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_files_match_presets() {
    assert_eq!(RunConfig::load(&configs_dir().join("desk.toml")).unwrap(), RunConfig::desk());
    assert_eq!(RunConfig::load(&configs_dir().join("paper.toml")).unwrap(), RunConfig::paper());
}

#[test]
fn round_trip_and_partial_files() {
    let text = RunConfig::paper().to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::paper());
    let partial = RunConfig::from_toml("[train.optimizer]\nlr = 0.001\n[model.sam]\ndepth = 6\n").unwrap();
    assert_eq!(partial.train.optimizer.lr, 0.001);
    assert_eq!(partial.train.optimizer.weight_decay, 1e-5);
    assert_eq!(partial.model.sam.depth, 6);
    assert_eq!(partial.model.sam.heads, 4);
    assert!(RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").is_err());
}

#[test]
fn invalid_values_are_rejected() {
    let mut c = RunConfig::desk();
    c.inference.patch = 40;
    assert!(c.validate().is_err());
    let mut c = RunConfig::desk();
    c.preprocess.p_low = 99.5;
    assert!(c.validate().is_err());
    let mut c = RunConfig::desk();
    c.class_names.pop();
    assert!(c.validate().is_err());
    let mut c = RunConfig::desk();
    c.model.sam.deep_depths = vec![1];
    assert!(c.validate().is_err());
}

#[test]
fn decoder_macs_by_hand() {
    let est = forward_macs(&ModelConfig::desk(), 32);
    let fuse = 512 * 64 * (8 + 16 + 32 + 64);
    let refine = 8 * 64 * 128 * 27 + 64 * 32 * 128 * 27 + 512 * 16 * 64 * 27 + 4096 * 8 * 32 * 27;
    let full = 32768 * (8 * 16 * 27 + 8 * 8 * 27 + 8 * 8 * 27 + 3 * 8);
    assert_eq!(est.decoder, fuse + refine + full);
    assert_eq!(est.total(), est.state_space + est.transformer + est.bridges + est.decoder);
    assert!(forward_macs(&ModelConfig::paper(), 96).total() > est.total());
    assert!(param_count(&ModelConfig::paper()) > param_count(&ModelConfig::desk()));
}
