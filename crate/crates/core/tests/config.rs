use std::path::PathBuf;

use glims::config::{Overrides, RunConfig};
use glims::model::ModelConfig;
use glims::Error;

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn empty_file_gives_defaults() {
    let c = RunConfig::parse("").unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!(c.model, ModelConfig::full());
    assert_eq!(c.infer.overlap, 0.8);
    c.validate().unwrap();
}

#[test]
fn partial_sections_keep_remaining_defaults() {
    let c = RunConfig::parse("[model]\nbase_channels = 8\n[train.optimizer]\nlr = 2e-3\n").unwrap();
    assert_eq!(c.model.base_channels, 8);
    assert_eq!(c.model.patch_size, 96);
    assert_eq!(c.train.optimizer.lr, 2e-3);
    assert_eq!(c.train.optimizer.weight_decay, 1e-5);
}

#[test]
fn unknown_keys_are_rejected() {
    for text in [
        "[model]\nwindw = 7\n",
        "[trian]\nepochs = 1\n",
        "sed = 1\n",
        "[data.phantom]\nnoise = 0\n",
    ] {
        let err = RunConfig::parse(text).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{text}: {err}");
    }
}

#[test]
fn overrides_replace_file_values() {
    let mut c = RunConfig::parse("seed = 4\n[train]\nepochs = 9\n").unwrap();
    c.apply(&Overrides {
        epochs: Some(2),
        overlap: Some(0.25),
        threads: Some(1),
        ..Overrides::default()
    });
    assert_eq!(
        (c.seed, c.train.epochs, c.infer.overlap, c.infer.threads),
        (4, 2, 0.25, 1)
    );
    c.apply(&Overrides {
        seed: Some(5),
        patch_size: Some(64),
        ..Overrides::default()
    });
    assert_eq!((c.seed, c.model.patch_size), (5, 64));
}

#[test]
fn validation_collects_problems_from_every_section() {
    let mut c = RunConfig::default();
    c.model.patch_size = 40;
    c.train.epochs = 0;
    c.data.count = 0;
    c.data.phantom.classes = 3;
    c.infer.overlap = 1.0;
    let Err(Error::InvalidConfig(errs)) = c.validate() else {
        panic!("expected a config error");
    };
    for section in ["[model]", "[train]", "[data]", "[infer]"] {
        assert!(
            errs.iter().any(|e| e.starts_with(section)),
            "{section} missing from {errs:?}"
        );
    }
    assert_eq!(errs.len(), 5, "{errs:?}");
}

#[test]
fn serialised_config_parses_back() {
    let mut c = RunConfig::default();
    c.model = ModelConfig::reduced();
    c.data.phantom.means = vec![vec![0.0, 1.0], vec![0.5, 0.25]];
    assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
}

#[test]
fn shipped_configs_are_valid() {
    let overfit = RunConfig::load(&shipped("overfit.toml")).unwrap();
    overfit.validate().unwrap();
    assert_eq!(overfit.model, ModelConfig::reduced());
    assert_eq!(overfit.train.max_steps, 300);
    let full = RunConfig::load(&shipped("full.toml")).unwrap();
    full.validate().unwrap();
    assert_eq!(full.model, ModelConfig::full());
    assert!(matches!(
        RunConfig::load(&shipped("absent.toml")),
        Err(Error::Io { .. })
    ));
}
