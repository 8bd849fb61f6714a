use esma_cli::config::{parse_config, to_toml, AttackPipelineConfig, ConfigError, ToyDensityConfig, WatermarkEvalConfig};
use esma_core::evaluation::{AttackMethod, ExperimentConfig, Protocol};

#[test]
fn minimal_exp1_config_fills_defaults() {
    let cfg: ExperimentConfig = parse_config("protocol = \"exp1\"\n").unwrap();
    assert_eq!(cfg.protocol, Protocol::Exp1);
    assert_eq!(cfg.method, AttackMethod::Esma);
    assert_eq!(cfg.esma.generator.epsilon, 16.0 / 255.0);
    assert_eq!(cfg.iterative.epsilon, 16.0 / 255.0);
    assert_eq!(cfg.esma.q, 2);
    assert_eq!(cfg.esma.generator.nu, 1.0);
    assert_eq!(cfg.watermark.esma.generator.distortion_weight, 150.0);
    cfg.validate().unwrap();
}

#[test]
fn every_unknown_key_is_reported_at_once() {
    let text = r#"
protocol = "exp1"
bogus = 1

[esma]
q = 3
wat = 2

[esma.generator]
epsilonn = 0.1

[watermark.hidden]
strenght = 0.1
"#;
    match parse_config::<ExperimentConfig>(text) {
        Err(ConfigError::UnknownKeys(keys)) => {
            let mut keys = keys;
            keys.sort();
            assert_eq!(keys, vec!["bogus", "esma.generator.epsilonn", "esma.wat", "watermark.hidden.strenght"]);
        }
        other => panic!("expected unknown keys, got {other:?}"),
    }
}

#[test]
fn unknown_key_in_tagged_dataset_is_named() {
    let text = "[dataset]\nkind = \"prototype\"\ntrain_per_clas = 5\n";
    let err = parse_config::<ExperimentConfig>(text).unwrap_err();
    assert!(err.to_string().contains("train_per_clas"), "{err}");
}

#[test]
fn wrong_type_names_its_path() {
    let err = parse_config::<ExperimentConfig>("[esma]\nq = \"two\"\n").unwrap_err();
    match err {
        ConfigError::Invalid { path, .. } => assert_eq!(path, "esma.q"),
        other => panic!("expected invalid value, got {other:?}"),
    }
}

#[test]
fn syntax_errors_are_distinguished() {
    assert!(matches!(parse_config::<ExperimentConfig>("protocol = "), Err(ConfigError::Syntax(_))));
}

#[test]
fn experiment_config_round_trips() {
    let text = r#"
protocol = "table1_ablation"
seed = 7
seeds = [1, 2, 3]
ablation_q = 4

[dataset]
kind = "prototype"
train_per_class = 20

[esma]
bem = { kind = "standard", crop_min_area = 0.8, flip_probability = 0.5, brightness = 0.1, contrast = 0.1 }

[esma.generator]
distortion_weight = 150.0
"#;
    let cfg: ExperimentConfig = parse_config(text).unwrap();
    let again: ExperimentConfig = parse_config(&to_toml(&cfg).unwrap()).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(cfg.seeds, vec![1, 2, 3]);
}

#[test]
fn module_configs_round_trip_from_defaults() {
    let a = AttackPipelineConfig::default();
    assert_eq!(a, parse_config::<AttackPipelineConfig>(&to_toml(&a).unwrap()).unwrap());
    let t = ToyDensityConfig::default();
    assert_eq!(t, parse_config::<ToyDensityConfig>(&to_toml(&t).unwrap()).unwrap());
    let w = WatermarkEvalConfig::default();
    assert_eq!(w, parse_config::<WatermarkEvalConfig>(&to_toml(&w).unwrap()).unwrap());
}

#[test]
fn empty_file_is_all_defaults() {
    let cfg: ExperimentConfig = parse_config("").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}
