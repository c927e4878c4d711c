use coseg_core::network::{ModelConfig, ModelGraph, TABLE_VARIANTS};
use coseg_core::sampler::TumorReference;
use coseg_core::train::TrainConfig;

#[test]
fn documented_training_config_parses() {
    let v: serde_json::Value = serde_json::from_str(
        r#"{
          "model": {"variant_name": "E^{t1,t2}E^{pet}-D^{t2}D^{pet}"},
          "optimizer": {"lr": 1e-4},
          "lr_schedule": {"factor": 0.5, "patience": 8},
          "max_epochs": 300,
          "early_stop_patience": 40,
          "patches_per_patient": 50,
          "sampler": {"size": [256, 256, 16], "tumor_reference": "union_of_masks"},
          "augment": {},
          "seed": 1
        }"#,
    )
    .unwrap();
    let cfg = TrainConfig::from_json(&v).unwrap();
    assert_eq!(cfg.model.variant_name, "E^{t1,t2}E^{pet}-D^{t2}D^{pet}");
    assert_eq!(cfg.sampler.tumor_reference, TumorReference::UnionOfMasks);
    assert!(cfg.augment.is_some());
    assert_eq!(cfg.lr_schedule.patience, 8);
}

#[test]
fn explicit_config_round_trips_for_every_variant() {
    for name in TABLE_VARIANTS {
        let cfg = ModelConfig::from_variant(name).unwrap();
        let json = serde_json::to_value(&cfg).unwrap();
        let back = ModelConfig::from_json(&json).unwrap();
        assert_eq!(back, cfg, "{name}");
        let a = ModelGraph::<f32>::build(&cfg).unwrap().count_parameters();
        let b = ModelGraph::<f32>::build(&back).unwrap().count_parameters();
        assert_eq!(a, b);
    }
}

#[test]
fn training_config_rejects_unknown_variant() {
    let v = serde_json::json!({"model": {"variant_name": "E^{mr}-D^{t2}"}});
    assert!(TrainConfig::from_json(&v).is_err());
}
