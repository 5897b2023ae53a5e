use super::*;
use crate::reasoning::{ModelConfig, ModelDims};
use crate::world::{generate_dataset, GeneratedDataset, WorldConfig};

fn tiny_world() -> GeneratedDataset {
    generate_dataset(&WorldConfig {
        n_train: 6,
        n_validation: 2,
        k_min: 3,
        k_max: 4,
        n_obj: 6,
        d_emb: 8,
        d_vis: 12,
        points_per_instance: 16,
        ..WorldConfig::default()
    })
    .unwrap()
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        hidden: 8,
        heads: 2,
        layers: 1,
        init_seed: 5,
    }
}

fn tiny_model(data: &GeneratedDataset) -> SceneGraphModel {
    let c = &data.config;
    SceneGraphModel::new(
        tiny_model_config(),
        ModelDims {
            n_obj: c.n_obj,
            n_rel: c.n_rel,
            d_vis: c.d_vis,
            d_emb: c.d_emb,
        },
    )
    .unwrap()
}

fn tiny_train(vlsat: bool) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 4,
        vlsat,
        ..TrainConfig::default()
    }
}

#[test]
fn embedding_init_makes_each_class_its_own_argmax() {
    let data = tiny_world();
    let mut model = tiny_model(&data);
    init_classifier_from_embeddings(&mut model, &data.provider).unwrap();
    let first = model.params.flatten();
    init_classifier_from_embeddings(&mut model, &data.provider).unwrap();
    assert_eq!(first, model.params.flatten());
    let w = model.params.get(model.threed.object_classifier.weight);
    for c in 0..data.config.n_obj {
        let x = data.provider.object_embedding(c);
        let logits: Vec<f64> = (0..w.rows())
            .map(|r| w.row_slice(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        assert!(logits.iter().enumerate().all(|(r, &l)| r == c || l < logits[c]));
    }
}

#[test]
fn embedding_init_rejects_width_mismatch() {
    let data = tiny_world();
    let c = &data.config;
    let mut model = SceneGraphModel::new(
        ModelConfig {
            d: 4,
            hidden: 4,
            heads: 2,
            layers: 1,
            init_seed: 0,
        },
        ModelDims {
            n_obj: c.n_obj,
            n_rel: c.n_rel,
            d_vis: c.d_vis,
            d_emb: c.d_emb,
        },
    )
    .unwrap();
    assert!(matches!(
        init_classifier_from_embeddings(&mut model, &data.provider),
        Err(Error::Config(_))
    ));
}

#[test]
fn baseline_logs_have_no_oracle_terms() {
    let data = tiny_world();
    let mut t = Trainer::new(tiny_model(&data), &data.train, &data.provider, tiny_train(false)).unwrap();
    let log = t.run_epoch().unwrap();
    assert_eq!(log.epoch, 1);
    assert!(log.loss_tri.is_none() && log.loss_node.is_none() && log.loss_obj_or.is_none());
    let json = serde_json::to_string(&log).unwrap();
    assert!(json.contains("\"loss_tri\":null"));
}

#[test]
fn joint_logs_carry_every_term() {
    let data = tiny_world();
    let mut t = Trainer::new(tiny_model(&data), &data.train, &data.provider, tiny_train(true)).unwrap();
    let log = t.run_epoch().unwrap();
    assert!(log.loss_tri.is_some() && log.loss_node.is_some() && log.loss_pred_or.is_some());
    assert_eq!(log.lr, 1e-3);
}

#[test]
fn runs_are_reproducible() {
    let data = tiny_world();
    let run = || {
        let mut t = Trainer::new(tiny_model(&data), &data.train, &data.provider, tiny_train(true)).unwrap();
        t.run(|_, _| Ok(())).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let data = tiny_world();
    let cfg = crate::config::RunConfig {
        train: tiny_train(true),
        model: tiny_model_config(),
        ..Default::default()
    };
    let mut full = Trainer::new(tiny_model(&data), &data.train, &data.provider, cfg.train.clone()).unwrap();
    let full_logs = full.run(|_, _| Ok(())).unwrap();

    let mut part = Trainer::new(tiny_model(&data), &data.train, &data.provider, cfg.train.clone()).unwrap();
    let mut logs = vec![part.run_epoch().unwrap(), part.run_epoch().unwrap()];
    let ck = Checkpoint::capture(&part.model, &part.optimizer, part.epoch, &cfg, "v");
    let bytes = ck.to_bytes().unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    let (model, opt) = loaded.restore().unwrap();
    let mut resumed = Trainer::resume(model, opt, loaded.epoch, &data.train, &data.provider, cfg.train.clone()).unwrap();
    logs.extend(resumed.run(|_, _| Ok(())).unwrap());
    assert_eq!(logs, full_logs);
    assert_eq!(resumed.model.params.flatten(), full.model.params.flatten());
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let data = tiny_world();
    let model = tiny_model(&data);
    let opt = AdamW::new(AdamWConfig::default(), &model.params);
    let ck = Checkpoint::capture(&model, &opt, 0, &Default::default(), "v");
    let mut other = ck.clone();
    other.epoch = 3;
    assert!(Checkpoint::from_bytes(&other.to_bytes().unwrap()).is_err());
}
