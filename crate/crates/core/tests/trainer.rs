use std::sync::LazyLock;
use std::time::{Duration, Instant};

use csf_core::corpus::{expand, DatasetSplit, ExpandConfig, Sample, TemplateBank};
use csf_core::model::{Layout, Model, ModelConfig};
use csf_core::schema::SlotName;
use csf_core::tensor::Tensor;
use csf_core::tokenizer::{self, Encoding, TokenizerModel};
use csf_core::trainer::{clip_grad_norm, multi_head_loss, train, TrainConfig, Trainer};

static DESK: LazyLock<DatasetSplit> = LazyLock::new(|| {
    expand(
        &TemplateBank::default_bank(),
        &ExpandConfig {
            target_train: 8000,
            target_val: 900,
            ..ExpandConfig::default()
        },
    )
    .unwrap()
});

/// The first 50 training samples, used as both train and val.
fn toy() -> DatasetSplit {
    let samples: Vec<Sample> = DESK.train[..50].to_vec();
    DatasetSplit {
        train: samples.clone(),
        val: samples,
    }
}

fn toy_tokenizer(data: &DatasetSplit) -> TokenizerModel {
    let texts: Vec<&str> = data.train.iter().map(|s| s.text.as_str()).collect();
    tokenizer::train(&texts, 1000).unwrap().model
}

fn small_model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        hidden: 32,
        layers: 1,
        ffn: 64,
        vocab,
        ..ModelConfig::default()
    }
}

fn batch(data: &[Sample], tok: &TokenizerModel, n: usize) -> (Vec<Encoding>, Vec<[usize; 9]>) {
    data[..n].iter().map(|s| (tok.encode(&s.text, 64), s.labels.indices())).unzip()
}

#[test]
fn fifty_sample_toy_set_is_memorized_within_thirty_epochs() {
    let start = Instant::now();
    let data = toy();
    let tok = toy_tokenizer(&data);
    let model = ModelConfig {
        vocab: 1000,
        ..ModelConfig::desk()
    };
    let cfg = TrainConfig {
        batch: 10,
        max_lr: 1e-3,
        epochs: 30,
        ..TrainConfig::default()
    };
    let out = train(&model, &cfg, &data, &tok, &mut |_| {}).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(out.history.epochs.len(), 30);
    let first = out.history.epochs.iter().position(|r| r.average == 1.0);
    assert!(first.is_some(), "never reached 100%: best {:.4}", out.best_report.average);
    assert_eq!(out.best_report.average, 1.0);
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
}

#[test]
fn one_small_step_lowers_the_loss_on_a_fixed_batch() {
    let data = toy();
    let tok = toy_tokenizer(&data);
    let (enc, labels) = batch(&data.train, &tok, 16);
    let mut lowered = 0;
    for seed in 0..5 {
        let cfg = ModelConfig {
            dropout: 0.0,
            ..small_model_config(1000)
        };
        let model = Model::init(cfg, seed).unwrap();
        let before = multi_head_loss(&model.forward(&enc, Layout::Padded).unwrap(), &labels).unwrap();
        let mut trainer = Trainer::new(model, TrainConfig { seed, ..TrainConfig::default() }).unwrap();
        trainer.step(&enc, &labels, 1e-4).unwrap();
        let after = multi_head_loss(&trainer.model().forward(&enc, Layout::Padded).unwrap(), &labels).unwrap();
        if after < before {
            lowered += 1;
        }
    }
    assert!(lowered >= 4, "only {lowered}/5 seeds lowered the loss");
}

#[test]
fn same_seed_gives_identical_loss_sequence() {
    let data = toy();
    let tok = toy_tokenizer(&data);
    let model = small_model_config(1000);
    let cfg = TrainConfig {
        batch: 8,
        epochs: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(&model, &cfg, &data, &tok, &mut |_| {}).unwrap();
    let b = train(&model, &cfg, &data, &tok, &mut |_| {}).unwrap();
    assert_eq!(a.history.loss_trace, b.history.loss_trace);
    assert_eq!(a.history.lr_trace, b.history.lr_trace);
    assert_eq!(a.final_model.params(), b.final_model.params());

    let c = train(&model, &TrainConfig { seed: 10, ..cfg }, &data, &tok, &mut |_| {}).unwrap();
    assert_ne!(a.history.loss_trace, c.history.loss_trace);
}

#[test]
fn history_and_step_count_follow_the_schedule() {
    let data = toy();
    let tok = toy_tokenizer(&data);
    let cfg = TrainConfig {
        batch: 16,
        epochs: 3,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let out = train(&small_model_config(1000), &cfg, &data, &tok, &mut |r| seen.push(r.epoch)).unwrap();
    // ceil(50 / 16) = 4 steps per epoch, the short batch included.
    assert_eq!(out.steps, 12);
    assert_eq!(out.history.lr_trace.len(), 12);
    assert_eq!(seen, vec![1, 2, 3]);
    let schedule = cfg.schedule(50).unwrap();
    for (step, &lr) in out.history.lr_trace.iter().enumerate() {
        assert_eq!(lr, schedule.lr(step).unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.jsonl");
    out.history.write_jsonl(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 1);
    assert_eq!(first["accuracies"].as_array().unwrap().len(), 9);
}

#[test]
fn clipped_real_gradients_respect_the_bound() {
    let data = toy();
    let tok = toy_tokenizer(&data);
    let (enc, labels) = batch(&data.train, &tok, 16);
    let model = Model::init(small_model_config(1000), 3).unwrap();
    let mut trainer = Trainer::new(model, TrainConfig::default()).unwrap();
    let (_, mut grads) = trainer.gradients(&enc, &labels).unwrap();
    for g in grads.iter_mut() {
        for x in g.data_mut() {
            *x *= 100.0;
        }
    }
    let before = clip_grad_norm(&mut grads, 1.0);
    assert!(before > 1.0);
    let after: f64 = grads
        .iter()
        .flat_map(Tensor::data)
        .map(|&x| (x as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(after <= 1.0 + 1e-6, "post-clip norm {after}");
}

#[test]
fn perturbing_one_head_changes_only_its_logits() {
    let data = toy();
    let tok = toy_tokenizer(&data);
    let (enc, _) = batch(&data.train, &tok, 4);
    let base = Model::init(small_model_config(1000), 1).unwrap();
    let reference = base.forward(&enc, Layout::Trimmed).unwrap();
    for slot in SlotName::ALL {
        let mut model = base.clone();
        let weight = model.param_mut(&format!("heads.{}.weight", slot.as_str())).unwrap();
        for x in weight.data_mut() {
            *x += 0.5;
        }
        let out = model.forward(&enc, Layout::Trimmed).unwrap();
        for other in SlotName::ALL {
            let same = out.logits[other.index()] == reference.logits[other.index()];
            assert_eq!(same, other != slot, "perturbing {slot:?} affected {other:?}");
        }
    }
}

#[test]
fn batched_forward_matches_single_forwards() {
    let data = toy();
    let tok = toy_tokenizer(&data);
    let (enc, _) = batch(&data.train, &tok, 6);
    let model = Model::init(small_model_config(1000), 2).unwrap();
    for layout in [Layout::Trimmed, Layout::Padded] {
        let all = model.forward(&enc, layout).unwrap();
        for (row, e) in enc.iter().enumerate() {
            let one = model.forward(std::slice::from_ref(e), layout).unwrap();
            for (slot, logits) in one.logits.iter().enumerate() {
                for (a, b) in logits.row(0).iter().zip(all.logits[slot].row(row)) {
                    assert!((a - b).abs() < 1e-5, "{layout:?} row {row} slot {slot}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let data = toy();
    let tok = toy_tokenizer(&data);
    let (enc, labels) = batch(&data.train, &tok, 3);
    let cfg = ModelConfig {
        dropout: 0.0,
        ..small_model_config(1000)
    };
    let model = Model::init(cfg, 4).unwrap();
    let mut trainer = Trainer::new(model.clone(), TrainConfig::default()).unwrap();
    let (_, grads) = trainer.gradients(&enc, &labels).unwrap();
    let loss_with = |m: &Model| multi_head_loss(&m.forward(&enc, Layout::Trimmed).unwrap(), &labels).unwrap();
    let eps = 1e-2f32;
    let mut checked = 0;
    for (p, spec) in model.specs().iter().enumerate() {
        let g = &grads[p];
        // The largest-gradient coordinate of every tensor: small gradients
        // drown in f32 rounding of the loss.
        let (idx, &analytic) = g
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        if analytic.abs() < 1e-3 {
            continue;
        }
        let mut plus = model.clone();
        plus.params_mut()[p].data_mut()[idx] += eps;
        let mut minus = model.clone();
        minus.params_mut()[p].data_mut()[idx] -= eps;
        let numeric = (loss_with(&plus) - loss_with(&minus)) / (2.0 * eps as f64);
        let err = (analytic as f64 - numeric).abs() / 1f64.max(numeric.abs());
        assert!(err < 2e-3, "{}[{idx}]: analytic {analytic} numeric {numeric}", spec.name);
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} tensors had usable gradients");
}
