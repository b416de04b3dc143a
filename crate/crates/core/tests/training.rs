//! Objective, sampling, determinism and resumption of the training loop.

mod common;

use std::path::PathBuf;

use common::rng;
use h3trans::config::RunConfig;
use h3trans::data::SplitDataset;
use h3trans::error::Error;
use h3trans::model::AblationVariant;
use h3trans::numeric::{Tape, Tensor2};
use h3trans::pipeline::synthesize;
use h3trans::trainer::{
    infonce_loss, infonce_on_tape, sample_batch, step_rng, Checkpoint, LogEvent, ObservedPairs,
    Trainer,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;

pub fn tiny() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.cfg");
    RunConfig::load(&path).unwrap()
}

fn tiny_split(seed: u64) -> SplitDataset {
    synthesize(&tiny().gen, seed).unwrap()
}

fn tiny_trainer(variant: AblationVariant, seed: u64, steps: usize) -> Trainer {
    let mut cfg = tiny();
    cfg.set("refresh_interval", "4").unwrap();
    cfg.set("log_every", "5").unwrap();
    cfg.train.seed = seed;
    cfg.train.steps = Some(steps);
    Trainer::new(
        tiny_split(seed).train,
        cfg.model.with_variant(variant),
        cfg.train,
    )
    .unwrap()
}

// ---- objective ----

#[test]
pub fn equal_scores_give_log_one_plus_negatives() {
    for n in [1usize, 64] {
        for s in [-2.0, 0.0, 0.7] {
            let want = (1.0 + n as f64).ln();
            assert!((infonce_loss(s, &vec![s; n], 0.2) - want).abs() <= 1e-12);
            let mut tape = Tape::new();
            let scores = tape.constant(Tensor2::filled(3, 1 + n, s));
            let loss = infonce_on_tape(&mut tape, scores, 0.2).unwrap();
            assert!((tape.value(loss).item() - want).abs() <= 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn loss_is_nonnegative_monotone_and_order_free(
        scores in prop::collection::vec(-3.0f64..3.0, 2..20),
        tau in 0.05f64..2.0,
        seed in any::<u64>(),
    ) {
        let (pos, negs) = (scores[0], &scores[1..]);
        let loss = infonce_loss(pos, negs, tau);
        prop_assert!(loss >= 0.0);
        let mut shuffled = negs.to_vec();
        shuffled.shuffle(&mut rng(seed));
        prop_assert!((infonce_loss(pos, &shuffled, tau) - loss).abs() <= 1e-12);

        let mut tape = Tape::new();
        let row = tape.constant(Tensor2::from_rows(std::slice::from_ref(&scores)));
        let l = infonce_on_tape(&mut tape, row, tau).unwrap();
        prop_assert!((tape.value(l).item() - loss).abs() <= 1e-12);
        let grads = tape.backward(l).unwrap();
        let g = grads.get(row).unwrap();
        prop_assert!(g.get(0, 0) < 0.0);
        for c in 1..scores.len() {
            prop_assert!(g.get(0, c) > 0.0);
        }
    }
}

// ---- sampling ----

#[test]
pub fn batches_follow_record_frequencies() {
    let split = tiny_split(4);
    let train = &split.train;
    let observed = ObservedPairs::new(train);
    let (batch_size, negatives, steps) = (256, 8, 200);
    let mut per_domain = vec![0usize; train.domains];
    for step in 0..steps {
        let batch = sample_batch(
            train,
            &observed,
            batch_size,
            negatives,
            &mut step_rng(9, step),
        )
        .unwrap();
        assert_eq!(batch.samples.len(), batch_size);
        let drawn: usize = batch.samples.iter().map(|s| s.negatives.len()).sum();
        assert_eq!(drawn, batch_size * negatives);
        for s in &batch.samples {
            per_domain[s.domain] += 1;
            assert!(s
                .negatives
                .iter()
                .all(|&i| train.domain_has_item(s.domain, i)));
            assert!(train.domain_has_item(s.domain, s.positive));
        }
    }
    let total = (batch_size * steps) as f64;
    for (m, &n) in per_domain.iter().enumerate() {
        let want = train.records.iter().filter(|r| r.domain == m).count() as f64
            / train.records.len() as f64;
        assert!(
            (n as f64 / total - want).abs() <= 0.02,
            "domain {m}: {} vs {want}",
            n as f64 / total
        );
    }
}

// ---- determinism and resumption ----

fn strip(events: &[LogEvent]) -> Vec<LogEvent> {
    events.iter().map(LogEvent::without_wall_time).collect()
}

#[test]
pub fn identical_seeds_train_identically() {
    for variant in [AblationVariant::EHIplus, AblationVariant::PHI] {
        let mut a = tiny_trainer(variant, 7, 12);
        let mut b = tiny_trainer(variant, 7, 12);
        let (ea, eb) = (
            a.run(&mut std::io::sink()).unwrap(),
            b.run(&mut std::io::sink()).unwrap(),
        );
        assert_eq!(strip(&ea), strip(&eb));
        assert_eq!(a.checkpoint(), b.checkpoint());
        if variant == AblationVariant::EHIplus {
            let refreshes: Vec<usize> = ea
                .iter()
                .filter_map(|e| match e {
                    LogEvent::Refresh { step, .. } => Some(*step),
                    _ => None,
                })
                .collect();
            assert_eq!(refreshes, vec![0, 4, 8]);
        }
    }
}

#[test]
pub fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let mut full = tiny_trainer(AblationVariant::EHIplus, 3, 14);
    let full_log = full.run(&mut std::io::sink()).unwrap();

    let mut first = tiny_trainer(AblationVariant::EHIplus, 3, 14);
    let mut head = first.run_until(10, &mut std::io::sink()).unwrap();
    let path = dir.path().join("mid.ckpt.json");
    first.checkpoint().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt, first.checkpoint());
    let mut second = Trainer::resume(tiny_split(3).train, &ckpt, first.config.clone()).unwrap();
    head.extend(second.run(&mut std::io::sink()).unwrap());

    assert_eq!(second.checkpoint(), full.checkpoint());
    // Interrupted on a log boundary, so even the windowed losses agree.
    assert_eq!(strip(&head), strip(&full_log));
}

#[test]
pub fn mismatched_checkpoints_are_refused() {
    let trainer = tiny_trainer(AblationVariant::HUplus, 5, 2);
    let ckpt = trainer.checkpoint();
    let other = trainer
        .model
        .config
        .clone()
        .with_variant(AblationVariant::EHIplus);
    assert!(matches!(
        ckpt.model(Some(&other)),
        Err(Error::Checkpoint(_))
    ));
    let wrong_seed = h3trans::trainer::TrainConfig {
        seed: 6,
        ..trainer.config.clone()
    };
    assert!(matches!(
        Trainer::resume(tiny_split(5).train, &ckpt, wrong_seed),
        Err(Error::Checkpoint(_))
    ));
    let smaller = synthesize(
        &h3trans::data::GenConfig {
            users: 20,
            ..tiny().gen
        },
        5,
    )
    .unwrap();
    assert!(Trainer::resume(smaller.train, &ckpt, trainer.config.clone()).is_err());
}

#[test]
pub fn non_finite_loss_aborts_with_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = tiny_trainer(AblationVariant::HUplus, 2, 10).with_out_dir(dir.path());
    trainer.step_once().unwrap();
    let emb = trainer.model.ids.embedding;
    trainer.model.params.get_mut(emb).data_mut().fill(f64::NAN);
    let err = trainer.step_once().unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let Error::NonFinite {
        step: 1,
        checkpoint: Some(path),
    } = err
    else {
        panic!("{err:?}")
    };
    assert!(path.ends_with("diagnostic-step1.ckpt.json") && path.exists());
}

// ---- learning ----

#[test]
pub fn loss_decreases_on_tiny_config() {
    for seed in 1..=3 {
        let mut trainer = tiny_trainer(AblationVariant::EHIplus, seed, 50);
        let events = trainer.run(&mut std::io::sink()).unwrap();
        let at = |n: usize| {
            events.iter().find_map(|e| match e {
                LogEvent::Step { step, loss, .. } if *step == n => Some(*loss),
                _ => None,
            })
        };
        let (early, late) = (at(5).unwrap(), at(50).unwrap());
        assert!(late < early, "seed {seed}: {late} !< {early}");
    }
}
