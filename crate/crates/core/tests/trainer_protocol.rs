mod common;

use radaug_core::domain::{SampleTuple, Weather};
use radaug_core::model::{ArchDescriptor, PoseModel};
use radaug_core::perturb::{PerturberConfig, StageEvent};
use radaug_core::storage::read_checkpoint;
use radaug_core::synth::{generate_scene, SceneSpec, TrajectorySpec, WeatherTable};
use radaug_core::trainer::{
    epoch_order, init_model, run_ablation, run_mixing_study, run_training, AblationVariant, AuditEvent, AuditRecord,
    CheckpointPolicy, MixMode, MixingSpec, MixingTable, NullAudit, TrainConfig,
};

fn cfg(perturber: PerturberConfig, mix_mode: MixMode) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_tuples: 4,
        lr: 1e-3,
        perturber,
        mix_mode,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn disabled_augmentation_equals_plain_loop() {
    let ds = common::overcast(1, 14);
    let init = init_model(&ArchDescriptor::default(), 2, &ds).unwrap();
    let c = cfg(PerturberConfig::none(), MixMode::OriginalOnly);
    let out = run_training(&ds, init.clone(), &c, &mut NullAudit, None).unwrap();

    let mut m = init;
    let mut params = c.loss;
    for epoch in 0..c.epochs {
        let order = epoch_order(c.seed, epoch, ds.tuples().len());
        for chunk in order.chunks(c.batch_tuples) {
            let batch: Vec<SampleTuple> = chunk.iter().map(|&i| ds.tuples()[i].clone()).collect();
            params = m.train_step(&batch, &params, c.lr).unwrap().params;
        }
    }
    assert_eq!(m.params(), out.model.params());
    assert_eq!(params, out.loss);
}

#[test]
fn augmentation_doubles_steps() {
    let ds = common::overcast(1, 14);
    let init = init_model(&ArchDescriptor::default(), 2, &ds).unwrap();
    let plain = run_training(&ds, init.clone(), &cfg(PerturberConfig::rada(), MixMode::OriginalOnly), &mut NullAudit, None).unwrap();
    let mixed = run_training(&ds, init, &cfg(PerturberConfig::rada(), MixMode::OriginalPlusAdversarial), &mut NullAudit, None).unwrap();
    for (a, b) in plain.report.epochs.iter().zip(&mixed.report.epochs) {
        assert_eq!(2 * a.steps, b.steps);
    }
}

fn stage_rank(rec: &AuditRecord) -> u8 {
    match &rec.event {
        AuditEvent::Stage(StageEvent::Threshold { .. }) => 0,
        AuditEvent::Stage(StageEvent::Gradient { .. }) => 1,
        AuditEvent::Stage(StageEvent::Clamp { .. }) => 2,
        AuditEvent::Stage(StageEvent::Clip { .. }) => 3,
        AuditEvent::Update(_) => 4,
    }
}

#[test]
fn audit_log_shows_stage_order_and_frozen_weights() {
    let ds = common::overcast(3, 14);
    let init = init_model(&ArchDescriptor::default(), 4, &ds).unwrap();
    let mut audit = Vec::new();
    run_training(&ds, init, &cfg(PerturberConfig::rada(), MixMode::OriginalPlusAdversarial), &mut audit, None).unwrap();
    let mut batches = 0;
    for group in audit.chunk_by(|a, b| (a.epoch, a.batch) == (b.epoch, b.batch)) {
        batches += 1;
        let ranks: Vec<u8> = group.iter().map(stage_rank).collect();
        assert!(ranks.windows(2).all(|w| w[0] <= w[1]), "{ranks:?}");
        assert_eq!(ranks[0], 0);
        assert_eq!(ranks.iter().filter(|&&r| r == 4).count(), 2);
        let mut frozen = None;
        for rec in group {
            if let AuditEvent::Stage(StageEvent::Gradient { checksum_before, checksum_after, .. }) = &rec.event {
                assert_eq!(checksum_before, checksum_after);
                let f = frozen.get_or_insert_with(|| checksum_before.clone());
                assert_eq!(f, checksum_before);
            }
        }
    }
    assert_eq!(batches, 2 * 3);
}

#[test]
fn identical_inputs_give_identical_runs() {
    let ds = common::overcast(5, 14);
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let init = init_model(&ArchDescriptor::default(), 6, &ds).unwrap();
        let policy = CheckpointPolicy { dir: dir.path().join(sub), config_hash: "h".into() };
        run_training(&ds, init, &cfg(PerturberConfig::gaussian(), MixMode::OriginalPlusAdversarial), &mut NullAudit, Some(&policy)).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(a.report.loss_curve()), bits(b.report.loss_curve()));
    let read = |sub: &str| std::fs::read(dir.path().join(sub).join("final.ckpt")).unwrap();
    assert_eq!(read("a"), read("b"));
    let (m, _) = read_checkpoint(&dir.path().join("a/final.ckpt")).unwrap();
    assert_eq!(m.params(), a.model.params());
}

#[test]
fn ablation_variants_share_batches() {
    let train = common::overcast(2, 10);
    let test = common::dataset(2, 6, 0.5, &[(Weather::Snow, 1.0)], 3);
    let entries = run_ablation(&train, &test, &ArchDescriptor::default(), 1, &cfg(PerturberConfig::rada(), MixMode::OriginalPlusAdversarial)).unwrap();
    assert_eq!(entries.len(), 4);
    let variants: Vec<_> = entries.iter().map(|e| e.variant).collect();
    assert_eq!(variants, AblationVariant::ALL.to_vec());
    let digest = &entries[0].outcome.report.batch_order_digest;
    assert!(entries.iter().all(|e| &e.outcome.report.batch_order_digest == digest));
}

#[test]
fn mixing_table_structure() {
    let scene = generate_scene(&SceneSpec { seed: 3, ..SceneSpec::default() }).unwrap();
    let spec = MixingSpec {
        source: Weather::Overcast,
        target: Weather::Rain,
        fractions: vec![0.0, 0.2, 0.4],
        train: TrajectorySpec { frames: 10, offset: 0.0 },
        test: TrajectorySpec { frames: 4, offset: 0.5 },
        tuple_len: 3,
    };
    let c = TrainConfig { epochs: 1, ..cfg(PerturberConfig::rada(), MixMode::OriginalPlusAdversarial) };
    let table = run_mixing_study(&scene, &WeatherTable::default(), &spec, &ArchDescriptor::default(), 1, &c).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert_eq!(table.rows[0].target_frames, 0);
    assert_eq!(table.rows[1].target_frames, 2);
    assert_eq!(table.rows[2].target_frames, 4);
    assert_eq!(MixingTable::from_csv(&table.to_csv()).unwrap(), table);
}
