use pgfl::checkpoint::Checkpoint;
use pgfl::model::{Ablation, Model, ModelConfig};
use pgfl::params::Branch;
use pgfl::rng::stream;
use pgfl::trainer::{Adam, AdamConfig};
use pgfl::Error;

fn full_checkpoint() -> Checkpoint {
    let model = Model::<f32>::new(ModelConfig::default(), &mut stream(9, &[])).unwrap();
    let mut optimizer = Adam::new(AdamConfig::default(), &model.params);
    optimizer.step = 17;
    for (i, m) in optimizer.m.iter_mut().enumerate() {
        m.data_mut().iter_mut().for_each(|v| *v = i as f32 * 0.5);
    }
    Checkpoint { model, optimizer: Some(optimizer), epoch: 8, step: 400, seed: 9 }
}

#[test]
fn save_restore_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ck = full_checkpoint();
    let a = dir.path().join("a.pgck");
    ck.save(&a).unwrap();
    let back = Checkpoint::load(&a).unwrap();
    assert_eq!(back, ck);
    let b = dir.path().join("b.pgck");
    back.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(!dir.path().join("b.pgck.partial").exists());
}

#[test]
fn corruption_is_detected() {
    let bytes = full_checkpoint().to_bytes();
    for at in [0, 20, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))), "flip at {at}");
    }
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]), Err(Error::Integrity(_))));
    assert!(matches!(Checkpoint::from_bytes(b"PGCK"), Err(Error::Integrity(_))));
}

#[test]
fn architecture_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.pgck");
    full_checkpoint().save(&path).unwrap();
    Checkpoint::load_for(&path, &ModelConfig::default()).unwrap();
    let mut wider = ModelConfig::default();
    wider.backbone.channels = vec![16, 32, 64, 128];
    assert!(matches!(Checkpoint::load_for(&path, &wider), Err(Error::Integrity(_))));
    let baseline = ModelConfig { switches: Ablation::Baseline.switches(), ..ModelConfig::default() };
    assert!(matches!(Checkpoint::load_for(&path, &baseline), Err(Error::Integrity(_))));
}

#[test]
fn mb_only_manifest_drops_pose_branches() {
    let ck = full_checkpoint();
    let full = ck.manifest();
    let mb = ck.export_mb_only().manifest();
    assert!(full.branches.contains_key(&Branch::Sab) && full.branches.contains_key(&Branch::Feb));
    assert_eq!(mb.branches.keys().copied().collect::<Vec<_>>(), vec![Branch::Backbone, Branch::MbHead]);
    assert!(mb.optimizer.is_none());
    assert!(mb.model.mb_only);
    let kept: Vec<_> = full.params.iter().filter(|p| matches!(p.branch, Branch::Backbone | Branch::MbHead)).collect();
    assert_eq!(mb.params.iter().collect::<Vec<_>>(), kept);
    let back = Checkpoint::from_bytes(&ck.export_mb_only().to_bytes()).unwrap();
    assert_eq!(back.model.params.trainable_count(), mb.params.iter().filter(|p| p.trainable).map(|p| p.shape.iter().product::<usize>()).sum::<usize>());
}
