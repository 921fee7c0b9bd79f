//! Public-API round trip: datasets through disk, a short pretrain and
//! fine-tune, then evaluation of the saved checkpoint.

use xct_core::evaluation::{eval_reconstruction, ConstantReconstructor, OracleReconstructor};
use xct_core::models::CheckpointFile;
use xct_core::phantom::{
    load_paired_dataset, load_unpaired_set, sample_paired_dataset, sample_unpaired_set, save_paired_dataset,
    save_unpaired_set, ClassMix, StyleShiftParams,
};
use xct_core::training::{finetune, load_generator, pretrain, read_log, TrainConfig, BEST_CHECKPOINT, LOG_FILE};

fn cfg() -> TrainConfig {
    let mut c = TrainConfig::with_side(16);
    c.generator.widths = vec![4, 8];
    c.generator.out_width = 2;
    c.discriminator.widths = vec![4, 8];
    c.batch_size = 2;
    c.pretrain_epochs = 2;
    c.finetune_epochs = 1;
    c.validation_fraction = 0.25;
    c
}

#[test]
fn disk_round_trip_train_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let mix = ClassMix::uniform();
    let shift = StyleShiftParams {
        gamma: 1.4,
        contrast: 1.1,
        noise_sigma: 0.02,
        vignette: 0.0,
    };
    let paired = sample_paired_dataset(8, 16, &mix, 21).unwrap();
    let unpaired = sample_unpaired_set(6, 16, &mix, &shift, 22).unwrap();
    save_paired_dataset(&paired, &mix, tmp.path().join("p")).unwrap();
    save_unpaired_set(&unpaired, &mix, &shift, tmp.path().join("u")).unwrap();
    let (paired2, pm) = load_paired_dataset(tmp.path().join("p")).unwrap();
    let (unpaired2, um) = load_unpaired_set(tmp.path().join("u")).unwrap();
    assert_eq!(paired2.samples, paired.samples);
    assert_eq!(unpaired2.xrays(), unpaired.xrays());
    assert_eq!((pm.master_seed, um.master_seed), (21, 22));
    assert_eq!(um.shift, Some(shift));

    let pre_dir = tmp.path().join("pre");
    let pre = pretrain::<f32>(&cfg(), &paired2, Some(&pre_dir)).unwrap();
    let best = CheckpointFile::load(pre_dir.join(BEST_CHECKPOINT)).unwrap();
    let epochs = read_log(pre_dir.join(LOG_FILE))
        .unwrap()
        .into_iter()
        .filter(|r| r.kind == "epoch")
        .count();
    assert_eq!(epochs, 2);

    let ft = finetune::<f32>(&cfg(), &paired2, &unpaired2, &best, Some(&tmp.path().join("ft"))).unwrap();
    assert_ne!(ft.params, pre.params);

    let g = load_generator::<f32>(&ft).unwrap();
    let model = eval_reconstruction(&g, &unpaired2).unwrap();
    let oracle = eval_reconstruction(&OracleReconstructor::from_unpaired(&unpaired2).unwrap(), &unpaired2).unwrap();
    let constant = eval_reconstruction(&ConstantReconstructor { side: 16, value: 0.0 }, &unpaired2).unwrap();
    assert_eq!(model.count, 6);
    assert_eq!(oracle.hidden_volume_mse, 0.0);
    assert!(model.projection_mse.is_finite() && model.hidden_volume_mse.is_finite());
    assert!(constant.hidden_volume_mse > 0.0);
}
