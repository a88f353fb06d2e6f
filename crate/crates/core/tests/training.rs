use dctnn_core::denoiser::BlockKind;
use dctnn_core::harness::dataset::synthetic;
use dctnn_core::harness::train::{train, TrainConfig};
use dctnn_core::recon::{ArchConfig, DcConfig, LambdaMode};

#[test]
fn kd_model_overfits_a_single_phantom() {
    let img = synthetic(1, 64, 64, 0, 1).unwrap();
    let model = DcConfig {
        n_d: 2,
        kinds: vec![BlockKind::Kaleidoscope],
        lambda_mode: LambdaMode::Learnable { init: 1.0 },
        arch: ArchConfig { token_size: 8, d_model: 64, axial_d_model: 64, n_layers: 1, n_heads: 8, ff_mult: 4 },
        height: 64,
        width: 64,
    };
    let mut cfg = TrainConfig::new(model);
    cfg.epochs = 200;
    cfg.batch_size = 1;
    cfg.learning_rate = 1e-3;
    let out = train(&cfg, &img, &[]).unwrap();
    let h = out.history.train_mae();
    assert_eq!(h.len(), 200);
    assert!(h[199] < 0.1 * h[0], "training MAE {} -> {}", h[0], h[199]);
}
