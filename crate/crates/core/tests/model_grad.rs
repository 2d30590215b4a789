mod common;

use common::{central_diff, rel_err, uniform};
use lorae::linalg::Matrix;
use lorae::model::{LoraeParams, ModelConfig};
use lorae::optim::Parameters;

fn toy(lambda: f64, seed: u64) -> (ModelConfig, LoraeParams) {
    let cfg = ModelConfig {
        input_dim: 16,
        latent_dim: 4,
        hidden: vec![8],
        lambda,
        seed,
    };
    let mut p = LoraeParams::init(&cfg).unwrap();
    // Move M off the identity so its singular values are distinct.
    p.m = p.m.add(&uniform(4, 4, seed + 99).scale(0.3)).unwrap();
    (cfg, p)
}

fn fd_for_buffer(p: &LoraeParams, batch: &Matrix, lambda: f64, buf: usize) -> Vec<f64> {
    let base = p.buffers()[buf].to_vec();
    let mut probe = p.clone();
    central_diff(
        &mut |x| {
            probe.buffers_mut()[buf].copy_from_slice(x);
            probe.objective(batch, lambda).unwrap()
        },
        &base,
        1e-6,
    )
}

#[test]
fn every_parameter_group_matches_finite_differences() {
    for (k, lambda) in [0.0, 1e-2, 0.5].into_iter().enumerate() {
        let (_, p) = toy(lambda, k as u64);
        let batch = uniform(5, 16, 10 + k as u64);
        let out = p.loss_batch(&batch, lambda).unwrap();
        let names = p.names();
        for (i, g) in out.grads.iter().enumerate() {
            let fd = fd_for_buffer(&p, &batch, lambda, i);
            let e = rel_err(g, &fd);
            assert!(e <= 1e-5, "λ={lambda} {}: rel err {e:.2e}", names[i]);
        }
    }
}

#[test]
fn loss_parts_add_up() {
    let (_, p) = toy(0.1, 3);
    let batch = uniform(6, 16, 4);
    let out = p.loss_batch(&batch, 0.1).unwrap();
    assert!((out.loss - out.recon - out.penalty).abs() < 1e-15);
    assert!((out.penalty - 0.1 * out.nuclear_norm).abs() < 1e-15);
    assert!((p.objective(&batch, 0.1).unwrap() - out.loss).abs() <= 1e-12 * out.loss);
    // reconstruction term is the per-sample sum of squared pixel errors
    let fwd = p.forward(&batch).unwrap();
    let mut sq = 0.0;
    for i in 0..6 {
        for j in 0..16 {
            sq += (fwd.x_hat.get(i, j) - batch.get(i, j)).powi(2);
        }
    }
    assert!((out.recon - sq / 6.0).abs() <= 1e-12 * out.recon);
}

#[test]
fn batched_forward_matches_per_sample() {
    let (_, p) = toy(0.0, 5);
    let batch = uniform(7, 16, 6);
    let full = p.forward(&batch).unwrap();
    for i in 0..7 {
        let one = p.forward(&batch.select_rows(&[i])).unwrap();
        assert_eq!(one.x_hat.row(0), full.x_hat.row(i));
        assert_eq!(one.z.row(0), full.z.row(i));
    }
}

#[test]
fn latent_is_m_times_pre_latent() {
    let (_, p) = toy(0.0, 7);
    let batch = uniform(3, 16, 8);
    let fwd = p.forward(&batch).unwrap();
    for i in 0..3 {
        let want = p.m.matvec(fwd.z_pre.row(i)).unwrap();
        for (a, b) in fwd.z.row(i).iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn identity_m_leaves_latents_unchanged() {
    let cfg = ModelConfig {
        input_dim: 16,
        latent_dim: 4,
        hidden: vec![8],
        lambda: 0.0,
        seed: 1,
    };
    let p = LoraeParams::init(&cfg).unwrap();
    assert_eq!(p.m, Matrix::identity(4));
    let fwd = p.forward(&uniform(4, 16, 2)).unwrap();
    assert_eq!(fwd.z, fwd.z_pre);
}

#[test]
fn collapsed_encoder_matches_two_stage_latent() {
    let (_, p) = toy(0.0, 9);
    let batch = uniform(10, 16, 11);
    let collapsed = p.collapse_m().apply(&batch).unwrap();
    let z = p.forward(&batch).unwrap().z;
    let scale = z.max_abs();
    for (a, b) in collapsed.as_slice().iter().zip(z.as_slice()) {
        assert!((a - b).abs() <= 1e-10 * scale);
    }
}

#[test]
fn outputs_stay_in_tanh_range() {
    let (_, p) = toy(0.0, 12);
    let fwd = p.forward(&uniform(20, 16, 13).scale(50.0)).unwrap();
    assert!(fwd.x_hat.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let (cfg, p) = toy(0.25, 14);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    p.save(&cfg, &path).unwrap();
    let (cfg2, p2) = LoraeParams::load(&path).unwrap();
    assert_eq!(cfg, cfg2);
    for (a, b) in p.buffers().iter().zip(p2.buffers()) {
        let a: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
    assert_eq!(p.to_bytes(&cfg).unwrap(), p2.to_bytes(&cfg2).unwrap());
    let batch = uniform(2, 16, 15);
    assert_eq!(p.forward(&batch).unwrap().x_hat, p2.forward(&batch).unwrap().x_hat);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let (cfg, p) = toy(0.0, 16);
    let mut bytes = p.to_bytes(&cfg).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(LoraeParams::from_bytes(&bytes).is_err());
    assert!(LoraeParams::from_bytes(b"garbage").is_err());
}

#[test]
fn wrong_input_width_is_an_error() {
    let (_, p) = toy(0.0, 17);
    assert!(p.forward(&uniform(2, 15, 1)).is_err());
    assert!(p.loss_batch(&uniform(2, 17, 1), 0.0).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ModelConfig::desk(8, 0.0, 0);
    cfg.lambda = -1.0;
    assert!(LoraeParams::init(&cfg).is_err());
    cfg.lambda = f64::NAN;
    assert!(LoraeParams::init(&cfg).is_err());
    cfg.lambda = 0.0;
    cfg.latent_dim = 0;
    assert!(LoraeParams::init(&cfg).is_err());
}
