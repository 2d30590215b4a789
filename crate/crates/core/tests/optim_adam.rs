mod common;

use lorae::data::synth_lowrank;
use lorae::model::{LoraeParams, ModelConfig};
use lorae::optim::{delta_from_gamma, theorem1_alpha, train, AdamConfig, AdamState, Parameters, TrainConfig};
use proptest::prelude::*;

struct Flat(Vec<f64>);

impl Parameters for Flat {
    fn buffers(&self) -> Vec<&[f64]> {
        vec![&self.0]
    }
    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.0]
    }
    fn names(&self) -> Vec<String> {
        vec!["flat".into()]
    }
}

/// Reference recurrence, written out per coordinate.
fn oracle(theta: &[f64], grads: &[Vec<f64>], c: AdamConfig) -> Vec<f64> {
    let mut th = theta.to_vec();
    let mut m = vec![0.0; th.len()];
    let mut v = vec![0.0; th.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for j in 0..th.len() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let (mh, vh) = if c.bias_correction {
                (m[j] / (1.0 - c.beta1.powi(t)), v[j] / (1.0 - c.beta2.powi(t)))
            } else {
                (m[j], v[j])
            };
            th[j] -= c.alpha * mh / (vh.sqrt() + c.epsilon);
        }
    }
    th
}

fn run(theta: &[f64], grads: &[Vec<f64>], c: AdamConfig) -> (Vec<f64>, AdamState) {
    let mut p = Flat(theta.to_vec());
    let mut s = AdamState::new(&p, c).unwrap();
    for g in grads {
        s.step(&mut p, std::slice::from_ref(g)).unwrap();
    }
    (p.0, s)
}

#[test]
fn two_steps_match_reference_recurrence() {
    let theta = [0.5, -1.0, 2.0];
    let grads = vec![vec![0.3, -0.2, 1.0], vec![-0.1, 0.4, 1.0]];
    for bias_correction in [false, true] {
        let c = AdamConfig {
            bias_correction,
            ..AdamConfig::with_alpha(0.01)
        };
        let (got, _) = run(&theta, &grads, c);
        let want = oracle(&theta, &grads, c);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
        }
    }
}

#[test]
fn first_step_without_bias_correction_is_about_three_alpha() {
    // m = 0.1 g, √v = √0.001 |g|  ⇒  step ≈ α · 0.1/√0.001 ≈ 3.162 α
    let (got, _) = run(&[0.0], &[vec![1.0]], AdamConfig::with_alpha(1e-3));
    assert!((got[0] + 1e-3 * 0.1 / (0.001f64.sqrt() + 1e-8)).abs() < 1e-15);
    let c = AdamConfig {
        bias_correction: true,
        ..AdamConfig::with_alpha(1e-3)
    };
    let (got, _) = run(&[0.0], &[vec![1.0]], c);
    assert!((got[0] + 1e-3).abs() < 1e-10);
}

#[test]
fn zero_gradient_leaves_parameters() {
    let (got, s) = run(&[1.0, 2.0], &vec![vec![0.0, 0.0]; 3], AdamConfig::default());
    assert_eq!(got, vec![1.0, 2.0]);
    assert_eq!(s.t, 3);
}

#[test]
fn rejects_bad_gradients() {
    let mut p = Flat(vec![0.0; 2]);
    let mut s = AdamState::new(&p, AdamConfig::default()).unwrap();
    assert!(s.step(&mut p, &[vec![1.0]]).is_err());
    assert!(s.step(&mut p, &[vec![f64::NAN, 0.0]]).is_err());
    assert_eq!(p.0, vec![0.0; 2]);
    let bad = AdamConfig {
        beta1: 1.0,
        ..AdamConfig::default()
    };
    assert!(AdamState::new(&p, bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moments_and_step_bounds(gs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..20)) {
        let c = AdamConfig::with_alpha(1e-2);
        let mut p = Flat(vec![0.0; 4]);
        let mut s = AdamState::new(&p, c).unwrap();
        for g in &gs {
            let before = p.0.clone();
            s.step(&mut p, std::slice::from_ref(g)).unwrap();
            prop_assert!(s.v[0].iter().all(|&v| v >= 0.0));
            // |m| ≤ √(1−β₁)²/(1−β₂) · √v elementwise, so each move is bounded.
            let bound = c.alpha * (1.0 - c.beta1) / (1.0 - c.beta2).sqrt() / (1.0 - c.beta1 / c.beta2.sqrt());
            for (a, b) in p.0.iter().zip(&before) {
                prop_assert!((a - b).abs() <= bound * (1.0 + 1e-12));
            }
        }
    }
}

fn small_problem() -> (ModelConfig, lorae::data::Dataset) {
    let ds = synth_lowrank(50, 12, 2, 0.0, 3).unwrap();
    let cfg = ModelConfig {
        input_dim: 12,
        latent_dim: 4,
        hidden: vec![16],
        lambda: 0.0,
        seed: 4,
    };
    (cfg, ds)
}

#[test]
fn training_is_deterministic() {
    let (cfg, ds) = small_problem();
    let tc = TrainConfig {
        epochs: 5,
        batch_size: 8,
        lambda: 1e-2,
        ..TrainConfig::default()
    };
    let (a, la) = train(LoraeParams::init(&cfg).unwrap(), &ds, &tc).unwrap();
    let (b, lb) = train(LoraeParams::init(&cfg).unwrap(), &ds, &tc).unwrap();
    assert_eq!(la.to_csv(), lb.to_csv());
    assert_eq!(a.to_bytes(&cfg).unwrap(), b.to_bytes(&cfg).unwrap());
    assert_eq!(la.steps.len(), 5 * 50usize.div_ceil(8));
}

#[test]
fn deterministic_mode_decreases_plain_reconstruction() {
    let (cfg, ds) = small_problem();
    let tc = TrainConfig {
        epochs: 200,
        lambda: 0.0,
        deterministic: true,
        alpha: 1e-3,
        ..TrainConfig::default()
    };
    let (model, log) = train(LoraeParams::init(&cfg).unwrap(), &ds, &tc).unwrap();
    assert_eq!(log.steps.len(), 200);
    let first = log.steps[0].loss;
    let last = model.objective(&ds.images, 0.0).unwrap();
    assert!(last < first, "{last} !< {first}");
    assert!(log.min_grad_norm() <= log.steps[0].grad_norm);
}

#[test]
fn step_size_formula_examples() {
    // √(2·1 / (1·1·4)) = √0.5
    assert!((theorem1_alpha(1.0, 1.0, 1.0, 4).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    let a = theorem1_alpha(3.0, 2.0, 0.7, 100).unwrap();
    assert!((theorem1_alpha(3.0, 2.0, 0.7, 400).unwrap() - a / 2.0).abs() < 1e-15);
    assert!((theorem1_alpha(3.0, 2.0, 1.4, 100).unwrap() - a / 2.0).abs() < 1e-15);
    assert_eq!(delta_from_gamma(2.0, 0.5), 4.0);
    assert!(theorem1_alpha(0.0, 1.0, 1.0, 1).is_err());
    assert!(theorem1_alpha(1.0, 1.0, 1.0, 0).is_err());
}
