//! The recursive network against an explicitly tied, unrolled oracle: a
//! resnet26 whose modules 2, 3 and 4 hold copies of the shared module.

use crowdcount_core::model::{Arch, Model, ModelSpec, Param};
use crowdcount_core::tensor::NormMode;
use crowdcount_core::train::{sgd_step, OptimizerState, SgdSettings};
use crowdcount_core::{Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Copy of `dr` with module 2 replicated into modules 2..=4 of a resnet26.
fn tied_oracle(dr: &Model<f32>) -> Model<f32> {
    let mut oracle = Model::<f32>::build(ModelSpec::new(Arch::ResNet26), 999).unwrap();
    let names: Vec<String> = oracle.store().iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let src = source_name(&name);
        let value = dr.store().by_name(&src).unwrap().clone();
        *oracle.store_mut().by_name_mut(&name).unwrap() = value;
    }
    oracle
}

fn source_name(oracle_name: &str) -> String {
    for m in ["module3.", "module4."] {
        if let Some(rest) = oracle_name.strip_prefix(m) {
            return format!("module2.{rest}");
        }
    }
    oracle_name.to_string()
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, hw: usize) -> Tensor4<f32> {
    Tensor4::from_fn(Shape4::new(n, 3, hw, hw), |_, _, _, _| rng.random_range(0.0..1.0))
}

fn tensors(p: &Param<f32>) -> Vec<&Tensor4<f32>> {
    match p {
        Param::Conv(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
        Param::BatchNorm(b) => vec![&b.gamma, &b.beta],
    }
}

fn grads(p: &Param<f32>) -> Vec<f64> {
    tensors(p)
        .into_iter()
        .flat_map(|t| t.grad().unwrap().iter().map(|&v| v as f64))
        .collect()
}

fn values(p: &Param<f32>) -> Vec<f32> {
    tensors(p).into_iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn assert_relative(a: &[f64], b: &[f64], tol: f64, what: &str) {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * scale, "{what}[{i}]: {x} vs {y}");
    }
}

#[test]
fn forward_matches_tied_oracle_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut dr = Model::<f32>::build(ModelSpec::default(), 11).unwrap();
    let mut oracle = tied_oracle(&dr);
    for _ in 0..10 {
        let x = random_input(&mut rng, 1, 32);
        let a = dr.forward(&x, NormMode::Train).unwrap();
        let b = oracle.forward(&x, NormMode::Train).unwrap();
        assert_eq!(a.data(), b.data());
    }
    // running statistics evolved identically, so eval mode agrees as well
    let x = random_input(&mut rng, 2, 32);
    assert_eq!(dr.infer(&x).unwrap().data(), oracle.infer(&x).unwrap().data());
}

#[test]
fn shared_gradients_equal_summed_oracle_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut dr = Model::<f32>::build(ModelSpec::default(), 12).unwrap();
    let mut oracle = tied_oracle(&dr);
    let x = random_input(&mut rng, 2, 32);
    let g = Tensor4::from_fn(Shape4::new(2, 1, 8, 8), |_, _, _, _| rng.random_range(-1.0..1.0));
    dr.forward(&x, NormMode::Train).unwrap();
    dr.backward(&g).unwrap();
    oracle.forward(&x, NormMode::Train).unwrap();
    oracle.backward(&g).unwrap();

    for (name, p) in dr.store().iter() {
        let expected: Vec<f64> = if let Some(rest) = name.strip_prefix("module2.") {
            let copies: Vec<Vec<f64>> = (2..=4)
                .map(|m| grads(oracle.store().by_name(&format!("module{m}.{rest}")).unwrap()))
                .collect();
            (0..copies[0].len())
                .map(|i| copies.iter().map(|c| c[i]).sum())
                .collect()
        } else {
            grads(oracle.store().by_name(name).unwrap())
        };
        assert_relative(&grads(p), &expected, 1e-6, name);
    }
}

#[test]
fn sgd_step_matches_tied_oracle_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let settings = SgdSettings {
        learning_rate: 0.01,
        momentum: 0.9,
        weight_decay: 0.0005,
    };
    let mut dr = Model::<f32>::build(ModelSpec::default(), 13).unwrap();
    let mut oracle = tied_oracle(&dr);
    let mut dr_state = OptimizerState::new(dr.store());
    let mut oracle_state = OptimizerState::new(oracle.store());

    for _ in 0..2 {
        let x = random_input(&mut rng, 2, 16);
        let g = Tensor4::from_fn(Shape4::new(2, 1, 4, 4), |_, _, _, _| rng.random_range(-1.0..1.0));
        dr.forward(&x, NormMode::Train).unwrap();
        dr.backward(&g).unwrap();
        oracle.forward(&x, NormMode::Train).unwrap();
        oracle.backward(&g).unwrap();

        // tie the oracle: every copy receives the summed gradient
        let names: Vec<String> = dr.module_entries(2);
        for name in &names {
            let rest = name.strip_prefix("module2.").unwrap();
            let copies: Vec<String> = (2..=4).map(|m| format!("module{m}.{rest}")).collect();
            let sum: Vec<f64> = {
                let all: Vec<Vec<f64>> = copies
                    .iter()
                    .map(|c| grads(oracle.store().by_name(c).unwrap()))
                    .collect();
                (0..all[0].len()).map(|i| all.iter().map(|c| c[i]).sum()).collect()
            };
            for c in &copies {
                let mut offset = 0;
                let p = oracle.store_mut().by_name_mut(c).unwrap();
                let ts: Vec<&mut Tensor4<f32>> = match p {
                    Param::Conv(cv) => std::iter::once(&mut cv.weight).chain(cv.bias.as_mut()).collect(),
                    Param::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
                };
                for t in ts {
                    let n = t.len();
                    for (dst, &v) in t.grad_mut().iter_mut().zip(&sum[offset..offset + n]) {
                        *dst = v as f32;
                    }
                    offset += n;
                }
            }
        }
        sgd_step(dr.store_mut(), &mut dr_state, &settings).unwrap();
        sgd_step(oracle.store_mut(), &mut oracle_state, &settings).unwrap();
    }

    for (name, p) in dr.store().iter() {
        let ours: Vec<f64> = values(p).iter().map(|&v| v as f64).collect();
        let targets: Vec<String> = match name.strip_prefix("module2.") {
            Some(rest) => (2..=4).map(|m| format!("module{m}.{rest}")).collect(),
            None => vec![name.to_string()],
        };
        for t in targets {
            let theirs: Vec<f64> = values(oracle.store().by_name(&t).unwrap())
                .iter()
                .map(|&v| v as f64)
                .collect();
            assert_relative(&ours, &theirs, 1e-6, &t);
        }
    }
}

#[test]
fn depth_one_recursion_matches_resnet14() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = ModelSpec {
        recursion_depth: 1,
        ..ModelSpec::default()
    };
    let mut dr = Model::<f32>::build(spec, 7).unwrap();
    let mut plain = Model::<f32>::build(ModelSpec::new(Arch::ResNet14), 7).unwrap();
    let x = random_input(&mut rng, 2, 16);
    let g = Tensor4::from_fn(Shape4::new(2, 1, 4, 4), |_, _, _, _| rng.random_range(-1.0..1.0));
    assert_eq!(
        dr.forward(&x, NormMode::Train).unwrap().data(),
        plain.forward(&x, NormMode::Train).unwrap().data()
    );
    dr.backward(&g).unwrap();
    plain.backward(&g).unwrap();
    assert_eq!(dr.store().flat_grads(), plain.store().flat_grads());
}

#[test]
fn recursive_input_gets_own_running_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut dr = Model::<f32>::build(ModelSpec::default(), 1).unwrap();
    dr.forward(&random_input(&mut rng, 2, 16), NormMode::Train).unwrap();
    let stats = dr.application_stats();
    // applications 2 and 3 of module 2: six BN entries each
    assert_eq!(stats.len(), 2 * 6);
    assert!(stats.iter().all(|(n, _)| n.starts_with("module2.")));
    let Some(Param::BatchNorm(first)) = dr.store().by_name("module2.block1.bn1") else {
        panic!("missing BN entry");
    };
    let second = stats.iter().find(|(n, _)| n == "module2.block1.bn1@2").unwrap().1;
    assert_ne!(first.running_mean, second.mean);
}
