mod common;

use std::sync::Arc;

use common::{dims, param_grad_error, random_tensor, stage2_surrogate, tiny_config};
use streamfx::autodiff::{finite_difference_gradient, Graph, Var};
use streamfx::distill::{self_forcing_rollout, shifted_schedule, snr_weights, stage2_loss, stage2_loss_graph, RolloutConfig};
use streamfx::flow::{flow_loss_graph, split_chunks, teacher_loss, FlowLossConfig};
use streamfx::model::DenoiserParams;
use streamfx::train::{flow_step, stage1_step};
use streamfx::world::{make_triplet, Triplet};
use streamfx::Tensor;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Check one op at ten random points: analytic gradient of `Σ w ⊙ f(x)`
/// against central differences, for every input.
fn check_op(name: &str, shapes: &[&[usize]], build: &Build) {
    for point in 0..10u64 {
        let inputs: Vec<Tensor<f64>> = shapes.iter().enumerate().map(|(i, s)| random_tensor(point * 31 + i as u64, s, 1.5)).collect();
        let eval = |inputs: &[Tensor<f64>], g: &mut Graph<f64>| -> (Vec<Var>, Var) {
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(g, &vars);
            let w = g.constant(random_tensor(9000 + point, g.value(out).shape(), 1.0));
            let prod = g.mul(out, w).unwrap();
            (vars, g.sum(prod))
        };
        let mut g = Graph::new();
        let (vars, loss) = eval(&inputs, &mut g);
        let grads = g.backward(loss).unwrap();
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(&g, *v);
            let numeric = finite_difference_gradient(
                |x| {
                    let mut ins = inputs.clone();
                    ins[k] = Tensor::new(ins[k].shape().to_vec(), x.to_vec()).unwrap();
                    let mut g = Graph::no_grad();
                    let (_, l) = eval(&ins, &mut g);
                    g.value(l).data()[0]
                },
                inputs[k].data(),
                1e-6,
            )
            .unwrap();
            for (a, n) in analytic.data().iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel <= 1e-6, "{name} input {k} point {point}: analytic {a} numeric {n}");
            }
        }
    }
}

#[test]
fn elementwise_ops() {
    check_op("add", &[&[3, 4], &[3, 4]], &|g, v| g.add(v[0], v[1]).unwrap());
    check_op("sub", &[&[3, 4], &[3, 4]], &|g, v| g.sub(v[0], v[1]).unwrap());
    check_op("mul", &[&[3, 4], &[3, 4]], &|g, v| g.mul(v[0], v[1]).unwrap());
    check_op("scale", &[&[5]], &|g, v| g.scale(v[0], -2.5));
    check_op("gelu", &[&[2, 6]], &|g, v| g.gelu(v[0]));
    check_op("silu", &[&[2, 6]], &|g, v| g.silu(v[0]));
}

#[test]
fn matrix_ops() {
    check_op("matmul", &[&[3, 4], &[4, 2]], &|g, v| g.matmul(v[0], v[1]).unwrap());
    check_op("transpose", &[&[3, 5]], &|g, v| g.transpose(v[0]).unwrap());
    check_op("add_bias", &[&[4, 3], &[3]], &|g, v| g.add_bias(v[0], v[1]).unwrap());
    check_op("reshape", &[&[2, 6]], &|g, v| g.reshape(v[0], &[3, 4]).unwrap());
}

#[test]
fn structural_ops() {
    check_op("concat0", &[&[2, 3], &[1, 3]], &|g, v| g.concat(&[v[0], v[1]], 0).unwrap());
    check_op("concat1", &[&[2, 3], &[2, 2]], &|g, v| g.concat(&[v[0], v[1]], 1).unwrap());
    check_op("slice0", &[&[4, 3]], &|g, v| g.slice(v[0], 0, 1, 2).unwrap());
    check_op("slice1", &[&[4, 5]], &|g, v| g.slice(v[0], 1, 2, 3).unwrap());
    let idx: Arc<[usize]> = vec![2, 0, 2, 1, 2].into();
    check_op("gather_rows", &[&[3, 4]], &move |g, v| g.gather_rows(v[0], Arc::clone(&idx)).unwrap());
}

#[test]
fn normalizing_ops() {
    check_op("softmax", &[&[3, 5]], &|g, v| g.softmax(v[0]));
    check_op("layer_norm", &[&[3, 6], &[6], &[6]], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
    let mask: Arc<[bool]> = vec![true, false, true, true, true, false, false, true, true].into();
    check_op("masked_softmax", &[&[3, 3]], &move |g, v| {
        let m = g.masked_fill(v[0], Arc::clone(&mask)).unwrap();
        g.softmax(m)
    });
}

#[test]
fn reductions() {
    check_op("sum", &[&[3, 4]], &|g, v| g.sum(v[0]));
    check_op("mean", &[&[3, 4]], &|g, v| g.mean(v[0]));
    check_op("mse", &[&[3, 4], &[3, 4]], &|g, v| g.mse(v[0], v[1]).unwrap());
}

#[test]
fn detached_and_constant_inputs_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(random_tensor(1, &[2, 2], 1.0));
    let b = g.detach(a);
    let c = g.constant(random_tensor(2, &[2, 2], 1.0));
    let ab = g.mul(a, b).unwrap();
    let abc = g.add(ab, c).unwrap();
    let l = g.sum(abc);
    let grads = g.backward(l).unwrap();
    // d/da (a · stop(a)) = stop(a)
    assert_eq!(grads.get_or_zeros(&g, a), g.value(a).clone());
    assert!(grads.get(c).is_none());
    assert!(!g.requires_grad(c));
}

fn f64_params() -> DenoiserParams<f64> {
    DenoiserParams::<f64>::init(tiny_config(), 41).unwrap()
}

fn batch(chunks: usize) -> Vec<Triplet> {
    (0..2).map(|i| make_triplet::<rand_chacha::ChaCha8Rng>(50 + i, i as usize + 1, dims(&tiny_config(), chunks), None).unwrap()).collect()
}

#[test]
fn teacher_gradient_matches_finite_differences() {
    let p = f64_params();
    let b = batch(2);
    let (loss, grads) = flow_step(&p, &b, &FlowLossConfig::teacher(), 3, 1).unwrap();
    assert!((loss - teacher_loss(&p, &b, 3, 1).unwrap()).abs() < 1e-12);
    let err = param_grad_error(&p, &grads, 2, |q| teacher_loss(q, &b, 3, 1).unwrap());
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn stage1_gradient_matches_finite_differences() {
    let p = f64_params();
    let b = batch(3);
    let (_, grads) = stage1_step(&p, &b, 0.3, 8, 2).unwrap();
    let f = |q: &DenoiserParams<f64>| {
        let mut g = Graph::no_grad();
        let pv = q.register(&mut g, false);
        let out = flow_loss_graph(&mut g, &pv, q, &b, &FlowLossConfig::stage1(0.3), 8, 2).unwrap();
        g.value(out.loss).data()[0]
    };
    let err = param_grad_error(&p, &grads, 2, f);
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn stage2_gradient_matches_surrogate_finite_differences() {
    let p = f64_params();
    let t = &batch(2)[0];
    let source = t.source.cast::<f64>();
    let reference = t.reference.cast::<f64>();
    let schedule = shifted_schedule(4).unwrap();
    let weights = snr_weights(&schedule).unwrap();
    let cfg = RolloutConfig { schedule, cfg_scale: 5.0, window: 2, noise_seed: 6 };
    let record = self_forcing_rollout(&p, &source, Some(&reference), Some(t.label), &cfg).unwrap();
    let xs = split_chunks(&source, 2).unwrap();
    let ys = split_chunks(&t.target.cast::<f64>(), 2).unwrap();

    let mut g = Graph::new();
    let pv = p.register(&mut g, true);
    let l = stage2_loss_graph(&mut g, &pv, &p, &record, &xs, &ys, &weights).unwrap();
    let value = g.value(l).data()[0];
    assert!((value - stage2_loss(&record, &ys, &weights).unwrap()).abs() < 1e-10);
    assert!((value - stage2_surrogate(&p, &record, &xs, &ys, &weights)).abs() < 1e-10);
    let grads = p.collect_grads(&g, &g.backward(l).unwrap(), &pv);
    let err = param_grad_error(&p, &grads, 2, |q| stage2_surrogate(q, &record, &xs, &ys, &weights));
    assert!(err <= 1e-4, "relative error {err}");
}
