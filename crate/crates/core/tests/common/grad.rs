//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance run.

use bcat_core::model::ModelParams;
use bcat_core::objective::{
    bcat_total_var, cross_entropy_var, kd_loss_var, median_bandwidth, mmd2_var, Bandwidth, KernelSpec,
};
use bcat_core::tensor::{finite_diff_grad, kernels};
use bcat_core::train::{forward_views, target_terms};
use bcat_core::{Graph, Result, Tensor, Var};

use super::{normal, rel_err, tiny_config, uniform};

pub const TOL: f64 = 1e-4;
pub const H: f64 = 1e-5;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub op: OpFn,
}

fn case(name: &'static str, inputs: Vec<Tensor>, op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        op: Box::new(op),
    }
}

/// One instance of every differentiable operation (and loss) for `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let a = normal(&[3, 4], seed);
    let b = normal(&[3, 4], seed + 10);
    let row = normal(&[4], seed + 20);
    let pos = uniform(&[3, 4], 0.1, 2.0, seed);
    // Keep every entry at least 0.05 from the clamp point.
    let away = a.data().iter().map(|&x| if x.abs() < 0.05 { x + 0.2 } else { x }).collect();
    let away = Tensor::new(vec![3, 4], away).unwrap();
    let x3 = normal(&[2, 3, 5], seed);
    let a3 = normal(&[2, 3, 4], seed);
    let logits = normal(&[4, 4], seed);
    let teacher = normal(&[4, 4], seed + 7);
    let mx = normal(&[4, 6], seed + 1);
    let my = normal(&[5, 6], seed + 2);
    let kernel = KernelSpec {
        bandwidth: Bandwidth::Fixed(median_bandwidth(&mx, &my).unwrap()),
        ..KernelSpec::default()
    };
    let sx = normal(&[4, 3], seed + 5);
    vec![
        case("add", vec![a.clone(), row.clone()], |g, v| g.add(v[0], v[1])),
        case("sub", vec![a.clone(), b], |g, v| g.sub(v[0], v[1])),
        case("mul", vec![a.clone(), row], |g, v| g.mul(v[0], v[1])),
        case("scale", vec![a.clone()], |g, v| g.scale(v[0], -1.7)),
        case("exp", vec![a.clone()], |g, v| g.exp(v[0])),
        case("gelu", vec![a], |g, v| g.gelu(v[0])),
        case("log_clamped", vec![pos], |g, v| g.log_clamped(v[0], 1e-12)),
        case("clamp_min", vec![away], |g, v| g.clamp_min(v[0], 0.0)),
        case("softmax_rows", vec![x3.clone()], |g, v| g.softmax_rows(v[0])),
        case("log_softmax_rows", vec![x3.clone()], |g, v| g.log_softmax_rows(v[0])),
        case(
            "layer_norm",
            vec![x3, normal(&[5], seed + 1), normal(&[5], seed + 2)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        case("matmul broadcast rhs", vec![a3.clone(), normal(&[4, 5], seed + 1)], |g, v| g.matmul(v[0], v[1])),
        case("matmul batched", vec![a3.clone(), normal(&[2, 4, 3], seed + 2)], |g, v| g.matmul(v[0], v[1])),
        case("transpose_last2", vec![a3.clone()], |g, v| g.transpose_last2(v[0])),
        case("permute", vec![a3.clone()], |g, v| g.permute(v[0], &[1, 2, 0])),
        case("reshape", vec![a3.clone()], |g, v| g.reshape(v[0], &[6, 4])),
        case("mean_axis", vec![a3.clone()], |g, v| g.mean_axis(v[0], 1)),
        case("sum_all", vec![a3.clone()], |g, v| g.sum_all(v[0])),
        case("mean_all", vec![a3.clone()], |g, v| g.mean_all(v[0])),
        case("concat", vec![a3, normal(&[2, 3, 2], seed + 3)], |g, v| g.concat(&[v[0], v[1]], 2)),
        case("gather_rows", vec![normal(&[4, 3], seed + 4)], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1])),
        case("sq_dist", vec![sx.clone(), normal(&[5, 3], seed + 6)], |g, v| g.sq_dist(v[0], v[1])),
        case("sq_dist self", vec![sx], |g, v| g.sq_dist(v[0], v[0])),
        case("cross_entropy", vec![logits.clone()], |g, v| cross_entropy_var(g, v[0], &[0, 3, 1, 1])),
        case("kd_loss", vec![logits], move |g, v| {
            kd_loss_var(g, &teacher, v[0], &[2, 0, 1, 3], 0.8, 2.0, 0.6)
        }),
        case("mmd2", vec![mx, my], move |g, v| mmd2_var(g, v[0], v[1], &kernel)),
    ]
}

/// Largest relative error, over all inputs, of d/dx `sum(op(inputs) * w)`
/// for a fixed random weight `w`.
pub fn op_error(c: &OpCase, seed: u64) -> f64 {
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = c.inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = (c.op)(&mut g, &vars).unwrap();
        g.value(out).shape().to_vec()
    };
    let w = normal(&probe_shape, seed ^ 0xABCD);
    let build = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let out = (c.op)(g, vars)?;
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv)?;
        g.sum_all(prod)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = c.inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in c.inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |xi| {
                let mut g = Graph::new();
                let vars: Vec<Var> = c
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { xi.clone() } else { t.clone() }))
                    .collect();
                let l = build(&mut g, &vars)?;
                g.value(l).item()
            },
            x,
            H,
        )
        .unwrap();
        worst = worst.max(rel_err(grads.get(vars[i]).unwrap(), &numeric));
    }
    worst
}

/// Relative error of every parameter's gradient of the full objective on
/// the tiny model (batch 4). The MMD bandwidth is held at its unperturbed
/// median, matching how training treats it.
pub fn model_errors(seed: u64) -> Vec<(String, f64)> {
    let cfg = tiny_config();
    let params = ModelParams::init(&cfg, seed).unwrap();
    let xs = uniform(&[4, 8, 8, 1], 0.0, 1.0, seed + 100);
    let xt = uniform(&[4, 8, 8, 1], 0.0, 1.0, seed + 200);
    let labels = [0, 1, 2, 3];
    let q_hat = kernels::softmax_rows(&normal(&[4, 4], seed + 300));

    let kernel = {
        let mut g = Graph::new();
        let p = params.register(&mut g, false);
        let v = forward_views(&mut g, &p, &cfg, &xs, &xt).unwrap();
        KernelSpec {
            bandwidth: Bandwidth::Fixed(median_bandwidth(g.value(v.src_aug), g.value(v.tgt_aug)).unwrap()),
            ..KernelSpec::default()
        }
    };
    let loss_of = |g: &mut Graph, p: &ModelParams<Var>| -> Result<Var> {
        let v = forward_views(g, p, &cfg, &xs, &xt)?;
        let cls_s = cross_entropy_var(g, v.logits_s, &labels)?;
        let t = target_terms(g, &v, p, &q_hat, &kernel)?;
        bcat_total_var(g, cls_s, t.cls_t, t.transfer, 0.35, 3.0)
    };

    let mut g = Graph::new();
    let p = params.register(&mut g, true);
    let loss = loss_of(&mut g, &p).unwrap();
    let grads = g.backward(loss).unwrap();
    params
        .named()
        .into_iter()
        .enumerate()
        .map(|(k, (name, base))| {
            let numeric = finite_diff_grad(
                |x| {
                    let mut perturbed = params.clone();
                    *perturbed.tensors_mut()[k] = x.clone();
                    let mut g = Graph::new();
                    let p = perturbed.register(&mut g, false);
                    let l = loss_of(&mut g, &p)?;
                    g.value(l).item()
                },
                base,
                H,
            )
            .unwrap();
            (name, rel_err(grads.get(*p.tensors()[k]).unwrap(), &numeric))
        })
        .collect()
}
