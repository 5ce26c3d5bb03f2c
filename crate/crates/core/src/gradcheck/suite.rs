//! The finite-difference suite behind `normswitch gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_check_masked, FdReport, FD_STEP};
use crate::error::{Error, Result};
use crate::norm::{norm_backward, norm_forward, AffineParams, NormalizerKind};
use crate::shard::ShardConfig;
use crate::switchable::{
    sn_backward, sn_forward, softmax_backward, softmax_ratios, HardRatio, Member, Omega, SigmaAggregation, SnLayer,
};
use crate::tensor::{
    conv2d, conv2d_grad, global_avg_pool, global_avg_pool_grad, linear, linear_grad, relu, relu_grad, softmax_cross_entropy,
    ConvParams, FilterBank, Shape4, Tensor4,
};
use crate::trainer::{Mode, Model, NetworkSpec, NormSetup};

pub const SUITE_TOLERANCE: f64 = 1e-5;

/// Which part of the suite to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Tensor,
    Normalizers,
    Switchable,
    Network,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "tensor" => Suite::Tensor,
            "normalizers" => Suite::Normalizers,
            "switchable" => Suite::Switchable,
            "network" => Suite::Network,
            _ => return Err(Error::Config(format!("unknown gradcheck module `{s}`"))),
        })
    }

    fn includes(self, module: Suite) -> bool {
        self == Suite::All || self == module
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub module: &'static str,
    pub op: &'static str,
    pub report: FdReport,
}

type LossFn = Box<dyn Fn(&[f64]) -> f64>;

/// A scalar function of a flat vector together with its analytic gradient.
struct Case {
    x: Vec<f64>,
    loss: LossFn,
    grad: Vec<f64>,
    /// Coordinates at non-differentiable points.
    kinks: Vec<bool>,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_case(seed: u64, xs: Shape4, ws: [usize; 4], p: ConvParams) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xl = xs.len();
    let x = rand_vec(&mut rng, xl);
    let w = rand_vec(&mut rng, ws.iter().product());
    let out = conv2d(&Tensor4::new(xs, x.clone()).unwrap(), &FilterBank::new(ws, w.clone()).unwrap(), p).unwrap();
    let r = rand_vec(&mut rng, out.data().len());
    let (dx, dw) = conv2d_grad(
        &Tensor4::new(xs, x.clone()).unwrap(),
        &FilterBank::new(ws, w.clone()).unwrap(),
        &Tensor4::new(out.shape(), r.clone()).unwrap(),
        p,
    )
    .unwrap();
    let mut packed = x;
    packed.extend(w);
    let grad = [dx.data(), dw.data()].concat();
    let n = packed.len();
    Case {
        x: packed,
        loss: Box::new(move |v| {
            let y =
                conv2d(&Tensor4::new(xs, v[..xl].to_vec()).unwrap(), &FilterBank::new(ws, v[xl..].to_vec()).unwrap(), p).unwrap();
            dot(y.data(), &r)
        }),
        grad,
        kinks: vec![false; n],
    }
}

fn linear_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, inp, outp) = (3, 5, 4);
    let x = rand_vec(&mut rng, rows * inp);
    let w = rand_vec(&mut rng, outp * inp);
    let b = rand_vec(&mut rng, outp);
    let r = rand_vec(&mut rng, rows * outp);
    let g = linear_grad(&x, &w, outp, &r).unwrap();
    let (xl, wl) = (x.len(), w.len());
    let packed = [x, w, b].concat();
    let n = packed.len();
    Case {
        x: packed,
        loss: Box::new(move |v| dot(&linear(&v[..xl], &v[xl..xl + wl], &v[xl + wl..]).unwrap(), &r)),
        grad: [g.dx, g.dweight, g.dbias].concat(),
        kinks: vec![false; n],
    }
}

fn cross_entropy_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = rand_vec(&mut rng, 5).iter().map(|v| 3.0 * v).collect::<Vec<_>>();
    let (_, grad) = softmax_cross_entropy(&logits, 2).unwrap();
    Case { x: logits, loss: Box::new(|v| softmax_cross_entropy(v, 2).unwrap().0), grad, kinks: vec![false; 5] }
}

fn unary_case(
    seed: u64,
    shape: Shape4,
    fwd: fn(&Tensor4) -> Tensor4,
    bwd: fn(&Tensor4, &Tensor4) -> Tensor4,
    kink: fn(f64) -> bool,
) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_vec(&mut rng, shape.len());
    let out = fwd(&Tensor4::new(shape, x.clone()).unwrap());
    let r = Tensor4::new(out.shape(), rand_vec(&mut rng, out.data().len())).unwrap();
    let grad = bwd(&Tensor4::new(shape, x.clone()).unwrap(), &r).into_data();
    let kinks = x.iter().map(|&v| kink(v)).collect();
    Case { x, loss: Box::new(move |v| dot(fwd(&Tensor4::new(shape, v.to_vec()).unwrap()).data(), r.data())), grad, kinks }
}

fn norm_case(seed: u64, kind: NormalizerKind, shape: Shape4, shard: ShardConfig) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xl = shape.len();
    let x = rand_vec(&mut rng, xl);
    let gamma: Vec<f64> = (0..shape.c).map(|_| rng.random_range(0.5..1.5)).collect();
    let beta = rand_vec(&mut rng, shape.c);
    let r = Tensor4::new(shape, rand_vec(&mut rng, xl)).unwrap();
    let affine = AffineParams { gamma: gamma.clone(), beta: beta.clone() };
    let (_, cache) = norm_forward(kind, &Tensor4::new(shape, x.clone()).unwrap(), shard, &affine, 1e-5).unwrap();
    let g = norm_backward(&cache, &r).unwrap();
    let c = shape.c;
    let packed = [x, gamma, beta].concat();
    let n = packed.len();
    Case {
        x: packed,
        loss: Box::new(move |v| {
            let a = AffineParams { gamma: v[xl..xl + c].to_vec(), beta: v[xl + c..].to_vec() };
            let (y, _) = norm_forward(kind, &Tensor4::new(shape, v[..xl].to_vec()).unwrap(), shard, &a, 1e-5).unwrap();
            dot(y.data(), r.data())
        }),
        grad: [g.dx.into_data(), g.dgamma, g.dbeta].concat(),
        kinks: vec![false; n],
    }
}

fn softmax_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rand_vec(&mut rng, 3);
    let r = rand_vec(&mut rng, 3);
    let p = softmax_ratios(&l).unwrap();
    let grad = softmax_backward(&p, &r);
    Case { x: l, loss: Box::new(move |v| dot(&softmax_ratios(v).unwrap(), &r)), grad, kinks: vec![false; 3] }
}

fn sn_case(seed: u64, omega: Omega, tied: bool, agg: SigmaAggregation, hard: Option<HardRatio>, shard: ShardConfig) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape4::new(shard.total(), 3, 3, 3);
    let xl = shape.len();
    let mut layer = SnLayer::new(3, omega, tied);
    layer.aggregation = agg;
    for v in layer.state.logits_mu_mut().iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    if let Some(ls) = layer.state.logits_sigma_mut() {
        ls.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    layer.affine.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
    layer.affine.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    if let Some(h) = hard {
        layer.state.apply_hard(h).unwrap();
    }
    let x = rand_vec(&mut rng, xl);
    let r = Tensor4::new(shape, rand_vec(&mut rng, xl)).unwrap();
    let (_, cache) = sn_forward(&Tensor4::new(shape, x.clone()).unwrap(), &layer, shard).unwrap();
    let g = sn_backward(&cache, &r).unwrap();
    let k = layer.state.omega().len();
    let mut packed = x;
    packed.extend(layer.state.logits_mu());
    if !tied {
        packed.extend(layer.state.logits_sigma());
    }
    packed.extend(&layer.affine.gamma);
    packed.extend(&layer.affine.beta);
    let mut grad = g.dx.into_data();
    grad.extend(&g.dlogits_mu);
    if let Some(s) = &g.dlogits_sigma {
        grad.extend(s);
    }
    grad.extend(&g.dgamma);
    grad.extend(&g.dbeta);
    let n = packed.len();
    Case {
        x: packed,
        loss: Box::new(move |v| {
            let mut l = layer.clone();
            let mut off = xl;
            l.state.logits_mu_mut().copy_from_slice(&v[off..off + k]);
            off += k;
            if let Some(ls) = l.state.logits_sigma_mut() {
                ls.copy_from_slice(&v[off..off + k]);
                off += k;
            }
            l.affine.gamma.copy_from_slice(&v[off..off + 3]);
            l.affine.beta.copy_from_slice(&v[off + 3..off + 6]);
            let (y, _) = sn_forward(&Tensor4::new(shape, v[..xl].to_vec()).unwrap(), &l, shard).unwrap();
            dot(y.data(), r.data())
        }),
        grad,
        kinks: vec![false; n],
    }
}

fn network_case(seed: u64, setup: NormSetup) -> Case {
    let spec = NetworkSpec::mini_resnet((2, 4, 4), &[2, 4], 1, 3);
    let shard = ShardConfig::new(2, 2).unwrap();
    let mut model = Model::build(&spec, &setup, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for p in model.params.iter_mut().filter(|p| !p.name.ends_with(".w")) {
        p.value.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let x = Tensor4::new(Shape4::new(4, 2, 4, 4), rand_vec(&mut rng, 128)).unwrap();
    let labels = vec![0, 1, 2, 1];
    model.forward_backward(&x, &labels, shard).unwrap();
    let packed: Vec<f64> = model.params.iter().flat_map(|p| p.value.clone()).collect();
    let grad: Vec<f64> = model.params.iter().flat_map(|p| p.grad.clone()).collect();
    let n = packed.len();
    Case {
        x: packed,
        loss: Box::new(move |v| {
            let mut m = model.clone();
            let mut off = 0;
            for p in m.params.iter_mut() {
                let k = p.value.len();
                p.value.copy_from_slice(&v[off..off + k]);
                off += k;
            }
            let (logits, _) = m.forward(&x, Mode::Train(shard)).unwrap();
            Model::loss(&logits, &labels).unwrap().0
        }),
        grad,
        kinks: vec![false; n],
    }
}

type Builder = Box<dyn Fn() -> Case>;

fn catalogue() -> Vec<(Suite, &'static str, &'static str, Builder)> {
    use NormalizerKind::*;
    let s4 = Shape4::new(4, 4, 3, 3);
    let sharded = ShardConfig::new(2, 2).unwrap();
    let whole = ShardConfig::single(4);
    let full = Omega::full;
    let std = SigmaAggregation::Std;
    let sn_setup = |choice| NormSetup { gn_groups: 2, ..NormSetup::plain(choice) };
    vec![
        (
            Suite::Tensor,
            "tensor",
            "conv2d",
            Box::new(|| conv_case(1, Shape4::new(2, 3, 5, 5), [4, 3, 3, 3], ConvParams::new(1, 1, 1))) as Builder,
        ),
        (
            Suite::Tensor,
            "tensor",
            "conv2d_strided_dilated",
            Box::new(|| conv_case(2, Shape4::new(2, 2, 7, 7), [3, 2, 3, 3], ConvParams::new(2, 2, 2))),
        ),
        (
            Suite::Tensor,
            "tensor",
            "conv2d_pointwise",
            Box::new(|| conv_case(3, Shape4::new(2, 3, 4, 4), [2, 3, 1, 1], ConvParams::new(2, 0, 1))),
        ),
        (Suite::Tensor, "tensor", "linear", Box::new(|| linear_case(4))),
        (Suite::Tensor, "tensor", "softmax_cross_entropy", Box::new(|| cross_entropy_case(5))),
        (
            Suite::Tensor,
            "tensor",
            "relu",
            Box::new(|| {
                unary_case(6, Shape4::new(2, 2, 3, 3), relu, |x, d| relu_grad(x, d).unwrap(), |v| v.abs() < 2.0 * FD_STEP)
            }),
        ),
        (
            Suite::Tensor,
            "tensor",
            "global_avg_pool",
            Box::new(|| {
                unary_case(
                    7,
                    Shape4::new(2, 3, 2, 2),
                    global_avg_pool,
                    |x, d| global_avg_pool_grad(x.shape(), d).unwrap(),
                    |_| false,
                )
            }),
        ),
        (Suite::Normalizers, "normalizers", "bn", Box::new(move || norm_case(8, Bn, s4, whole))),
        (Suite::Normalizers, "normalizers", "bn_sharded", Box::new(move || norm_case(9, Bn, s4, sharded))),
        (Suite::Normalizers, "normalizers", "in", Box::new(move || norm_case(10, In, s4, whole))),
        (Suite::Normalizers, "normalizers", "ln", Box::new(move || norm_case(11, Ln, s4, whole))),
        (Suite::Normalizers, "normalizers", "gn", Box::new(move || norm_case(12, Gn { groups: 2 }, s4, whole))),
        (Suite::Switchable, "switchable", "softmax_ratios", Box::new(|| softmax_case(13))),
        (Suite::Switchable, "switchable", "sn_soft", Box::new(move || sn_case(14, full(), false, std, None, whole))),
        (
            Suite::Switchable,
            "switchable",
            "sn_soft_var",
            Box::new(move || sn_case(15, full(), false, SigmaAggregation::Var, None, whole)),
        ),
        (Suite::Switchable, "switchable", "sn_tied", Box::new(move || sn_case(16, full(), true, std, None, whole))),
        (
            Suite::Switchable,
            "switchable",
            "sn_hard",
            Box::new(move || sn_case(17, full(), false, std, Some(HardRatio { mu: Member::Bn, sigma: Member::Ln }), whole)),
        ),
        (
            Suite::Switchable,
            "switchable",
            "sn_subset",
            Box::new(move || sn_case(18, Omega::parse("in,bn").unwrap(), false, std, None, whole)),
        ),
        (Suite::Switchable, "switchable", "sn_sharded", Box::new(move || sn_case(19, full(), false, std, None, sharded))),
        (
            Suite::Network,
            "network",
            "mini_resnet_bn",
            Box::new(move || network_case(20, sn_setup(crate::config::NormChoice::Bn))),
        ),
        (
            Suite::Network,
            "network",
            "mini_resnet_sn",
            Box::new(move || network_case(21, sn_setup(crate::config::NormChoice::Sn))),
        ),
        (
            Suite::Network,
            "network",
            "mini_resnet_sn_tied",
            Box::new(move || network_case(22, sn_setup(crate::config::NormChoice::SnTied))),
        ),
    ]
}

/// Runs the selected checks. `fault` names an op whose analytic gradient is
/// deliberately perturbed, which must make that op fail.
pub fn run_suite(which: Suite, fault: Option<&str>) -> Result<Vec<OpReport>> {
    let cat = catalogue();
    if let Some(f) = fault {
        if !cat.iter().any(|c| c.2 == f) {
            return Err(Error::Usage(format!("cannot inject a fault into unknown op `{f}`")));
        }
    }
    let mut out = Vec::new();
    for (module, module_name, op, build) in cat {
        if !which.includes(module) {
            continue;
        }
        let mut case = build();
        if fault == Some(op) {
            let g = &mut case.grad[0];
            *g += 1e-2 * g.abs().max(1.0);
        }
        let kinks = case.kinks;
        let report = finite_diff_check_masked(&case.loss, &case.x, &case.grad, SUITE_TOLERANCE, |i, _| kinks[i])?;
        out.push(OpReport { module: module_name, op, report });
    }
    Ok(out)
}
