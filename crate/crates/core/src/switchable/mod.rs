//! The switchable normalization layer.
//!
//! Each element `h` of channel `c` in sample `n` is normalized as
//!
//! ```text
//!            h - sum_z lambda_mu[z] * mu_z
//! h_sn = -------------------------------------- ,   y = gamma_c * h_sn + beta_c
//!                     mix_sigma
//! ```
//!
//! where `z` ranges over the layer's candidate set and `mu_z`/`var_z` are the
//! statistics of normalizer `z` for the group containing `(n, c)`. The
//! denominator depends on [`SigmaAggregation`]:
//!
//! * `Std`: `sum_z lambda_sigma[z] * sqrt(var_z + eps)`
//! * `Var`: `sqrt(sum_z lambda_sigma[z] * var_z + eps)`
//!
//! One ratio state is shared by all channels and pixels of a layer.

mod ratios;

pub use ratios::{
    harden, restrict_omega, softmax_backward, softmax_ratios, HardRatio, Member, Omega, RatioState, HARD_INIT_LOGIT,
};

use crate::error::{Error, Result};
use crate::norm::{affine_param_grads, compute_moments, AffineParams, BnRunningStats, Moments, DEFAULT_EPS};
use crate::shard::ShardConfig;
use crate::tensor::{Shape4, Tensor4};

/// How the per-normalizer spreads are combined into one denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaAggregation {
    /// Weighted sum of standard deviations.
    #[default]
    Std,
    /// Square root of the weighted sum of variances.
    Var,
}

impl SigmaAggregation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "std" => Ok(Self::Std),
            "var" => Ok(Self::Var),
            other => Err(Error::Config(format!("sigma_aggregation must be std or var, got '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Std => "std",
            Self::Var => "var",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnLayer {
    pub state: RatioState,
    pub affine: AffineParams,
    pub eps: f64,
    pub aggregation: SigmaAggregation,
}

impl SnLayer {
    /// `gamma = 1`, `beta = 0`, uniform ratios.
    pub fn new(channels: usize, omega: Omega, tied: bool) -> Self {
        Self {
            state: RatioState::uniform(omega, tied),
            affine: AffineParams::identity(channels),
            eps: DEFAULT_EPS,
            aggregation: SigmaAggregation::Std,
        }
    }
}

/// Where the BN member reads its statistics from.
#[derive(Debug, Clone, Copy)]
pub enum BnSource<'a> {
    /// Shard-local batch statistics (training).
    Batch(ShardConfig),
    /// Frozen per-channel statistics (evaluation).
    Running(&'a BnRunningStats),
}

#[derive(Debug, Clone)]
struct Branch {
    member: Member,
    /// Position of `member` in the layer's candidate set.
    index: usize,
    moments: Moments,
    weight_mu: f64,
    weight_sigma: f64,
}

/// Forward state kept for [`sn_backward`].
#[derive(Debug, Clone)]
pub struct SnCache {
    x: Tensor4,
    xhat: Tensor4,
    std_mix: Vec<f64>,
    branches: Vec<Branch>,
    lambda_mu: Vec<f64>,
    lambda_sigma: Vec<f64>,
    gamma: Vec<f64>,
    eps: f64,
    aggregation: SigmaAggregation,
    tied: bool,
    hard: bool,
}

impl SnCache {
    /// Members whose moments were evaluated from the input in this forward.
    pub fn computed_members(&self) -> Vec<Member> {
        self.branches.iter().map(|b| b.member).collect()
    }

    /// Moments of `member`, when they were computed.
    pub fn moments(&self, member: Member) -> Option<&Moments> {
        self.branches.iter().find(|b| b.member == member).map(|b| &b.moments)
    }

    pub fn xhat(&self) -> &Tensor4 {
        &self.xhat
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnGrads {
    pub dx: Tensor4,
    /// Gradient of the mean logits; for a tied layer this is the gradient of
    /// the shared logits (sum of both paths).
    pub dlogits_mu: Vec<f64>,
    /// `None` for a tied layer.
    pub dlogits_sigma: Option<Vec<f64>>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

/// Branches, both ratio vectors, then the mixed mean and spread per (n, c).
type Mixture = (Vec<Branch>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

fn mix(x: &Tensor4, layer: &SnLayer, source: BnSource<'_>) -> Result<Mixture> {
    let shape = x.shape();
    if layer.affine.channels() != shape.c {
        return Err(Error::Config(format!("switchable layer with {} channels applied to {shape}", layer.affine.channels())));
    }
    if layer.eps < 0.0 {
        return Err(Error::Config(format!("eps must be non-negative, got {}", layer.eps)));
    }
    let state = &layer.state;
    let omega = state.omega();
    if omega.is_empty() {
        return Err(Error::Config("switchable layer with an empty normalizer set".into()));
    }
    let lambda_mu = state.lambda_mu();
    let lambda_sigma = state.lambda_sigma();
    let mut branches = Vec::new();
    for member in state.active_members() {
        let j = omega.position(member).expect("active members are in omega");
        let moments = match (member, source) {
            (Member::Bn, BnSource::Running(stats)) => {
                if !stats.ready() {
                    return Err(Error::Usage("BN statistics were never estimated".into()));
                }
                Moments::from_channel_stats(shape, &stats.means, &stats.vars)?
            }
            (_, BnSource::Batch(shard)) => compute_moments(member.kind(), x, shard)?,
            (_, BnSource::Running(_)) => compute_moments(member.kind(), x, ShardConfig::single(shape.n))?,
        };
        branches.push(Branch { member, index: j, moments, weight_mu: lambda_mu[j], weight_sigma: lambda_sigma[j] });
    }
    let planes = shape.n * shape.c;
    let mut mean_mix = vec![0.0; planes];
    let mut std_mix = vec![0.0; planes];
    for i in 0..planes {
        let (mut m, mut s) = (0.0, 0.0);
        for b in &branches {
            let g = b.moments.grouping[i];
            m += b.weight_mu * b.moments.means[g];
            s += match layer.aggregation {
                SigmaAggregation::Std => b.weight_sigma * (b.moments.vars[g] + layer.eps).sqrt(),
                SigmaAggregation::Var => b.weight_sigma * b.moments.vars[g],
            };
        }
        if layer.aggregation == SigmaAggregation::Var {
            s = (s + layer.eps).sqrt();
        }
        mean_mix[i] = m;
        std_mix[i] = s;
    }
    Ok((branches, lambda_mu, lambda_sigma, mean_mix, std_mix))
}

fn standardize(x: &Tensor4, mean_mix: &[f64], std_mix: &[f64]) -> Tensor4 {
    let plane = x.shape().plane();
    let mut xhat = x.clone();
    for (i, chunk) in xhat.data_mut().chunks_mut(plane).enumerate() {
        let (m, inv) = (mean_mix[i], 1.0 / std_mix[i]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) * inv);
    }
    xhat
}

fn apply_affine(xhat: &Tensor4, affine: &AffineParams) -> Tensor4 {
    crate::norm::affine_transform(xhat, affine).expect("channel count checked")
}

/// Training-mode forward with shard-local BN statistics.
pub fn sn_forward(x: &Tensor4, layer: &SnLayer, shard: ShardConfig) -> Result<(Tensor4, SnCache)> {
    let (branches, lambda_mu, lambda_sigma, mean_mix, std_mix) = mix(x, layer, BnSource::Batch(shard))?;
    let xhat = standardize(x, &mean_mix, &std_mix);
    let y = apply_affine(&xhat, &layer.affine);
    Ok((
        y,
        SnCache {
            x: x.clone(),
            xhat,
            std_mix,
            branches,
            lambda_mu,
            lambda_sigma,
            gamma: layer.affine.gamma.clone(),
            eps: layer.eps,
            aggregation: layer.aggregation,
            tied: layer.state.is_tied(),
            hard: layer.state.hard().is_some(),
        },
    ))
}

/// Evaluation-mode forward: IN and LN use the input's own statistics, BN
/// uses the frozen running statistics.
pub fn sn_forward_eval(x: &Tensor4, layer: &SnLayer, bn_stats: &BnRunningStats) -> Result<Tensor4> {
    let (_, _, _, mean_mix, std_mix) = mix(x, layer, BnSource::Running(bn_stats))?;
    Ok(apply_affine(&standardize(x, &mean_mix, &std_mix), &layer.affine))
}

/// Exact gradients through the mixture, the softmax Jacobian of both logit
/// vectors and every normalizer's moment dependence on the input.
pub fn sn_backward(cache: &SnCache, dy: &Tensor4) -> Result<SnGrads> {
    let shape: Shape4 = cache.x.shape();
    if dy.shape() != shape {
        return Err(Error::Usage(format!("stale switchable cache: forward saw {shape}, cotangent is {}", dy.shape())));
    }
    let (dgamma, dbeta) = affine_param_grads(&cache.xhat, dy)?;
    let plane = shape.plane();
    let planes = shape.n * shape.c;

    // Direct path and the per-plane gradients of the mixed statistics.
    let mut dx = Tensor4::zeros(shape);
    let mut d_mean = vec![0.0; planes];
    let mut d_std = vec![0.0; planes];
    for i in 0..planes {
        let gamma = cache.gamma[i % shape.c];
        let inv = 1.0 / cache.std_mix[i];
        let xs = &cache.xhat.data()[i * plane..(i + 1) * plane];
        let ds = &dy.data()[i * plane..(i + 1) * plane];
        let out = &mut dx.data_mut()[i * plane..(i + 1) * plane];
        let (mut sum_d, mut sum_dx) = (0.0, 0.0);
        for ((o, &xh), &d) in out.iter_mut().zip(xs).zip(ds) {
            let dxhat = gamma * d;
            *o = dxhat * inv;
            sum_d += dxhat;
            sum_dx += dxhat * xh;
        }
        d_mean[i] = -sum_d * inv;
        d_std[i] = -sum_dx * inv;
    }

    let mut dlambda_mu = vec![0.0; cache.lambda_mu.len()];
    let mut dlambda_sigma = vec![0.0; cache.lambda_sigma.len()];
    for b in &cache.branches {
        let j = b.index;
        let m = &b.moments;
        let groups = m.group_count();
        let mut d_mu = vec![0.0; groups];
        let mut d_var = vec![0.0; groups];
        for i in 0..planes {
            let g = m.grouping[i];
            dlambda_mu[j] += d_mean[i] * m.means[g];
            d_mu[g] += b.weight_mu * d_mean[i];
            match cache.aggregation {
                SigmaAggregation::Std => {
                    let s = (m.vars[g] + cache.eps).sqrt();
                    dlambda_sigma[j] += d_std[i] * s;
                    d_var[g] += b.weight_sigma * d_std[i] / (2.0 * s);
                }
                SigmaAggregation::Var => {
                    let d_mixvar = d_std[i] / (2.0 * cache.std_mix[i]);
                    dlambda_sigma[j] += d_mixvar * m.vars[g];
                    d_var[g] += b.weight_sigma * d_mixvar;
                }
            }
        }
        // mu_g = mean(x), var_g = mean((x - mu_g)^2) over the group's elements.
        let inv = 1.0 / m.group_size as f64;
        for i in 0..planes {
            let g = m.grouping[i];
            let (a, c2, mu) = (d_mu[g] * inv, 2.0 * d_var[g] * inv, m.means[g]);
            if a == 0.0 && c2 == 0.0 {
                continue;
            }
            let xs = &cache.x.data()[i * plane..(i + 1) * plane];
            let out = &mut dx.data_mut()[i * plane..(i + 1) * plane];
            for (o, &xv) in out.iter_mut().zip(xs) {
                *o += a + c2 * (xv - mu);
            }
        }
    }

    let n_logits = cache.lambda_mu.len();
    let (dlogits_mu, dlogits_sigma) = if cache.hard {
        (vec![0.0; n_logits], (!cache.tied).then(|| vec![0.0; n_logits]))
    } else {
        let gm = softmax_backward(&cache.lambda_mu, &dlambda_mu);
        let gs = softmax_backward(&cache.lambda_sigma, &dlambda_sigma);
        if cache.tied {
            (gm.iter().zip(&gs).map(|(a, b)| a + b).collect(), None)
        } else {
            (gm, Some(gs))
        }
    };
    Ok(SnGrads { dx, dlogits_mu, dlogits_sigma, dgamma, dbeta })
}
