//! Shared moments engine and the individual normalizers.
//!
//! Every normalizer here standardizes with statistics taken over a different
//! axis set:
//!
//! | kind | statistics over            | groups            |
//! |------|----------------------------|-------------------|
//! | BN   | (shard-local n, h, w)      | shards x c        |
//! | IN   | (h, w)                     | n x c             |
//! | LN   | (c, h, w)                  | n                 |
//! | GN   | (channel group, h, w)      | n x groups        |
//!
//! Variances are the biased population estimator `E[h^2] - E[h]^2`,
//! evaluated in two passes so they never go negative.

mod running;
mod wn;

pub use running::{BnRunningStats, StatsMode};
pub use wn::wn_normalize;

use crate::error::{Error, Result};
use crate::shard::ShardConfig;
use crate::tensor::{Shape4, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormalizerKind {
    Bn,
    In,
    Ln,
    Gn { groups: usize },
    Wn,
}

impl NormalizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            NormalizerKind::Bn => "bn",
            NormalizerKind::In => "in",
            NormalizerKind::Ln => "ln",
            NormalizerKind::Gn { .. } => "gn",
            NormalizerKind::Wn => "wn",
        }
    }

    /// Whether statistics mix different samples.
    pub fn crosses_samples(&self) -> bool {
        matches!(self, NormalizerKind::Bn)
    }
}

impl std::fmt::Display for NormalizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormalizerKind::Gn { groups } => write!(f, "gn({groups})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Per-group means and variances plus the `(n, c) -> group` map.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub kind: NormalizerKind,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    /// Group index of every `(n, c)` plane, indexed by `n * c_count + c`.
    pub grouping: Vec<usize>,
    /// Number of elements contributing to each group.
    pub group_size: usize,
    pub shape: Shape4,
}

impl Moments {
    pub fn group_count(&self) -> usize {
        self.means.len()
    }

    pub fn group_of(&self, n: usize, c: usize) -> usize {
        self.grouping[n * self.shape.c + c]
    }

    /// BN moments for evaluation, built from frozen per-channel statistics.
    pub fn from_channel_stats(shape: Shape4, means: &[f64], vars: &[f64]) -> Result<Self> {
        if means.len() != shape.c || vars.len() != shape.c {
            return Err(Error::Config(format!(
                "running statistics cover {} channels but input {shape} has {}",
                means.len(),
                shape.c
            )));
        }
        Ok(Self {
            kind: NormalizerKind::Bn,
            means: means.to_vec(),
            vars: vars.to_vec(),
            grouping: (0..shape.n * shape.c).map(|i| i % shape.c).collect(),
            group_size: shape.n * shape.plane(),
            shape,
        })
    }
}

/// Group map and group size for `kind` on `shape`.
fn grouping(kind: NormalizerKind, shape: Shape4, shard: ShardConfig) -> Result<(Vec<usize>, usize, usize)> {
    let Shape4 { n, c, .. } = shape;
    let plane = shape.plane();
    let map = |f: &dyn Fn(usize, usize) -> usize| -> Vec<usize> { (0..n * c).map(|i| f(i / c, i % c)).collect() };
    Ok(match kind {
        NormalizerKind::Bn => {
            shard.check_batch(n)?;
            let g = map(&|s, ch| shard.shard_of(s) * c + ch);
            (g, shard.n_shards * c, shard.per_shard * plane)
        }
        NormalizerKind::In => (map(&|s, ch| s * c + ch), n * c, plane),
        NormalizerKind::Ln => (map(&|s, _| s), n, c * plane),
        NormalizerKind::Gn { groups } => {
            if groups == 0 || c % groups != 0 {
                return Err(Error::Config(format!("group norm with {groups} groups does not divide {c} channels")));
            }
            let per = c / groups;
            (map(&|s, ch| s * groups + ch / per), n * groups, per * plane)
        }
        NormalizerKind::Wn => {
            return Err(Error::Config("weight normalization acts on filters and has no activation moments".into()))
        }
    })
}

/// Means and biased variances of `x` for the axis scheme of `kind`.
///
/// Only BN reads `shard`; the other kinds never combine samples.
pub fn compute_moments(kind: NormalizerKind, x: &Tensor4, shard: ShardConfig) -> Result<Moments> {
    let shape = x.shape();
    let shard = if kind.crosses_samples() { shard } else { ShardConfig::single(shape.n) };
    let (map, groups, group_size) = grouping(kind, shape, shard)?;
    let inv = 1.0 / group_size as f64;
    let mut means = vec![0.0; groups];
    for (i, &g) in map.iter().enumerate() {
        means[g] += x.plane(i / shape.c, i % shape.c).iter().sum::<f64>();
    }
    means.iter_mut().for_each(|m| *m *= inv);
    let mut vars = vec![0.0; groups];
    for (i, &g) in map.iter().enumerate() {
        let mu = means[g];
        vars[g] += x.plane(i / shape.c, i % shape.c).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
    }
    vars.iter_mut().for_each(|v| *v *= inv);
    Ok(Moments { kind, means, vars, grouping: map, group_size, shape })
}

/// `(h - mu_g) / sqrt(var_g + eps)` for every element, using its group `g`.
pub fn normalize(x: &Tensor4, m: &Moments, eps: f64) -> Result<Tensor4> {
    if eps < 0.0 {
        return Err(Error::Config(format!("eps must be non-negative, got {eps}")));
    }
    if x.shape() != m.shape {
        return Err(Error::Usage(format!("moments computed for {} applied to {}", m.shape, x.shape())));
    }
    let plane = x.shape().plane();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let g = m.grouping[i];
        let (mu, inv_std) = (m.means[g], 1.0 / (m.vars[g] + eps).sqrt());
        chunk.iter_mut().for_each(|v| *v = (*v - mu) * inv_std);
    }
    Ok(out)
}

/// Per-channel scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    /// `gamma = 1`, `beta = 0`.
    pub fn identity(channels: usize) -> Self {
        Self { gamma: vec![1.0; channels], beta: vec![0.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, shape: Shape4) -> Result<()> {
        if self.gamma.len() != shape.c || self.beta.len() != shape.c {
            return Err(Error::Config(format!(
                "affine parameters of length {}/{} do not match {} channels",
                self.gamma.len(),
                self.beta.len(),
                shape.c
            )));
        }
        Ok(())
    }
}

pub fn affine_transform(xhat: &Tensor4, p: &AffineParams) -> Result<Tensor4> {
    let shape = xhat.shape();
    p.check(shape)?;
    let mut out = xhat.clone();
    for (i, chunk) in out.data_mut().chunks_mut(shape.plane()).enumerate() {
        let c = i % shape.c;
        let (g, b) = (p.gamma[c], p.beta[c]);
        chunk.iter_mut().for_each(|v| *v = g * *v + b);
    }
    Ok(out)
}

/// `(dgamma, dbeta)` of the affine map, i.e. per-channel `sum(dy * xhat)`
/// and `sum(dy)`.
pub fn affine_param_grads(xhat: &Tensor4, dy: &Tensor4) -> Result<(Vec<f64>, Vec<f64>)> {
    xhat.ensure_same_shape(dy, "affine gradient")?;
    let shape = xhat.shape();
    let mut dgamma = vec![0.0; shape.c];
    let mut dbeta = vec![0.0; shape.c];
    for n in 0..shape.n {
        for c in 0..shape.c {
            let (xs, gs) = (xhat.plane(n, c), dy.plane(n, c));
            dgamma[c] += xs.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
            dbeta[c] += gs.iter().sum::<f64>();
        }
    }
    Ok((dgamma, dbeta))
}

/// Forward state kept for [`norm_backward`].
#[derive(Debug, Clone)]
pub struct NormCache {
    pub kind: NormalizerKind,
    pub moments: Moments,
    pub xhat: Tensor4,
    pub gamma: Vec<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub dx: Tensor4,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

/// Training-mode forward of a single normalizer followed by its affine map.
pub fn norm_forward(
    kind: NormalizerKind,
    x: &Tensor4,
    shard: ShardConfig,
    affine: &AffineParams,
    eps: f64,
) -> Result<(Tensor4, NormCache)> {
    let moments = compute_moments(kind, x, shard)?;
    let xhat = normalize(x, &moments, eps)?;
    let y = affine_transform(&xhat, affine)?;
    Ok((y, NormCache { kind, moments, xhat, gamma: affine.gamma.clone(), eps }))
}

/// Exact gradient of `affine(normalize(x))`, including the dependence of each
/// group's mean and variance on `x`:
///
/// `dx = (dxhat - mean_g(dxhat) - xhat * mean_g(dxhat * xhat)) / sqrt(var_g + eps)`
pub fn norm_backward(cache: &NormCache, dy: &Tensor4) -> Result<NormGrads> {
    let shape = cache.xhat.shape();
    if dy.shape() != shape {
        return Err(Error::Usage(format!("stale normalization cache: forward saw {shape}, cotangent is {}", dy.shape())));
    }
    let (dgamma, dbeta) = affine_param_grads(&cache.xhat, dy)?;
    let m = &cache.moments;
    let plane = shape.plane();
    let groups = m.group_count();
    let mut sum_g = vec![0.0; groups];
    let mut sum_gx = vec![0.0; groups];
    for (i, &g) in m.grouping.iter().enumerate() {
        let gamma = cache.gamma[i % shape.c];
        let (xs, ds) = (&cache.xhat.data()[i * plane..(i + 1) * plane], &dy.data()[i * plane..(i + 1) * plane]);
        for (x, d) in xs.iter().zip(ds) {
            sum_g[g] += gamma * d;
            sum_gx[g] += gamma * d * x;
        }
    }
    let inv = 1.0 / m.group_size as f64;
    let mut dx = Tensor4::zeros(shape);
    for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
        let g = m.grouping[i];
        let gamma = cache.gamma[i % shape.c];
        let inv_std = 1.0 / (m.vars[g] + cache.eps).sqrt();
        let (mg, mgx) = (sum_g[g] * inv, sum_gx[g] * inv);
        let xs = &cache.xhat.data()[i * plane..(i + 1) * plane];
        let ds = &dy.data()[i * plane..(i + 1) * plane];
        for ((o, x), d) in chunk.iter_mut().zip(xs).zip(ds) {
            *o = (gamma * d - mg - x * mgx) * inv_std;
        }
    }
    Ok(NormGrads { dx, dgamma, dbeta })
}

#[cfg(test)]
mod tests;
