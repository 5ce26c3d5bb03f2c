use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::{ParamId, ParamStore};
use crate::analytics::{norm_layers, LayerMeta, RfGraph};
use crate::config::{ExperimentConfig, NormChoice};
use crate::error::{Error, Result};
use crate::norm::{
    affine_transform, compute_moments, norm_backward, norm_forward, normalize, AffineParams, BnRunningStats, Moments, NormCache,
    NormalizerKind, StatsMode,
};
use crate::shard::ShardConfig;
use crate::switchable::{
    harden, sn_backward, sn_forward, sn_forward_eval, HardRatio, Member, Omega, RatioState, SigmaAggregation, SnCache, SnLayer,
};
use crate::tensor::{
    add, conv2d, conv2d_grad, global_avg_pool, global_avg_pool_grad, linear, linear_grad, relu, relu_grad, softmax_cross_entropy,
    ConvParams, FilterBank, Shape4, Tensor4,
};

/// A square convolution with "same" padding (`kernel / 2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    fn params(&self) -> ConvParams {
        ConvParams::new(self.stride, self.kernel / 2, 1)
    }
}

/// Two conv-norm units on the trunk and an optional projection shortcut,
/// itself a conv-norm unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub conv_a: ConvSpec,
    pub conv_b: ConvSpec,
    pub shortcut: Option<ConvSpec>,
}

/// Stem conv-norm-relu, residual blocks, global average pooling and a
/// linear classifier. Every convolution is followed by exactly one
/// normalization layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: (usize, usize, usize),
    pub stem: ConvSpec,
    pub blocks: Vec<BlockSpec>,
    pub classes: usize,
}

impl NetworkSpec {
    /// 3x3 stem, then one stage per width with `blocks_per_stage` basic
    /// blocks; stages after the first downsample by 2 on entry.
    pub fn mini_resnet(input: (usize, usize, usize), widths: &[usize], blocks_per_stage: usize, classes: usize) -> Self {
        let stem = ConvSpec { in_c: input.0, out_c: widths[0], kernel: 3, stride: 1 };
        let mut blocks = Vec::new();
        let mut c = widths[0];
        for (s, &w) in widths.iter().enumerate() {
            for b in 0..blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let shortcut = (stride != 1 || c != w).then_some(ConvSpec { in_c: c, out_c: w, kernel: 1, stride });
                blocks.push(BlockSpec {
                    conv_a: ConvSpec { in_c: c, out_c: w, kernel: 3, stride },
                    conv_b: ConvSpec { in_c: w, out_c: w, kernel: 3, stride: 1 },
                    shortcut,
                });
                c = w;
            }
        }
        Self { input, stem, blocks, classes }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("network: {m}")));
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 || self.classes < 2 {
            return bad(format!("input {:?} with {} classes", self.input, self.classes));
        }
        let mut convs = vec![self.stem];
        for b in &self.blocks {
            convs.extend([b.conv_a, b.conv_b]);
            convs.extend(b.shortcut);
        }
        if let Some(cv) = convs.iter().find(|cv| cv.kernel % 2 == 0 || cv.kernel == 0 || cv.stride == 0 || cv.out_c == 0) {
            return bad(format!("conv {cv:?} needs an odd kernel and positive stride and width"));
        }
        if self.stem.in_c != c {
            return bad(format!("stem expects {} channels, input has {c}", self.stem.in_c));
        }
        let mut cur = self.stem.out_c;
        for (i, b) in self.blocks.iter().enumerate() {
            let out_c = b.conv_b.out_c;
            let chained = b.conv_a.in_c == cur && b.conv_b.in_c == b.conv_a.out_c && b.conv_b.stride == 1;
            let short_ok = match b.shortcut {
                Some(s) => s.in_c == cur && s.out_c == out_c && s.stride == b.conv_a.stride,
                None => cur == out_c && b.conv_a.stride == 1,
            };
            if !chained || !short_ok {
                return bad(format!("block {i} does not chain with its input of {cur} channels"));
            }
            cur = out_c;
        }
        Ok(())
    }

    /// Graph of spatial ops in the same order the model creates its layers.
    pub fn rf_graph(&self) -> RfGraph {
        let mut g = RfGraph::new();
        let x = g.input();
        let unit = |g: &mut RfGraph, from, cv: &ConvSpec, shortcut| {
            let c = g.conv(from, cv.kernel, cv.stride, 1);
            g.norm(c, shortcut)
        };
        let stem = unit(&mut g, x, &self.stem, false);
        let mut cur = g.pointwise(stem);
        for b in &self.blocks {
            let a = unit(&mut g, cur, &b.conv_a, false);
            let a = g.pointwise(a);
            let trunk = unit(&mut g, a, &b.conv_b, false);
            let short = match &b.shortcut {
                Some(s) => unit(&mut g, cur, s, true),
                None => cur,
            };
            let sum = g.add(trunk, short);
            cur = g.pointwise(sum);
        }
        g
    }

    pub fn layer_meta(&self) -> Result<Vec<LayerMeta>> {
        norm_layers(&self.rf_graph())
    }

    pub fn norm_count(&self) -> usize {
        1 + self.blocks.iter().map(|b| 2 + b.shortcut.is_some() as usize).sum::<usize>()
    }

    pub fn feature_width(&self) -> usize {
        self.blocks.last().map_or(self.stem.out_c, |b| b.conv_b.out_c)
    }
}

/// How normalization layers are built.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSetup {
    pub choice: NormChoice,
    pub gn_groups: usize,
    pub omega: Omega,
    pub aggregation: SigmaAggregation,
    pub eps: f64,
    pub stats: StatsMode,
    pub decay: f64,
}

impl NormSetup {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            choice: cfg.norm,
            gn_groups: cfg.gn_groups,
            omega: cfg.omega.clone(),
            aggregation: cfg.sigma_aggregation,
            eps: cfg.eps,
            stats: cfg.bn_stats,
            decay: cfg.bn_decay,
        }
    }

    pub fn plain(choice: NormChoice) -> Self {
        Self {
            choice,
            gn_groups: 1,
            omega: Omega::full(),
            aggregation: SigmaAggregation::Std,
            eps: crate::norm::DEFAULT_EPS,
            stats: StatsMode::BatchAverage,
            decay: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormImpl {
    Plain(NormalizerKind),
    Switch {
        omega: Omega,
        tied: bool,
        hard: Option<HardRatio>,
        logits_mu: ParamId,
        logits_sigma: Option<ParamId>,
        aggregation: SigmaAggregation,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub meta: LayerMeta,
    pub name: String,
    pub channels: usize,
    pub imp: NormImpl,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    /// Evaluation statistics of the BN member, when there is one.
    pub bn_stats: Option<BnRunningStats>,
}

impl NormLayer {
    pub fn is_switchable(&self) -> bool {
        matches!(self.imp, NormImpl::Switch { .. })
    }

    /// Current ratio state of a switchable layer.
    pub fn ratio_state(&self, params: &ParamStore) -> Option<RatioState> {
        let NormImpl::Switch { omega, hard, logits_mu, logits_sigma, .. } = &self.imp else {
            return None;
        };
        let mut s = RatioState::from_logits(
            omega.clone(),
            params.value(*logits_mu).to_vec(),
            logits_sigma.map(|id| params.value(id).to_vec()),
        )
        .expect("logit lengths fixed at construction");
        if let Some(h) = hard {
            s.apply_hard(*h).expect("hard choice validated when applied");
        }
        Some(s)
    }

    fn affine(&self, params: &ParamStore) -> AffineParams {
        AffineParams { gamma: params.value(self.gamma).to_vec(), beta: params.value(self.beta).to_vec() }
    }

    fn sn_layer(&self, params: &ParamStore) -> Option<SnLayer> {
        let NormImpl::Switch { aggregation, .. } = &self.imp else { return None };
        Some(SnLayer { state: self.ratio_state(params)?, affine: self.affine(params), eps: self.eps, aggregation: *aggregation })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Unit {
    conv: ConvSpec,
    weight: ParamId,
    norm: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    a: Unit,
    b: Unit,
    shortcut: Option<Unit>,
}

/// Forward mode of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Shard-local batch statistics; a tape is recorded.
    Train(ShardConfig),
    /// Frozen BN statistics; IN/LN/GN use each input's own statistics.
    Eval,
}

#[derive(Debug, Clone)]
pub enum NormTape {
    Plain(NormCache),
    Switch(SnCache),
}

impl NormTape {
    /// BN moments computed in this forward, if any.
    pub fn bn_moments(&self) -> Option<&Moments> {
        match self {
            NormTape::Plain(c) if c.kind == NormalizerKind::Bn => Some(&c.moments),
            NormTape::Plain(_) => None,
            NormTape::Switch(c) => c.moments(Member::Bn),
        }
    }

    /// Members whose moments were evaluated.
    pub fn computed_members(&self) -> Vec<Member> {
        match self {
            NormTape::Plain(_) => Vec::new(),
            NormTape::Switch(c) => c.computed_members(),
        }
    }
}

#[derive(Debug, Clone)]
struct UnitTape {
    input: Tensor4,
    /// Normalized output before any activation.
    out: Tensor4,
}

#[derive(Debug, Clone)]
struct BlockTape {
    a: UnitTape,
    b: UnitTape,
    shortcut: Option<UnitTape>,
    sum: Tensor4,
}

/// Everything the backward pass needs from one training forward.
#[derive(Debug, Clone)]
pub struct Tape {
    stem: UnitTape,
    blocks: Vec<BlockTape>,
    features_shape: Shape4,
    pooled: Vec<f64>,
    pub logits: Vec<f64>,
    /// One entry per normalization layer, in layer order.
    pub norms: Vec<NormTape>,
}

/// Loss, accuracy and tape of one training batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub tape: Tape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub setup: NormSetup,
    pub params: ParamStore,
    pub norms: Vec<NormLayer>,
    stem: Unit,
    blocks: Vec<Block>,
    fc_w: ParamId,
    fc_b: ParamId,
}

fn he_init(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..len).map(|_| d.sample(rng)).collect()
}

impl Model {
    /// Builds a model with `gamma = 1`, `beta = 0`, zero ratio logits and
    /// He-initialized convolutions drawn from `seed`.
    pub fn build(spec: &NetworkSpec, setup: &NormSetup, seed: u64) -> Result<Self> {
        spec.validate()?;
        if setup.choice == NormChoice::Gn {
            let widths = std::iter::once(spec.stem.out_c).chain(spec.blocks.iter().map(|b| b.conv_b.out_c));
            if setup.gn_groups == 0 || widths.clone().any(|w| w % setup.gn_groups != 0) {
                return Err(Error::Config(format!("gn_groups {} must divide every width", setup.gn_groups)));
            }
        }
        let meta = spec.layer_meta()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut norms = Vec::new();
        let mut unit = |name: String, cv: ConvSpec, params: &mut ParamStore, norms: &mut Vec<NormLayer>| -> Result<Unit> {
            let fan_in = cv.in_c * cv.kernel * cv.kernel;
            let weight = params.add(format!("{name}.conv.w"), he_init(&mut rng, cv.out_c * fan_in, fan_in));
            let c = cv.out_c;
            let gamma = params.add(format!("{name}.norm.gamma"), vec![1.0; c]);
            let beta = params.add(format!("{name}.norm.beta"), vec![0.0; c]);
            let plain = |k| NormImpl::Plain(k);
            let imp = match setup.choice {
                NormChoice::Bn => plain(NormalizerKind::Bn),
                NormChoice::In => plain(NormalizerKind::In),
                NormChoice::Ln => plain(NormalizerKind::Ln),
                NormChoice::Gn => plain(NormalizerKind::Gn { groups: setup.gn_groups }),
                NormChoice::Sn | NormChoice::SnTied => {
                    let tied = setup.choice == NormChoice::SnTied;
                    let k = setup.omega.len();
                    let logits_mu = params.add(format!("{name}.norm.logits_mu"), vec![0.0; k]);
                    let logits_sigma = (!tied).then(|| params.add(format!("{name}.norm.logits_sigma"), vec![0.0; k]));
                    NormImpl::Switch {
                        omega: setup.omega.clone(),
                        tied,
                        hard: None,
                        logits_mu,
                        logits_sigma,
                        aggregation: setup.aggregation,
                    }
                }
            };
            let uses_bn = match &imp {
                NormImpl::Plain(k) => *k == NormalizerKind::Bn,
                NormImpl::Switch { omega, .. } => omega.contains(Member::Bn),
            };
            let bn_stats = if uses_bn {
                Some(match setup.stats {
                    StatsMode::BatchAverage => BnRunningStats::batch_average(c),
                    StatsMode::MovingAverage => BnRunningStats::moving(c, setup.decay)?,
                })
            } else {
                None
            };
            let idx = norms.len();
            norms.push(NormLayer {
                meta: meta[idx],
                name: format!("{name}.norm"),
                channels: c,
                imp,
                gamma,
                beta,
                eps: setup.eps,
                bn_stats,
            });
            Ok(Unit { conv: cv, weight, norm: idx })
        };
        let stem = unit("stem".into(), spec.stem, &mut params, &mut norms)?;
        let mut blocks = Vec::new();
        for (i, b) in spec.blocks.iter().enumerate() {
            let a = unit(format!("block{i}.a"), b.conv_a, &mut params, &mut norms)?;
            let bb = unit(format!("block{i}.b"), b.conv_b, &mut params, &mut norms)?;
            let shortcut = b.shortcut.map(|s| unit(format!("block{i}.shortcut"), s, &mut params, &mut norms)).transpose()?;
            blocks.push(Block { a, b: bb, shortcut });
        }
        let width = spec.feature_width();
        let fd = Normal::new(0.0, (1.0 / width as f64).sqrt()).expect("positive std");
        let fc_w = params.add("fc.w", (0..spec.classes * width).map(|_| fd.sample(&mut rng)).collect());
        let fc_b = params.add("fc.b", vec![0.0; spec.classes]);
        Ok(Self { spec: spec.clone(), setup: setup.clone(), params, norms, stem, blocks, fc_w, fc_b })
    }

    pub fn from_config(cfg: &ExperimentConfig, input: (usize, usize, usize), classes: usize) -> Result<Self> {
        let spec = NetworkSpec::mini_resnet(input, &cfg.widths, cfg.blocks_per_stage, classes);
        Self::build(&spec, &NormSetup::from_config(cfg), cfg.seed)
    }

    pub fn has_switchable(&self) -> bool {
        self.norms.iter().any(NormLayer::is_switchable)
    }

    /// Ratio states of all switchable layers, paired with their metadata.
    pub fn ratio_states(&self) -> Vec<(LayerMeta, RatioState)> {
        self.norms.iter().filter_map(|n| n.ratio_state(&self.params).map(|s| (n.meta, s))).collect()
    }

    /// Freezes every switchable layer to the arg-max of its current ratios.
    pub fn harden_all(&mut self) -> Result<Vec<HardRatio>> {
        if !self.has_switchable() {
            return Err(Error::Usage("model has no switchable normalization layers to harden".into()));
        }
        let choices: Vec<HardRatio> = self.ratio_states().iter().map(|(_, s)| harden(s)).collect();
        self.set_hard(&choices)?;
        Ok(choices)
    }

    /// Applies one hard choice per switchable layer and freezes the logits.
    pub fn set_hard(&mut self, choices: &[HardRatio]) -> Result<()> {
        let n = self.norms.iter().filter(|n| n.is_switchable()).count();
        if choices.len() != n {
            return Err(Error::Incompatible(format!("{} hard choices for {n} switchable layers", choices.len())));
        }
        let mut it = choices.iter();
        for layer in &mut self.norms {
            if let NormImpl::Switch { omega, hard, logits_mu, logits_sigma, .. } = &mut layer.imp {
                let h = *it.next().expect("counted above");
                if !omega.contains(h.mu) || !omega.contains(h.sigma) {
                    return Err(Error::Incompatible(format!("hard choice outside {{{}}}", omega.label())));
                }
                *hard = Some(h);
                self.params.get_mut(*logits_mu).frozen = true;
                if let Some(s) = logits_sigma {
                    self.params.get_mut(*s).frozen = true;
                }
            }
        }
        Ok(())
    }

    /// Sets `+-L` logits on every switchable layer; the logits stay
    /// trainable.
    pub fn hard_init(&mut self, choices: &[HardRatio]) -> Result<()> {
        let n = self.norms.iter().filter(|n| n.is_switchable()).count();
        if choices.len() != n {
            return Err(Error::Incompatible(format!("{} hard choices for {n} switchable layers", choices.len())));
        }
        let mut it = choices.iter();
        for layer in &self.norms {
            if let NormImpl::Switch { omega, tied, logits_mu, logits_sigma, .. } = &layer.imp {
                let s = RatioState::hard_init(omega.clone(), *it.next().expect("counted above"), *tied)?;
                self.params.get_mut(*logits_mu).value.copy_from_slice(s.logits_mu());
                if let Some(id) = logits_sigma {
                    self.params.get_mut(*id).value.copy_from_slice(s.logits_sigma());
                }
            }
        }
        Ok(())
    }

    fn unit_forward(&self, u: &Unit, x: &Tensor4, mode: Mode, norms: &mut Vec<NormTape>) -> Result<Tensor4> {
        let w = FilterBank::new([u.conv.out_c, u.conv.in_c, u.conv.kernel, u.conv.kernel], self.params.value(u.weight).to_vec())?;
        let z = conv2d(x, &w, u.conv.params())?;
        let layer = &self.norms[u.norm];
        match mode {
            Mode::Train(shard) => match layer.sn_layer(&self.params) {
                Some(sn) => {
                    let (y, cache) = sn_forward(&z, &sn, shard)?;
                    norms.push(NormTape::Switch(cache));
                    Ok(y)
                }
                None => {
                    let NormImpl::Plain(kind) = layer.imp else { unreachable!() };
                    let (y, cache) = norm_forward(kind, &z, shard, &layer.affine(&self.params), layer.eps)?;
                    norms.push(NormTape::Plain(cache));
                    Ok(y)
                }
            },
            Mode::Eval => {
                let stats = || {
                    layer
                        .bn_stats
                        .as_ref()
                        .filter(|s| s.ready())
                        .ok_or_else(|| Error::Usage(format!("{}: BN statistics were never estimated", layer.name)))
                };
                match layer.sn_layer(&self.params) {
                    Some(sn) => {
                        let placeholder = BnRunningStats::batch_average(layer.channels);
                        let needs_bn = sn.state.active_members().contains(&Member::Bn);
                        let s = if needs_bn { stats()? } else { layer.bn_stats.as_ref().unwrap_or(&placeholder) };
                        sn_forward_eval(&z, &sn, s)
                    }
                    None => {
                        let NormImpl::Plain(kind) = layer.imp else { unreachable!() };
                        let m = if kind == NormalizerKind::Bn {
                            let s = stats()?;
                            Moments::from_channel_stats(z.shape(), &s.means, &s.vars)?
                        } else {
                            compute_moments(kind, &z, ShardConfig::single(z.shape().n))?
                        };
                        affine_transform(&normalize(&z, &m, layer.eps)?, &layer.affine(&self.params))
                    }
                }
            }
        }
    }

    /// Runs the network. In training mode the batch must split into the
    /// configured shards and a tape is returned.
    pub fn forward(&self, x: &Tensor4, mode: Mode) -> Result<(Vec<f64>, Option<Tape>)> {
        let (c, h, w) = self.spec.input;
        let s = x.shape();
        if (s.c, s.h, s.w) != (c, h, w) {
            return Err(Error::Input(format!("model expects {c}x{h}x{w} inputs, got {s}")));
        }
        if let Mode::Train(shard) = mode {
            shard.check_batch(s.n)?;
        }
        let mut norms = Vec::with_capacity(self.norms.len());
        let stem_out = self.unit_forward(&self.stem, x, mode, &mut norms)?;
        let mut cur = relu(&stem_out);
        let stem = UnitTape { input: x.clone(), out: stem_out };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let a_out = self.unit_forward(&b.a, &cur, mode, &mut norms)?;
            let a_act = relu(&a_out);
            let b_out = self.unit_forward(&b.b, &a_act, mode, &mut norms)?;
            let (short_val, short_tape) = match &b.shortcut {
                Some(u) => {
                    let o = self.unit_forward(u, &cur, mode, &mut norms)?;
                    (o.clone(), Some(UnitTape { input: cur.clone(), out: o }))
                }
                None => (cur.clone(), None),
            };
            let sum = add(&b_out, &short_val)?;
            let next = relu(&sum);
            blocks.push(BlockTape {
                a: UnitTape { input: cur, out: a_out },
                b: UnitTape { input: a_act, out: b_out },
                shortcut: short_tape,
                sum,
            });
            cur = next;
        }
        let pooled = global_avg_pool(&cur).into_data();
        let logits = linear(&pooled, self.params.value(self.fc_w), self.params.value(self.fc_b))?;
        let tape = matches!(mode, Mode::Train(_)).then(|| Tape {
            stem,
            blocks,
            features_shape: cur.shape(),
            pooled,
            logits: logits.clone(),
            norms,
        });
        Ok((logits, tape))
    }

    /// Mean cross-entropy and number of correct predictions.
    pub fn loss(logits: &[f64], labels: &[usize]) -> Result<(f64, usize, Vec<f64>)> {
        let k = logits.len() / labels.len().max(1);
        let inv = 1.0 / labels.len() as f64;
        let (mut loss, mut correct) = (0.0, 0);
        let mut dlogits = Vec::with_capacity(logits.len());
        for (row, &label) in logits.chunks(k).zip(labels) {
            let (l, d) = softmax_cross_entropy(row, label)?;
            loss += l;
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            correct += (best == label) as usize;
            dlogits.extend(d.iter().map(|g| g * inv));
        }
        Ok((loss * inv, correct, dlogits))
    }

    /// Training forward plus backward; gradients land in `self.params`.
    pub fn forward_backward(&mut self, x: &Tensor4, labels: &[usize], shard: ShardConfig) -> Result<BatchResult> {
        let (logits, tape) = self.forward(x, Mode::Train(shard))?;
        let tape = tape.expect("training forward records a tape");
        let (loss, correct, dlogits) = Self::loss(&logits, labels)?;
        self.params.zero_grads();
        self.backward(&tape, &dlogits)?;
        Ok(BatchResult { loss, correct, tape })
    }

    fn unit_backward(&mut self, u: &Unit, t: &UnitTape, norm: &NormTape, dy: &Tensor4) -> Result<Tensor4> {
        let layer = &self.norms[u.norm];
        let (gamma, beta) = (layer.gamma, layer.beta);
        let dz = match norm {
            NormTape::Plain(cache) => {
                let g = norm_backward(cache, dy)?;
                self.params.accumulate(gamma, &g.dgamma);
                self.params.accumulate(beta, &g.dbeta);
                g.dx
            }
            NormTape::Switch(cache) => {
                let g = sn_backward(cache, dy)?;
                let NormImpl::Switch { logits_mu, logits_sigma, .. } = layer.imp else { unreachable!() };
                self.params.accumulate(gamma, &g.dgamma);
                self.params.accumulate(beta, &g.dbeta);
                self.params.accumulate(logits_mu, &g.dlogits_mu);
                if let (Some(id), Some(d)) = (logits_sigma, &g.dlogits_sigma) {
                    self.params.accumulate(id, d);
                }
                g.dx
            }
        };
        let w = FilterBank::new([u.conv.out_c, u.conv.in_c, u.conv.kernel, u.conv.kernel], self.params.value(u.weight).to_vec())?;
        let (dx, dw) = conv2d_grad(&t.input, &w, &dz, u.conv.params())?;
        self.params.accumulate(u.weight, dw.data());
        Ok(dx)
    }

    /// Accumulates parameter gradients of `sum(dlogits * logits)`.
    pub fn backward(&mut self, tape: &Tape, dlogits: &[f64]) -> Result<()> {
        let classes = self.spec.classes;
        let g = linear_grad(&tape.pooled, self.params.value(self.fc_w), classes, dlogits)?;
        self.params.accumulate(self.fc_w, &g.dweight);
        self.params.accumulate(self.fc_b, &g.dbias);
        let dpooled = Tensor4::new(Shape4::new(tape.features_shape.n, tape.features_shape.c, 1, 1), g.dx)?;
        let mut d = global_avg_pool_grad(tape.features_shape, &dpooled)?;
        let blocks = self.blocks.clone();
        for (b, t) in blocks.iter().zip(&tape.blocks).rev() {
            let dsum = relu_grad(&t.sum, &d)?;
            let mut dx = match (&b.shortcut, &t.shortcut) {
                (Some(u), Some(st)) => self.unit_backward(u, st, &tape.norms[u.norm], &dsum)?,
                _ => dsum.clone(),
            };
            let da_act = self.unit_backward(&b.b, &t.b, &tape.norms[b.b.norm], &dsum)?;
            let da = relu_grad(&t.a.out, &da_act)?;
            let dtrunk = self.unit_backward(&b.a, &t.a, &tape.norms[b.a.norm], &da)?;
            for (a, v) in dx.data_mut().iter_mut().zip(dtrunk.data()) {
                *a += v;
            }
            d = dx;
        }
        let dstem = relu_grad(&tape.stem.out, &d)?;
        let stem = self.stem;
        self.unit_backward(&stem, &tape.stem, &tape.norms[stem.norm], &dstem)?;
        Ok(())
    }

    /// Feeds this step's BN moments into moving-average statistics.
    pub fn update_moving_stats(&mut self, tape: &Tape) -> Result<()> {
        for (layer, t) in self.norms.iter_mut().zip(&tape.norms) {
            if let (Some(stats), Some(m)) = (&mut layer.bn_stats, t.bn_moments()) {
                if stats.mode == StatsMode::MovingAverage {
                    stats.observe(m)?;
                }
            }
        }
        Ok(())
    }

    /// Re-estimates batch-average statistics from training-mode forwards
    /// over the given batches. Parameters are not touched.
    pub fn estimate_batch_average<'a>(
        &mut self,
        batches: impl IntoIterator<Item = &'a Tensor4>,
        shard: ShardConfig,
    ) -> Result<()> {
        for layer in &mut self.norms {
            if let Some(s) = &mut layer.bn_stats {
                s.reset();
            }
        }
        for x in batches {
            let (_, tape) = self.forward(x, Mode::Train(shard))?;
            let tape = tape.expect("training forward records a tape");
            for (layer, t) in self.norms.iter_mut().zip(&tape.norms) {
                if let (Some(stats), Some(m)) = (&mut layer.bn_stats, t.bn_moments()) {
                    if stats.mode == StatsMode::BatchAverage {
                        stats.observe(m)?;
                    }
                }
            }
        }
        for layer in &mut self.norms {
            if let Some(s) = &mut layer.bn_stats {
                if s.mode == StatsMode::BatchAverage && s.batches_seen > 0 {
                    s.finalize()?;
                }
            }
        }
        Ok(())
    }

    /// Whether evaluation needs batch-average statistics at all.
    pub fn needs_batch_average(&self) -> bool {
        self.norms.iter().any(|n| n.bn_stats.as_ref().is_some_and(|s| s.mode == StatsMode::BatchAverage))
    }
}
