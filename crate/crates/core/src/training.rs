//! Joint training of the encoder and both noise generators.
//!
//! Every epoch draws fresh noise, builds the noisy view, encodes both views
//! with the shared encoder and takes one Adam step per parameter group on the
//! same loss. View 1 is always the clean graph.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    gradcheck, CsrMatrix, EdgePattern, GradcheckReport, NumericMode, Tape, Tensor, Var,
    DEFAULT_STEP,
};
use crate::encoder::{encode, project, EncoderDims, EncoderParams, EncoderVars, Propagation};
use crate::error::{Error, Result};
use crate::graph::{Graph, NormalizedAdjacency};
use crate::losses::{
    infonce_var, neg_conditional_entropy_from_losses, task_entropy, LossConfig, NegativesMode,
};
use crate::noise::{
    attr_noise, edge_noise, AttrGenParams, AttrGenVars, AttrNoiseSample, EdgeEndpoints,
    EdgeGenParams, EdgeGenVars, EdgeNoiseSample, EdgeRelaxation, GumbelDraws, NoiseSample,
    DEFAULT_ATTR_HIDDEN, DEFAULT_EDGE_HIDDEN,
};
use crate::optim::{AdamConfig, OptimizerState};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    None,
    Random,
    #[default]
    Learnable,
}

impl AugMode {
    pub const ALL: [AugMode; 3] = [AugMode::None, AugMode::Random, AugMode::Learnable];

    pub fn name(self) -> &'static str {
        match self {
            AugMode::None => "none",
            AugMode::Random => "random",
            AugMode::Learnable => "learnable",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_encoder: f64,
    pub wd_encoder: f64,
    pub lr_edge_gen: f64,
    pub lr_attr_gen: f64,
    pub wd_gens: f64,
    pub tau: f64,
    pub negatives: NegativesMode,
    pub symmetrize: bool,
    pub seed: u64,
    pub aug_edge: AugMode,
    pub aug_feat: AugMode,
    pub random_drop_rate: f64,
    pub random_mask_rate: f64,
    pub gumbel_temperature: f64,
    /// Linear anneal target reached at the last epoch.
    pub gumbel_temperature_final: Option<f64>,
    pub edge_relaxation: EdgeRelaxation,
    pub hidden: usize,
    pub embed: usize,
    pub proj: usize,
    pub edge_hidden: usize,
    pub attr_hidden: usize,
    /// Contrast projected embeddings; `false` contrasts the encoder output.
    pub use_projection: bool,
    pub row_normalize_features: bool,
    pub samples_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr_encoder: 5e-4,
            wd_encoder: 1e-4,
            lr_edge_gen: 1e-4,
            lr_attr_gen: 1e-3,
            wd_gens: 1e-4,
            tau: 0.3,
            negatives: NegativesMode::IntraAndInter,
            symmetrize: false,
            seed: 0,
            aug_edge: AugMode::Learnable,
            aug_feat: AugMode::Learnable,
            random_drop_rate: 0.2,
            random_mask_rate: 0.3,
            gumbel_temperature: 1.0,
            gumbel_temperature_final: None,
            edge_relaxation: EdgeRelaxation::StraightThrough,
            hidden: 512,
            embed: 256,
            proj: 256,
            edge_hidden: DEFAULT_EDGE_HIDDEN,
            attr_hidden: DEFAULT_ATTR_HIDDEN,
            use_projection: true,
            row_normalize_features: false,
            samples_per_epoch: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("random_drop_rate", self.random_drop_rate),
            ("random_mask_rate", self.random_mask_rate),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        let positive = [
            ("lr_encoder", self.lr_encoder),
            ("lr_edge_gen", self.lr_edge_gen),
            ("lr_attr_gen", self.lr_attr_gen),
            ("tau", self.tau),
            ("gumbel_temperature", self.gumbel_temperature),
            (
                "gumbel_temperature_final",
                self.gumbel_temperature_final
                    .unwrap_or(self.gumbel_temperature),
            ),
        ];
        for (name, v) in positive {
            // lr = 0 is allowed as a frozen-parameter control
            let ok = if name.starts_with("lr_") {
                v >= 0.0
            } else {
                v > 0.0
            };
            if !ok || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("wd_encoder", self.wd_encoder), ("wd_gens", self.wd_gens)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        let dims = [
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("proj", self.proj),
            ("edge_hidden", self.edge_hidden),
            ("attr_hidden", self.attr_hidden),
            ("samples_per_epoch", self.samples_per_epoch),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            negatives: self.negatives,
            symmetrize: self.symmetrize,
        }
    }

    pub fn encoder_dims(&self, feat_dim: usize) -> EncoderDims {
        EncoderDims {
            feat_dim,
            hidden: self.hidden,
            embed: self.embed,
            proj: self.proj,
        }
    }

    pub fn temperature_at(&self, epoch: usize) -> f64 {
        match self.gumbel_temperature_final {
            Some(end) if self.epochs > 1 => {
                let t = epoch as f64 / (self.epochs - 1) as f64;
                self.gumbel_temperature + (end - self.gumbel_temperature) * t
            }
            Some(end) => end,
            None => self.gumbel_temperature,
        }
    }
}

/// Immutable per-graph data shared by every epoch.
#[derive(Clone, Debug)]
pub struct TrainContext {
    pub features: Tensor,
    pub adjacency: NormalizedAdjacency,
    pub pattern: Arc<EdgePattern>,
    pub ends: EdgeEndpoints,
}

impl TrainContext {
    pub fn new(graph: &Graph, row_normalize_features: bool) -> Self {
        let features = if row_normalize_features {
            graph.row_normalized_features()
        } else {
            graph.features().clone()
        };
        Self {
            features,
            adjacency: graph.normalize(),
            pattern: Arc::new(graph.edge_pattern()),
            ends: EdgeEndpoints::of(graph),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.pattern.num_edges
    }
}

/// How the noisy view treats the topology.
#[derive(Clone, Debug, PartialEq)]
pub enum EdgeView {
    Clean,
    /// Parameter-free keep mask.
    Fixed(Vec<bool>),
    Learnable(GumbelDraws),
}

/// How the noisy view treats the node features.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatView {
    Clean,
    /// Elementwise 0/1 mask.
    Masked(Tensor),
    /// Parameter-free additive noise.
    Shifted(Tensor),
    /// Frozen standard-normal draw for the attribute generator.
    Learnable(Tensor),
}

/// Everything random about one noisy view, drawn before the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewDraws {
    pub edge: EdgeView,
    pub feat: FeatView,
}

impl ViewDraws {
    pub fn clean() -> Self {
        Self {
            edge: EdgeView::Clean,
            feat: FeatView::Clean,
        }
    }

    pub fn sample<R: Rng + ?Sized>(ctx: &TrainContext, cfg: &TrainConfig, rng: &mut R) -> Self {
        let edge = match cfg.aug_edge {
            AugMode::None => EdgeView::Clean,
            AugMode::Random => {
                EdgeView::Fixed(random_edge_keep(ctx.num_edges(), cfg.random_drop_rate, rng))
            }
            AugMode::Learnable => EdgeView::Learnable(GumbelDraws::sample(ctx.num_edges(), rng)),
        };
        let (n, d) = ctx.features.shape();
        let feat = match cfg.aug_feat {
            AugMode::None => FeatView::Clean,
            AugMode::Random => {
                FeatView::Masked(random_feature_mask(n, d, cfg.random_mask_rate, rng))
            }
            AugMode::Learnable => FeatView::Learnable(Tensor::standard_normal(n, d, rng)),
        };
        Self { edge, feat }
    }
}

fn random_edge_keep<R: Rng + ?Sized>(num_edges: usize, p_drop: f64, rng: &mut R) -> Vec<bool> {
    (0..num_edges).map(|_| !rng.random_bool(p_drop)).collect()
}

fn random_feature_mask<R: Rng + ?Sized>(n: usize, d: usize, p_mask: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(n, d, |_, _| if rng.random_bool(p_mask) { 0.0 } else { 1.0 })
}

/// A randomly augmented view with its keep mask.
#[derive(Clone, Debug)]
pub struct RandomView {
    pub keep: Vec<bool>,
    pub adjacency: NormalizedAdjacency,
    pub features: Tensor,
}

/// Drops each undirected edge with probability `p_e` and zeroes each
/// feature entry with probability `p_f`.
pub fn random_augment(graph: &Graph, p_e: f64, p_f: f64, seed: u64) -> Result<RandomView> {
    for (name, p) in [("edge drop rate", p_e), ("feature mask rate", p_f)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = random_edge_keep(graph.num_edges(), p_e, &mut rng);
    let x = graph.features();
    let mask = random_feature_mask(x.rows(), x.cols(), p_f, &mut rng);
    let features = Tensor::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) * mask.get(i, j));
    let adjacency = graph.with_edges_kept(&keep)?.normalize();
    Ok(RandomView {
        keep,
        adjacency,
        features,
    })
}

/// Settings the objective needs besides parameters and draws.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveSettings {
    pub loss: LossConfig,
    pub use_projection: bool,
    pub temperature: f64,
    pub relaxation: EdgeRelaxation,
}

impl ObjectiveSettings {
    pub fn from_config(cfg: &TrainConfig, epoch: usize) -> Self {
        Self {
            loss: cfg.loss_config(),
            use_projection: cfg.use_projection,
            temperature: cfg.temperature_at(epoch),
            relaxation: cfg.edge_relaxation,
        }
    }
}

pub struct Objective {
    pub loss: Var,
    /// Per-node losses of the first noise sample.
    pub per_node: Var,
    /// Realised noise of the first sample.
    pub sample: NoiseSample,
}

fn head(tape: &mut Tape, z: Var, enc: &EncoderVars, use_projection: bool) -> Result<Var> {
    if use_projection {
        project(tape, z, enc)
    } else {
        Ok(z)
    }
}

/// Encodes the noisy view described by `draws` and returns its contrast head.
#[allow(clippy::too_many_arguments)]
fn noisy_head(
    tape: &mut Tape,
    ctx: &TrainContext,
    set: &ObjectiveSettings,
    x: Var,
    enc: &EncoderVars,
    edge: Option<&EdgeGenVars>,
    attr: Option<&AttrGenVars>,
    draws: &ViewDraws,
) -> Result<(Var, NoiseSample)> {
    let mut sample = NoiseSample::default();
    let x2 = match &draws.feat {
        FeatView::Clean => x,
        FeatView::Masked(mask) => {
            let m = tape.constant(mask.clone());
            tape.mul(x, m)?
        }
        FeatView::Shifted(noise) => {
            let s = tape.constant(noise.clone());
            sample.attr = Some(AttrNoiseSample {
                mu: noise.clone(),
                sigma: Tensor::zeros(noise.rows(), noise.cols()),
                eps_hat: Tensor::zeros(noise.rows(), noise.cols()),
                noise: noise.clone(),
            });
            tape.add(x, s)?
        }
        FeatView::Learnable(eps_hat) => {
            let p = attr.ok_or_else(|| {
                Error::Config("learnable feature noise needs an attribute generator".into())
            })?;
            let a = attr_noise(tape, x, p, eps_hat.clone())?;
            sample.attr = Some(AttrNoiseSample {
                mu: tape.value(a.mu).clone(),
                sigma: tape.value(a.sigma).clone(),
                noise: tape.value(a.noise).clone(),
                eps_hat: a.eps_hat,
            });
            tape.add(x, a.noise)?
        }
    };
    let fixed_matrix: Arc<CsrMatrix>;
    let prop = match &draws.edge {
        EdgeView::Clean => Propagation::fixed(&ctx.adjacency),
        EdgeView::Fixed(keep) => {
            let w: Vec<f64> = keep.iter().map(|&k| k as u8 as f64).collect();
            let (values, _) = ctx.pattern.normalized_values(&w);
            fixed_matrix = Arc::new(ctx.pattern.with_values(values));
            sample.edge = Some(EdgeNoiseSample {
                drop_prob: w.iter().map(|k| 1.0 - k).collect(),
                keep_relaxed: w,
                keep_hard: keep.clone(),
            });
            Propagation::Fixed(&fixed_matrix)
        }
        EdgeView::Learnable(g) => {
            let p = edge.ok_or_else(|| {
                Error::Config("learnable edge noise needs an edge generator".into())
            })?;
            let out = edge_noise(tape, x, &ctx.ends, p, g, set.temperature, set.relaxation)?;
            if ctx.num_edges() > 0 && out.hard_keep.iter().all(|&k| !k) {
                log::warn!("noise sample dropped every edge; view keeps self-loops only");
            }
            sample.edge = Some(EdgeNoiseSample {
                drop_prob: tape.value(out.drop_prob).data().to_vec(),
                keep_relaxed: tape.value(out.soft_keep).data().to_vec(),
                keep_hard: out.hard_keep,
            });
            let values = tape.normalize_adjacency(&ctx.pattern, out.keep)?;
            Propagation::Learned {
                pattern: &ctx.pattern,
                values,
            }
        }
    };
    let z2 = encode(tape, prop, x2, enc)?;
    Ok((head(tape, z2, enc, set.use_projection)?, sample))
}

/// The training loss averaged over one noisy view per entry of `draws`.
pub fn objective(
    tape: &mut Tape,
    ctx: &TrainContext,
    set: &ObjectiveSettings,
    enc: &EncoderVars,
    edge: Option<&EdgeGenVars>,
    attr: Option<&AttrGenVars>,
    draws: &[ViewDraws],
) -> Result<Objective> {
    if draws.is_empty() {
        return Err(Error::Config(
            "objective needs at least one noise sample".into(),
        ));
    }
    let x = tape.constant(ctx.features.clone());
    let z1 = encode(tape, Propagation::fixed(&ctx.adjacency), x, enc)?;
    let h1 = head(tape, z1, enc, set.use_projection)?;

    let mut losses = Vec::with_capacity(draws.len());
    let mut first = None;
    for d in draws {
        let (h2, sample) = if *d == ViewDraws::clean() {
            // identical views: reuse the first encoding
            (h1, NoiseSample::default())
        } else {
            noisy_head(tape, ctx, set, x, enc, edge, attr, d)?
        };
        let (loss, terms) = infonce_var(tape, h1, h2, &set.loss)?;
        losses.push(loss);
        if first.is_none() {
            first = Some((terms.per_node, sample));
        }
    }
    let loss = if losses.len() == 1 {
        losses[0]
    } else {
        let stacked = tape.concat_rows(&losses)?;
        tape.mean(stacked)?
    };
    let (per_node, sample) = first.expect("at least one sample");
    Ok(Objective {
        loss,
        per_node,
        sample,
    })
}

/// One line of the diagnostics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mean_kappa: f64,
    pub task_entropy: f64,
    pub neg_cond_entropy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_keep_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_gen_grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attr_gen_grad_norm: Option<f64>,
}

/// State handed back when the loss stops being finite.
#[derive(Clone, Debug)]
pub struct Divergence {
    pub epoch: usize,
    /// Encoder parameters before the failing epoch's update.
    pub last_good: EncoderParams,
    pub trace: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub encoder: EncoderParams,
    pub edge_gen: Option<EdgeGenParams>,
    pub attr_gen: Option<AttrGenParams>,
    pub trace: Vec<EpochRecord>,
    pub last_sample: Option<NoiseSample>,
}

/// Initial parameters for a run; generators only where the mode needs them.
pub fn init_params(
    feat_dim: usize,
    cfg: &TrainConfig,
) -> (EncoderParams, Option<EdgeGenParams>, Option<AttrGenParams>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: [u64; 3] = rng.random();
    let enc = EncoderParams::init(cfg.encoder_dims(feat_dim), seeds[0]);
    let edge = (cfg.aug_edge == AugMode::Learnable)
        .then(|| EdgeGenParams::init(feat_dim, cfg.edge_hidden, seeds[1]));
    let attr = (cfg.aug_feat == AugMode::Learnable)
        .then(|| AttrGenParams::init(feat_dim, cfg.attr_hidden, seeds[2]));
    (enc, edge, attr)
}

/// Random stream for one epoch; stream 0 is never used so epoch draws never
/// overlap the initialisation stream.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

struct Group<P: ParamSet> {
    params: P,
    opt: OptimizerState,
}

impl<P: ParamSet> Group<P> {
    fn new(params: P, lr: f64, wd: f64) -> Self {
        let opt = OptimizerState::new(
            AdamConfig::new(lr, wd),
            params.named().into_iter().map(|(_, t)| t),
        );
        Self { params, opt }
    }

    fn step(&mut self, grads: &[Tensor]) -> Result<()> {
        let mut slots: Vec<&mut Tensor> = self
            .params
            .named_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        self.opt.step(&mut slots, grads)
    }
}

fn collect_grads(tape: &Tape, grads: &crate::autodiff::Gradients, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| grads.get_or_zeros(v, tape.value(v)))
        .collect()
}

/// Runs the full training loop.
pub fn train(graph: &Graph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ctx = TrainContext::new(graph, cfg.row_normalize_features);
    let (enc, edge, attr) = init_params(graph.feat_dim(), cfg);
    let mut enc = Group::new(enc, cfg.lr_encoder, cfg.wd_encoder);
    let mut edge = edge.map(|p| Group::new(p, cfg.lr_edge_gen, cfg.wd_gens));
    let mut attr = attr.map(|p| Group::new(p, cfg.lr_attr_gen, cfg.wd_gens));

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut last_sample = None;
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let draws: Vec<ViewDraws> = (0..cfg.samples_per_epoch)
            .map(|_| ViewDraws::sample(&ctx, cfg, &mut rng))
            .collect();

        let mut tape = Tape::with_mode(NumericMode::Clamped);
        let enc_list = enc.params.bind_list(&mut tape);
        let edge_list = edge.as_ref().map(|g| g.params.bind_list(&mut tape));
        let attr_list = attr.as_ref().map(|g| g.params.bind_list(&mut tape));
        let enc_vars = EncoderParams::vars_from(&enc_list);
        let edge_vars = edge_list.as_deref().map(EdgeGenParams::vars_from);
        let attr_vars = attr_list.as_deref().map(AttrGenParams::vars_from);

        let set = ObjectiveSettings::from_config(cfg, epoch);
        let diverged = |trace: &Vec<EpochRecord>, enc: &EncoderParams| {
            Error::Diverged(Box::new(Divergence {
                epoch,
                last_good: enc.clone(),
                trace: trace.clone(),
            }))
        };
        let obj = match objective(
            &mut tape,
            &ctx,
            &set,
            &enc_vars,
            edge_vars.as_ref(),
            attr_vars.as_ref(),
            &draws,
        ) {
            Ok(o) => o,
            Err(Error::NonFinite { .. }) => return Err(diverged(&trace, &enc.params)),
            Err(e) => return Err(e),
        };
        let loss = tape.value(obj.loss).to_scalar();
        if !loss.is_finite() {
            return Err(diverged(&trace, &enc.params));
        }
        let per_node = tape.value(obj.per_node).data().to_vec();
        let grads = match tape.backward(obj.loss) {
            Ok(g) => g,
            Err(Error::NonFinite { .. }) => return Err(diverged(&trace, &enc.params)),
            Err(e) => return Err(e),
        };

        let enc_grads = collect_grads(&tape, &grads, &enc_list);
        let edge_grads = edge_list.as_ref().map(|l| collect_grads(&tape, &grads, l));
        let attr_grads = attr_list.as_ref().map(|l| collect_grads(&tape, &grads, l));
        let all_finite = enc_grads
            .iter()
            .chain(edge_grads.iter().flatten())
            .chain(attr_grads.iter().flatten())
            .all(Tensor::is_finite);
        if !all_finite {
            return Err(diverged(&trace, &enc.params));
        }

        let n = per_node.len() as f64;
        trace.push(EpochRecord {
            epoch,
            loss,
            mean_kappa: per_node.iter().map(|l| (-l).exp()).sum::<f64>() / n,
            task_entropy: task_entropy(&per_node),
            neg_cond_entropy: neg_conditional_entropy_from_losses(&per_node),
            edge_keep_fraction: obj.sample.edge.as_ref().map(|e| {
                e.keep_hard.iter().filter(|&&k| k).count() as f64 / e.keep_hard.len().max(1) as f64
            }),
            edge_gen_grad_norm: edge_grads.as_deref().map(grad_norm),
            attr_gen_grad_norm: attr_grads.as_deref().map(grad_norm),
        });
        log::debug!("epoch {epoch}: loss {loss:.6}");

        enc.step(&enc_grads)?;
        if let (Some(g), Some(gr)) = (edge.as_mut(), edge_grads) {
            g.step(&gr)?;
        }
        if let (Some(g), Some(gr)) = (attr.as_mut(), attr_grads) {
            g.step(&gr)?;
        }
        last_sample = Some(obj.sample);
    }
    Ok(TrainOutcome {
        encoder: enc.params,
        edge_gen: edge.map(|g| g.params),
        attr_gen: attr.map(|g| g.params),
        trace,
        last_sample,
    })
}

impl TrainOutcome {
    /// Encoder output on the clean graph, used for evaluation.
    pub fn embeddings(&self, graph: &Graph, cfg: &TrainConfig) -> Result<Tensor> {
        let ctx = TrainContext::new(graph, cfg.row_normalize_features);
        crate::encoder::embed(&self.encoder, &ctx.adjacency, &ctx.features)
    }
}

/// Parameters checked by [`gradcheck_objective`], in tape order.
pub fn objective_param_list(
    enc: &EncoderParams,
    edge: &EdgeGenParams,
    attr: &AttrGenParams,
) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (prefix, list) in [
        ("encoder", enc.to_named_tensors()),
        ("edge_gen", edge.to_named_tensors()),
        ("attr_gen", attr.to_named_tensors()),
    ] {
        out.extend(list.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
    }
    out
}

/// Finite-difference check of the full objective with both generators
/// learnable and all draws frozen.
///
/// The edge path runs in relaxed mode: with hard forward weights the loss is
/// piecewise constant in the edge-generator parameters, so finite differences
/// would see zero. `inject_bug` doubles the backward pass of the loss, which
/// must make the check fail.
pub fn gradcheck_objective(
    graph: &Graph,
    cfg: &TrainConfig,
    draw_seed: u64,
    inject_bug: bool,
) -> Result<GradcheckReport> {
    let mut cfg = cfg.clone();
    cfg.aug_edge = AugMode::Learnable;
    cfg.aug_feat = AugMode::Learnable;
    cfg.edge_relaxation = EdgeRelaxation::Relaxed;
    cfg.validate()?;
    let ctx = TrainContext::new(graph, cfg.row_normalize_features);
    let (enc, edge, attr) = init_params(graph.feat_dim(), &cfg);
    let (edge, attr) = (edge.expect("learnable"), attr.expect("learnable"));
    let params = objective_param_list(&enc, &edge, &attr);
    let (ne, nd) = (enc.named().len(), edge.named().len());
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
    let draws: Vec<ViewDraws> = (0..cfg.samples_per_epoch)
        .map(|_| ViewDraws::sample(&ctx, &cfg, &mut rng))
        .collect();
    let set = ObjectiveSettings::from_config(&cfg, 0);
    gradcheck(
        &params,
        |tape, vars| {
            let e = EncoderParams::vars_from(&vars[..ne]);
            let g = EdgeGenParams::vars_from(&vars[ne..ne + nd]);
            let a = AttrGenParams::vars_from(&vars[ne + nd..]);
            let obj = objective(tape, &ctx, &set, &e, Some(&g), Some(&a), &draws)?;
            if inject_bug {
                let value = tape.value(obj.loss).clone();
                return tape.custom(&[obj.loss], value, |g, _, _| vec![g.map(|v| 2.0 * v)]);
            }
            Ok(obj.loss)
        },
        DEFAULT_STEP,
    )
}

/// Small random graph and model for gradient checks: two SBM blocks of
/// `n_per_block` nodes with 4 features and narrow layers.
pub fn gradcheck_fixture(seed: u64, n_per_block: usize) -> Result<(Graph, TrainConfig)> {
    let (graph, _) = crate::graph::generate_sbm(&crate::graph::SbmParams {
        n_per_block,
        num_blocks: 2,
        p_in: 0.6,
        p_out: 0.15,
        feat_dim: 4,
        feat_shift: 1.0,
        seed,
    })?;
    let cfg = TrainConfig {
        seed,
        hidden: 8,
        embed: 6,
        // wide enough that no node has every projection unit inactive
        proj: 16,
        edge_hidden: 4,
        attr_hidden: 4,
        ..TrainConfig::default()
    };
    Ok((graph, cfg))
}
