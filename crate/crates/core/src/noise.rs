//! Learnable noise generators for the second contrastive view.
//!
//! Topology: an MLP over the concatenated endpoint features of every
//! undirected edge produces (keep, drop) logits. A two-category Gumbel-Softmax
//! turns them into a relaxed keep weight; the forward pass uses the hard
//! argmax and the backward pass the relaxed gradient (straight-through).
//!
//! Attributes: two MLPs map node features to a mean and a log standard
//! deviation of diagonal Gaussian noise, drawn as `mu + sigma * eps` with a
//! frozen standard-normal `eps`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, EdgePattern, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{Graph, NormalizedAdjacency};
use crate::params::ParamSet;

pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;
pub const DEFAULT_EDGE_HIDDEN: usize = 64;
pub const DEFAULT_ATTR_HIDDEN: usize = 64;

/// Edge generator: `[x_u, x_v] -> ReLU(. W1 + b1) W2 + b2 -> (keep, drop)`.
///
/// `W1` is stored as its two row blocks, `w1_u` acting on `x_u` and `w1_v` on
/// `x_v`, which is the same map as one `2 feat_dim x hidden` matrix applied to
/// the concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGenParams {
    pub w1_u: Tensor,
    pub w1_v: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct EdgeGenVars {
    pub w1_u: Var,
    pub w1_v: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ParamSet for EdgeGenParams {
    type Vars = EdgeGenVars;

    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1_u", &self.w1_u),
            ("w1_v", &self.w1_v),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1_u", &mut self.w1_u),
            ("w1_v", &mut self.w1_v),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    fn vars_from(v: &[Var]) -> EdgeGenVars {
        EdgeGenVars {
            w1_u: v[0],
            w1_v: v[1],
            b1: v[2],
            w2: v[3],
            b2: v[4],
        }
    }
}

impl EdgeGenParams {
    pub fn init(feat_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Glorot over the full concatenated input width.
        let w1 = Tensor::glorot_uniform(2 * feat_dim, hidden, &mut rng);
        Self {
            w1_u: Tensor::from_fn(feat_dim, hidden, |i, j| w1.get(i, j)),
            w1_v: Tensor::from_fn(feat_dim, hidden, |i, j| w1.get(i + feat_dim, j)),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::glorot_uniform(hidden, 2, &mut rng),
            b2: Tensor::zeros(1, 2),
        }
    }

    pub fn zeros(feat_dim: usize, hidden: usize) -> Self {
        Self {
            w1_u: Tensor::zeros(feat_dim, hidden),
            w1_v: Tensor::zeros(feat_dim, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, 2),
            b2: Tensor::zeros(1, 2),
        }
    }
}

/// Attribute generator: one two-layer MLP for the mean, one for `log sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttrGenParams {
    pub mu_w1: Tensor,
    pub mu_b1: Tensor,
    pub mu_w2: Tensor,
    pub mu_b2: Tensor,
    pub sigma_w1: Tensor,
    pub sigma_b1: Tensor,
    pub sigma_w2: Tensor,
    pub sigma_b2: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AttrGenVars {
    pub mu_w1: Var,
    pub mu_b1: Var,
    pub mu_w2: Var,
    pub mu_b2: Var,
    pub sigma_w1: Var,
    pub sigma_b1: Var,
    pub sigma_w2: Var,
    pub sigma_b2: Var,
}

impl ParamSet for AttrGenParams {
    type Vars = AttrGenVars;

    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("mu_w1", &self.mu_w1),
            ("mu_b1", &self.mu_b1),
            ("mu_w2", &self.mu_w2),
            ("mu_b2", &self.mu_b2),
            ("sigma_w1", &self.sigma_w1),
            ("sigma_b1", &self.sigma_b1),
            ("sigma_w2", &self.sigma_w2),
            ("sigma_b2", &self.sigma_b2),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("mu_w1", &mut self.mu_w1),
            ("mu_b1", &mut self.mu_b1),
            ("mu_w2", &mut self.mu_w2),
            ("mu_b2", &mut self.mu_b2),
            ("sigma_w1", &mut self.sigma_w1),
            ("sigma_b1", &mut self.sigma_b1),
            ("sigma_w2", &mut self.sigma_w2),
            ("sigma_b2", &mut self.sigma_b2),
        ]
    }

    fn vars_from(v: &[Var]) -> AttrGenVars {
        AttrGenVars {
            mu_w1: v[0],
            mu_b1: v[1],
            mu_w2: v[2],
            mu_b2: v[3],
            sigma_w1: v[4],
            sigma_b1: v[5],
            sigma_w2: v[6],
            sigma_b2: v[7],
        }
    }
}

impl AttrGenParams {
    pub fn init(feat_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            mu_w1: Tensor::glorot_uniform(feat_dim, hidden, &mut rng),
            mu_b1: Tensor::zeros(1, hidden),
            mu_w2: Tensor::glorot_uniform(hidden, feat_dim, &mut rng),
            mu_b2: Tensor::zeros(1, feat_dim),
            sigma_w1: Tensor::glorot_uniform(feat_dim, hidden, &mut rng),
            sigma_b1: Tensor::zeros(1, hidden),
            sigma_w2: Tensor::glorot_uniform(hidden, feat_dim, &mut rng),
            sigma_b2: Tensor::zeros(1, feat_dim),
        }
    }

    pub fn zeros(feat_dim: usize, hidden: usize) -> Self {
        let mut p = Self::init(feat_dim, hidden, 0);
        for (_, t) in p.named_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }
}

/// Frozen standard Gumbel draws, one pair per undirected edge.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelDraws {
    pub keep: Vec<f64>,
    pub drop: Vec<f64>,
}

impl GumbelDraws {
    pub fn sample<R: Rng + ?Sized>(num_edges: usize, rng: &mut R) -> Self {
        let g = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
        let mut keep = Vec::with_capacity(num_edges);
        let mut drop = Vec::with_capacity(num_edges);
        for _ in 0..num_edges {
            keep.push(g.sample(rng));
            drop.push(g.sample(rng));
        }
        Self { keep, drop }
    }

    /// `g_keep - g_drop` per edge, the only combination the two-category
    /// relaxation needs.
    pub fn difference(&self) -> Vec<f64> {
        self.keep
            .iter()
            .zip(&self.drop)
            .map(|(k, d)| k - d)
            .collect()
    }
}

/// Relaxed and hard keep decisions for fixed drop probabilities.
///
/// With logits `(log(1-p), log p)` the two-category Gumbel-Softmax keep weight
/// is `sigmoid((log(1-p) - log p + g_keep - g_drop) / t)`; the hard decision
/// keeps the edge iff the perturbed keep logit wins.
pub fn sample_edge_noise(
    drop_prob: &[f64],
    draws: &GumbelDraws,
    temperature: f64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "Gumbel temperature must be > 0, got {temperature}"
        )));
    }
    let mut soft = Vec::with_capacity(drop_prob.len());
    let mut hard = Vec::with_capacity(drop_prob.len());
    for (e, &p) in drop_prob.iter().enumerate() {
        let margin = (1.0 - p).ln() - p.ln() + draws.keep[e] - draws.drop[e];
        soft.push(sigmoid(margin / temperature));
        hard.push(margin > 0.0);
    }
    Ok((soft, hard))
}

/// Gradient path used for the keep weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRelaxation {
    /// Hard 0/1 forward, relaxed gradient backward.
    #[default]
    StraightThrough,
    /// Relaxed weights in the forward pass too (smooth; used for gradient checks).
    Relaxed,
}

/// Endpoint index arrays of the canonical undirected edges.
#[derive(Clone, Debug)]
pub struct EdgeEndpoints {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
}

impl EdgeEndpoints {
    pub fn of(graph: &Graph) -> Self {
        Self {
            src: graph.edges().iter().map(|e| e.0).collect(),
            dst: graph.edges().iter().map(|e| e.1).collect(),
        }
    }
}

/// Edge-generator output on a tape.
pub struct EdgeNoiseVars {
    /// `E x 1` drop probability.
    pub drop_prob: Var,
    /// `E x 1` relaxed keep weight.
    pub soft_keep: Var,
    /// `E x 1` weight fed to the noisy adjacency.
    pub keep: Var,
    pub hard_keep: Vec<bool>,
}

/// `E x 1` keep-minus-drop logit margin from the edge MLP.
fn edge_logit_margin(
    tape: &mut Tape,
    x: Var,
    ends: &EdgeEndpoints,
    p: &EdgeGenVars,
) -> Result<Var> {
    let hu = tape.matmul(x, p.w1_u)?;
    let hv = tape.matmul(x, p.w1_v)?;
    let hu = tape.row_gather(hu, Arc::clone(&ends.src))?;
    let hv = tape.row_gather(hv, Arc::clone(&ends.dst))?;
    let h = tape.add(hu, hv)?;
    let h = tape.add(h, p.b1)?;
    let h = tape.relu(h)?;
    let logits = tape.matmul(h, p.w2)?;
    let logits = tape.add(logits, p.b2)?;
    let contrast = tape.constant(Tensor::from_rows(&[vec![1.0], vec![-1.0]])?);
    tape.matmul(logits, contrast)
}

/// Per-edge drop probabilities `sigmoid(l_drop - l_keep)` on a tape.
pub fn edge_drop_probs_var(
    tape: &mut Tape,
    x: Var,
    ends: &EdgeEndpoints,
    p: &EdgeGenVars,
) -> Result<Var> {
    let margin = edge_logit_margin(tape, x, ends, p)?;
    let neg = tape.neg(margin)?;
    tape.sigmoid(neg)
}

/// Drop probability for every canonical undirected edge of `graph`.
pub fn edge_drop_probs(graph: &Graph, params: &EdgeGenParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = params.bind_constants(&mut tape);
    let x = tape.constant(graph.features().clone());
    let p = edge_drop_probs_var(&mut tape, x, &EdgeEndpoints::of(graph), &v)?;
    Ok(tape.value(p).data().to_vec())
}

/// Samples keep weights for every edge with frozen Gumbel draws.
pub fn edge_noise(
    tape: &mut Tape,
    x: Var,
    ends: &EdgeEndpoints,
    p: &EdgeGenVars,
    draws: &GumbelDraws,
    temperature: f64,
    relaxation: EdgeRelaxation,
) -> Result<EdgeNoiseVars> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "Gumbel temperature must be > 0, got {temperature}"
        )));
    }
    let margin = edge_logit_margin(tape, x, ends, p)?;
    let neg = tape.neg(margin)?;
    let drop_prob = tape.sigmoid(neg)?;
    let rows = tape.value(margin).rows();
    let noise = tape.constant(Tensor::new(rows, 1, draws.difference())?);
    let perturbed = tape.add(margin, noise)?;
    let hard_keep: Vec<bool> = tape
        .value(perturbed)
        .data()
        .iter()
        .map(|&m| m > 0.0)
        .collect();
    let scaled = tape.scale(perturbed, 1.0 / temperature)?;
    let soft_keep = tape.sigmoid(scaled)?;
    let keep = match relaxation {
        EdgeRelaxation::StraightThrough => {
            let hard = Tensor::new(rows, 1, hard_keep.iter().map(|&k| k as u8 as f64).collect())?;
            tape.straight_through(hard, soft_keep)?
        }
        EdgeRelaxation::Relaxed => soft_keep,
    };
    Ok(EdgeNoiseVars {
        drop_prob,
        soft_keep,
        keep,
        hard_keep,
    })
}

/// Attribute-generator output on a tape.
pub struct AttrNoiseVars {
    pub mu: Var,
    pub sigma: Var,
    pub noise: Var,
    pub eps_hat: Tensor,
}

fn mlp2(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, w2)?;
    tape.add(o, b2)
}

/// `mu + sigma * eps_hat` with `sigma = exp(clamp(log sigma, -6, 2))`.
pub fn attr_noise(
    tape: &mut Tape,
    x: Var,
    p: &AttrGenVars,
    eps_hat: Tensor,
) -> Result<AttrNoiseVars> {
    let mu = mlp2(tape, x, p.mu_w1, p.mu_b1, p.mu_w2, p.mu_b2)?;
    let log_sigma = mlp2(tape, x, p.sigma_w1, p.sigma_b1, p.sigma_w2, p.sigma_b2)?;
    let log_sigma = tape.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
    let sigma = tape.exp(log_sigma)?;
    let eps = tape.constant(eps_hat.clone());
    let scaled = tape.mul(sigma, eps)?;
    let noise = tape.add(mu, scaled)?;
    Ok(AttrNoiseVars {
        mu,
        sigma,
        noise,
        eps_hat,
    })
}

/// Plain-value attribute noise for `x` with `eps_hat` drawn from `seed`.
pub fn sample_attr_noise(x: &Tensor, params: &AttrGenParams, seed: u64) -> Result<AttrNoiseSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps_hat = Tensor::standard_normal(x.rows(), x.cols(), &mut rng);
    let mut tape = Tape::new();
    let v = params.bind_constants(&mut tape);
    let xv = tape.constant(x.clone());
    let a = attr_noise(&mut tape, xv, &v, eps_hat)?;
    Ok(AttrNoiseSample {
        mu: tape.value(a.mu).clone(),
        sigma: tape.value(a.sigma).clone(),
        noise: tape.value(a.noise).clone(),
        eps_hat: a.eps_hat,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeNoiseSample {
    pub drop_prob: Vec<f64>,
    pub keep_relaxed: Vec<f64>,
    pub keep_hard: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttrNoiseSample {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub eps_hat: Tensor,
    /// Exactly `mu + sigma * eps_hat`, elementwise in that order.
    pub noise: Tensor,
}

/// One realisation of both noise components. A missing part means that
/// component leaves the view untouched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseSample {
    pub edge: Option<EdgeNoiseSample>,
    pub attr: Option<AttrNoiseSample>,
}

impl NoiseSample {
    /// Fixed, parameter-free realisation: hard keep mask plus additive noise.
    pub fn fixed(keep: Vec<bool>, attr_noise: Option<Tensor>) -> Self {
        let edge = EdgeNoiseSample {
            drop_prob: keep.iter().map(|&k| if k { 0.0 } else { 1.0 }).collect(),
            keep_relaxed: keep.iter().map(|&k| k as u8 as f64).collect(),
            keep_hard: keep,
        };
        let attr = attr_noise.map(|noise| {
            let (r, c) = noise.shape();
            AttrNoiseSample {
                mu: noise.clone(),
                sigma: Tensor::zeros(r, c),
                eps_hat: Tensor::zeros(r, c),
                noise,
            }
        });
        Self {
            edge: Some(edge),
            attr,
        }
    }
}

/// Builds the noisy view `(A_eps, X_eps)` from a realised sample.
///
/// Surviving edges keep weight 1 in both directions, dropped edges weight 0;
/// self-loops always stay.
pub fn apply_noise(graph: &Graph, sample: &NoiseSample) -> Result<(NormalizedAdjacency, Tensor)> {
    let pattern = graph.edge_pattern();
    let weights: Vec<f64> = match &sample.edge {
        Some(e) => {
            if e.keep_hard.len() != graph.num_edges() {
                return Err(Error::InvalidGraph(format!(
                    "noise sample has {} edges, graph has {}",
                    e.keep_hard.len(),
                    graph.num_edges()
                )));
            }
            e.keep_hard.iter().map(|&k| k as u8 as f64).collect()
        }
        None => vec![1.0; graph.num_edges()],
    };
    if graph.num_edges() > 0 && weights.iter().all(|&w| w == 0.0) {
        log::warn!("noise sample dropped every edge; view keeps self-loops only");
    }
    let (values, _) = pattern.normalized_values(&weights);
    let adj = NormalizedAdjacency::from_matrix(pattern.with_values(values));
    let x = match &sample.attr {
        Some(a) => {
            let x = graph.features();
            if a.noise.shape() != x.shape() {
                return Err(Error::ShapeMismatch {
                    op: "apply_noise",
                    left: x.shape(),
                    right: a.noise.shape(),
                });
            }
            Tensor::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + a.noise.get(i, j))
        }
        None => graph.features().clone(),
    };
    Ok((adj, x))
}

/// Shared pattern for noisy views of one graph.
pub fn shared_pattern(graph: &Graph) -> Arc<EdgePattern> {
    Arc::new(graph.edge_pattern())
}

/// `u  v  drop_prob  kept` per undirected edge.
pub fn write_edge_noise_tsv(
    path: impl AsRef<Path>,
    graph: &Graph,
    sample: &EdgeNoiseSample,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("u\tv\tdrop_prob\tkept\n");
    for (e, &(u, v)) in graph.edges().iter().enumerate() {
        let _ = writeln!(
            out,
            "{u}\t{v}\t{}\t{}",
            sample.drop_prob[e], sample.keep_hard[e] as u8
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Undirected DOT graph with dropped edges dashed and pen width by keep probability.
pub fn write_edge_noise_dot(
    path: impl AsRef<Path>,
    graph: &Graph,
    sample: &EdgeNoiseSample,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("graph noise {\n  node [shape=point];\n");
    for (e, &(u, v)) in graph.edges().iter().enumerate() {
        let style = if sample.keep_hard[e] {
            "solid"
        } else {
            "dashed"
        };
        let width = 0.5 + 2.5 * (1.0 - sample.drop_prob[e]);
        let _ = writeln!(
            out,
            "  {u} -- {v} [style={style}, penwidth={width:.3}, label=\"{:.3}\"];",
            sample.drop_prob[e]
        );
    }
    out.push_str("}\n");
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
