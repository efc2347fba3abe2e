use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{Graph, SplitMasks};

/// Stochastic block model with Gaussian node features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmParams {
    pub n_per_block: usize,
    pub num_blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    /// Mean offset added along the block's own feature axis.
    pub feat_shift: f64,
    pub seed: u64,
}

impl SbmParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.p_in)
            && (0.0..=1.0).contains(&self.p_out)
            && self.p_out < self.p_in;
        if !ok {
            return Err(Error::Config(format!(
                "SBM needs 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        if self.feat_dim == 0 || self.num_blocks == 0 || self.n_per_block == 0 {
            return Err(Error::Config("SBM sizes must be positive".into()));
        }
        if !self.feat_shift.is_finite() {
            return Err(Error::Config("feat_shift must be finite".into()));
        }
        Ok(())
    }
}

/// Samples an SBM graph and a 10 / 10 / 80 split.
///
/// Nodes are numbered block by block; node `i` belongs to block
/// `i / n_per_block` and that is its label. Block `b` shifts feature axis
/// `b % feat_dim` by `feat_shift`.
pub fn generate_sbm(params: &SbmParams) -> Result<(Graph, SplitMasks)> {
    params.validate()?;
    let n = params.n_per_block * params.num_blocks;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let block = |i: usize| i / params.n_per_block;

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block(u) == block(v) {
                params.p_in
            } else {
                params.p_out
            };
            // random_bool panics outside [0, 1]; p is validated above
            if p > 0.0 && rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    if edges.is_empty() {
        return Err(Error::DegenerateSbm);
    }

    let mut features = Tensor::standard_normal(n, params.feat_dim, &mut rng);
    for i in 0..n {
        let axis = block(i) % params.feat_dim;
        let v = features.get(i, axis) + params.feat_shift;
        features.set(i, axis, v);
    }
    let labels = (0..n).map(block).collect();
    let mut graph = Graph::new(n, edges, features, Some(labels))?;
    graph.set_num_classes(params.num_blocks);
    let splits = SplitMasks::random(n, rng.random())?;
    Ok((graph, splits))
}
