//! Two-layer GCN encoder with PReLU activations and an MLP projection head.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CsrMatrix, EdgePattern, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::params::{load_checkpoint, save_checkpoint, ParamSet};

pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub feat_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub proj: usize,
}

impl EncoderDims {
    /// 512 hidden, 256 embedding, 256 projection.
    pub fn standard(feat_dim: usize) -> Self {
        Self {
            feat_dim,
            hidden: 512,
            embed: 256,
            proj: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub w1: Tensor,
    pub prelu1: Tensor,
    pub w2: Tensor,
    pub prelu2: Tensor,
    pub wp1: Tensor,
    pub bp1: Tensor,
    pub wp2: Tensor,
    pub bp2: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w1: Var,
    pub prelu1: Var,
    pub w2: Var,
    pub prelu2: Var,
    pub wp1: Var,
    pub bp1: Var,
    pub wp2: Var,
    pub bp2: Var,
}

impl ParamSet for EncoderParams {
    type Vars = EncoderVars;

    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("prelu1", &self.prelu1),
            ("w2", &self.w2),
            ("prelu2", &self.prelu2),
            ("wp1", &self.wp1),
            ("bp1", &self.bp1),
            ("wp2", &self.wp2),
            ("bp2", &self.bp2),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1", &mut self.w1),
            ("prelu1", &mut self.prelu1),
            ("w2", &mut self.w2),
            ("prelu2", &mut self.prelu2),
            ("wp1", &mut self.wp1),
            ("bp1", &mut self.bp1),
            ("wp2", &mut self.wp2),
            ("bp2", &mut self.bp2),
        ]
    }

    fn vars_from(v: &[Var]) -> EncoderVars {
        EncoderVars {
            w1: v[0],
            prelu1: v[1],
            w2: v[2],
            prelu2: v[3],
            wp1: v[4],
            bp1: v[5],
            wp2: v[6],
            bp2: v[7],
        }
    }
}

impl EncoderParams {
    /// Glorot-uniform weights, PReLU slopes 0.25, zero biases.
    pub fn init(dims: EncoderDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dims,
            w1: Tensor::glorot_uniform(dims.feat_dim, dims.hidden, &mut rng),
            prelu1: Tensor::full(1, dims.hidden, PRELU_INIT),
            w2: Tensor::glorot_uniform(dims.hidden, dims.embed, &mut rng),
            prelu2: Tensor::full(1, dims.embed, PRELU_INIT),
            wp1: Tensor::glorot_uniform(dims.embed, dims.proj, &mut rng),
            bp1: Tensor::zeros(1, dims.proj),
            wp2: Tensor::glorot_uniform(dims.proj, dims.proj, &mut rng),
            bp2: Tensor::zeros(1, dims.proj),
        }
    }

    pub fn zeros(dims: EncoderDims) -> Self {
        let mut p = Self::init(dims, 0);
        for (_, t) in p.named_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }

    pub fn save(&self, stem: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let meta = serde_json::json!({ "kind": "encoder", "dims": self.dims });
        save_checkpoint(stem, &self.to_named_tensors(), meta)
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let (manifest, tensors) = load_checkpoint(stem)?;
        let dims: EncoderDims = serde_json::from_value(manifest.metadata["dims"].clone())
            .map_err(|e| Error::Checkpoint(format!("missing encoder dims: {e}")))?;
        let mut params = Self::zeros(dims);
        let names: Vec<&str> = params.named().iter().map(|(n, _)| *n).collect();
        let got: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
        if names != got {
            return Err(Error::Checkpoint(format!(
                "tensor names {got:?}, expected {names:?}"
            )));
        }
        let values: Vec<Tensor> = tensors.into_iter().map(|(_, t)| t).collect();
        params.assign(&values)?;
        Ok(params)
    }
}

/// The propagation matrix for one view.
#[derive(Clone, Copy)]
pub enum Propagation<'a> {
    /// Fixed normalised adjacency.
    Fixed(&'a Arc<CsrMatrix>),
    /// Values on the tape over a fixed pattern (noisy views).
    Learned {
        pattern: &'a Arc<EdgePattern>,
        values: Var,
    },
}

impl<'a> Propagation<'a> {
    pub fn fixed(adj: &'a NormalizedAdjacency) -> Self {
        Propagation::Fixed(adj.matrix())
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match *self {
            Propagation::Fixed(m) => tape.spmm(m, x),
            Propagation::Learned { pattern, values } => tape.spmm_values(pattern, values, x),
        }
    }
}

/// `Z = PReLU2(A * PReLU1(A * X * W1) * W2)`.
pub fn encode(tape: &mut Tape, adj: Propagation<'_>, x: Var, p: &EncoderVars) -> Result<Var> {
    let xw = tape.matmul(x, p.w1)?;
    let h = adj.apply(tape, xw)?;
    let h = tape.prelu(h, p.prelu1)?;
    let hw = tape.matmul(h, p.w2)?;
    let z = adj.apply(tape, hw)?;
    tape.prelu(z, p.prelu2)
}

/// `P = ReLU(Z * Wp1 + bp1) * Wp2 + bp2`.
pub fn project(tape: &mut Tape, z: Var, p: &EncoderVars) -> Result<Var> {
    let h = tape.matmul(z, p.wp1)?;
    let h = tape.add(h, p.bp1)?;
    let h = tape.relu(h)?;
    let out = tape.matmul(h, p.wp2)?;
    tape.add(out, p.bp2)
}

/// Embeddings for evaluation, computed off any training tape.
pub fn embed(
    params: &EncoderParams,
    adj: &NormalizedAdjacency,
    features: &Tensor,
) -> Result<Tensor> {
    if features.cols() != params.dims.feat_dim {
        return Err(Error::ShapeMismatch {
            op: "embed",
            left: (features.rows(), params.dims.feat_dim),
            right: features.shape(),
        });
    }
    let mut tape = Tape::new();
    let vars = params.bind_constants(&mut tape);
    let x = tape.constant(features.clone());
    let z = encode(&mut tape, Propagation::fixed(adj), x, &vars)?;
    Ok(tape.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn small_dims() -> EncoderDims {
        EncoderDims {
            feat_dim: 3,
            hidden: 5,
            embed: 4,
            proj: 4,
        }
    }

    fn prelu_dense(x: &Tensor, slope: &Tensor) -> Tensor {
        Tensor::from_fn(x.rows(), x.cols(), |i, j| {
            let v = x.get(i, j);
            if v > 0.0 {
                v
            } else {
                slope.get(0, j) * v
            }
        })
    }

    fn dense_encode(p: &EncoderParams, a: &Tensor, x: &Tensor) -> Tensor {
        let h = a.matmul(&x.matmul(&p.w1).unwrap()).unwrap();
        let h = prelu_dense(&h, &p.prelu1);
        let z = a.matmul(&h.matmul(&p.w2).unwrap()).unwrap();
        prelu_dense(&z, &p.prelu2)
    }

    fn random_graph(n: usize, seed: u64) -> Graph {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random_bool(0.4) {
                    edges.push((u, v));
                }
            }
        }
        let x = Tensor::standard_normal(n, 3, &mut rng);
        Graph::new(n, edges, x, None).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let g = random_graph(5, 1);
        let p = EncoderParams::zeros(small_dims());
        let z = embed(&p, &g.normalize(), g.features()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weights_pass_positive_inputs() {
        let dims = EncoderDims {
            feat_dim: 2,
            hidden: 3,
            embed: 2,
            proj: 2,
        };
        let mut p = EncoderParams::zeros(dims);
        p.w1 = Tensor::from_fn(2, 3, |i, j| (i == j) as u8 as f64);
        p.w2 = Tensor::from_fn(3, 2, |i, j| (i == j) as u8 as f64);
        let g = Graph::new(1, [], Tensor::from_rows(&[vec![0.7, 1.3]]).unwrap(), None).unwrap();
        let z = embed(&p, &g.normalize(), g.features()).unwrap();
        assert_eq!(z.data(), &[0.7, 1.3]);
    }

    #[test]
    fn matches_dense_reference() {
        let g = random_graph(6, 7);
        let p = EncoderParams::init(small_dims(), 3);
        let adj = g.normalize();
        let z = embed(&p, &adj, g.features()).unwrap();
        let want = dense_encode(&p, &adj.to_dense(), g.features());
        assert!(z.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn block_diagonal_graph_encodes_componentwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::standard_normal(5, 3, &mut rng);
        let g = Graph::new(5, [(0, 1), (1, 2), (3, 4)], x.clone(), None).unwrap();
        let p = EncoderParams::init(small_dims(), 9);
        let whole = embed(&p, &g.normalize(), g.features()).unwrap();

        let xa = Tensor::from_fn(3, 3, |i, j| x.get(i, j));
        let xb = Tensor::from_fn(2, 3, |i, j| x.get(i + 3, j));
        let ga = Graph::new(3, [(0, 1), (1, 2)], xa, None).unwrap();
        let gb = Graph::new(2, [(0, 1)], xb, None).unwrap();
        let za = embed(&p, &ga.normalize(), ga.features()).unwrap();
        let zb = embed(&p, &gb.normalize(), gb.features()).unwrap();
        let mut joined = za.data().to_vec();
        joined.extend_from_slice(zb.data());
        let joined = Tensor::new(5, 4, joined).unwrap();
        assert!(whole.max_abs_diff(&joined) < 1e-12);
    }

    #[test]
    fn projection_zero_weights_broadcast_bias() {
        let mut p = EncoderParams::zeros(small_dims());
        p.bp2 = Tensor::from_rows(&[vec![1.0, -2.0, 0.5, 3.0]]).unwrap();
        let mut tape = Tape::new();
        let v = p.bind_constants(&mut tape);
        let z = tape.constant(Tensor::ones(3, 4));
        let out = project(&mut tape, z, &v).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(out).row(i), p.bp2.row(0));
        }
    }

    #[test]
    fn projection_of_single_node_shape() {
        let p = EncoderParams::init(small_dims(), 1);
        let mut tape = Tape::new();
        let v = p.bind_constants(&mut tape);
        let z = tape.constant(Tensor::ones(1, 4));
        let out = project(&mut tape, z, &v).unwrap();
        assert_eq!(tape.value(out).shape(), (1, 4));
    }

    #[test]
    fn orthogonal_projection_matches_dense_and_is_norm_bounded() {
        // rotations by fixed angles are orthogonal
        let rot = |t: f64| {
            let (s, c) = t.sin_cos();
            Tensor::from_rows(&[vec![c, -s], vec![s, c]]).unwrap()
        };
        let dims = EncoderDims {
            feat_dim: 2,
            hidden: 2,
            embed: 2,
            proj: 2,
        };
        let mut p = EncoderParams::zeros(dims);
        p.wp1 = rot(0.3);
        p.wp2 = rot(-1.1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zt = Tensor::standard_normal(6, 2, &mut rng);
        let mut tape = Tape::new();
        let v = p.bind_constants(&mut tape);
        let z = tape.constant(zt.clone());
        let out = project(&mut tape, z, &v).unwrap();
        let got = tape.value(out);
        let want = zt
            .matmul(&p.wp1)
            .unwrap()
            .map(|x| x.max(0.0))
            .matmul(&p.wp2)
            .unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
        for i in 0..6 {
            let n = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n(got.row(i)) <= n(zt.row(i)) + 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_and_glorot_bounded() {
        let dims = EncoderDims::standard(100);
        let a = EncoderParams::init(dims, 42);
        let b = EncoderParams::init(dims, 42);
        assert_eq!(a, b);
        let bound = (6.0 / (100.0 + 512.0f64)).sqrt();
        assert!(a.w1.data().iter().all(|v| v.abs() <= bound));
        assert!(a.prelu1.data().iter().all(|&v| v == PRELU_INIT));
        assert!(a.bp1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_mean_within_four_sigma() {
        let dims = EncoderDims {
            feat_dim: 200,
            hidden: 500,
            embed: 2,
            proj: 2,
        };
        let p = EncoderParams::init(dims, 8);
        let n = p.w1.len() as f64;
        assert!(n >= 1e5);
        let bound = (6.0 / 700.0f64).sqrt();
        // uniform(-b, b) has variance b^2 / 3
        let sd_mean = (bound * bound / 3.0 / n).sqrt();
        let mean = p.w1.sum() / n;
        assert!(mean.abs() < 4.0 * sd_mean, "{mean} vs {sd_mean}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = EncoderParams::init(small_dims(), 4);
        p.save(dir.path().join("enc")).unwrap();
        let back = EncoderParams::load(dir.path().join("enc")).unwrap();
        assert_eq!(p, back);
    }
}
