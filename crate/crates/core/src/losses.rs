//! Contrastive objectives and the entropy diagnostics derived from them.
//!
//! All similarities are cosine similarities scaled by `1 / tau`. For an anchor
//! `u` in the first view,
//!
//! ```text
//! pos(u) = exp(cos(z_u, z'_u) / tau)
//! neg(u) = sum_{v != u} exp(cos(z_u, z'_v) / tau) [+ exp(cos(z_u, z_v) / tau)]
//! kappa(u) = pos / (pos + neg),   loss(u) = -ln kappa(u)
//! ```
//!
//! The bracketed intra-view term is present in [`NegativesMode::IntraAndInter`].
//!
//! The auxiliary task variable is Gaussian with variance `exp(loss) = 1/kappa`,
//! so both the task entropy and the conditional-entropy estimate have closed
//! forms in the per-node losses.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `ln C` with `C = 1 / sqrt(2 pi)`; a fixed constant, never trained.
pub const LOG_C: f64 = -0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativesMode {
    InterViewOnly,
    #[default]
    IntraAndInter,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub negatives: NegativesMode,
    /// Average the loss over both anchor directions.
    pub symmetrize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            negatives: NegativesMode::IntraAndInter,
            symmetrize: false,
        }
    }
}

impl LossConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::NonPositive {
                op: "loss temperature",
                value: self.tau,
            });
        }
        Ok(())
    }
}

/// Per-node contrastive terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaValue {
    pub kappa: f64,
    pub pos: f64,
    pub neg: f64,
}

impl KappaValue {
    pub fn loss(&self) -> f64 {
        -self.kappa.ln()
    }
}

pub fn kappa(pos: f64, neg: f64) -> Result<KappaValue> {
    for (v, op) in [(pos, "kappa: positive term"), (neg, "kappa: negative term")] {
        // negated so NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(v > 0.0) {
            return Err(Error::NonPositive { op, value: v });
        }
    }
    Ok(KappaValue {
        kappa: pos / (pos + neg),
        pos,
        neg,
    })
}

/// Handles for the per-node quantities of one anchor direction.
#[derive(Clone, Copy, Debug)]
pub struct ContrastVars {
    /// `n x 1` positive term.
    pub pos: Var,
    /// `n x 1` negative term.
    pub neg: Var,
    /// `n x 1` per-node loss `-ln kappa`.
    pub per_node: Var,
}

fn scaled_exp_cos(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<(Var, Var)> {
    let s = tape.matmul_nt(a, b)?;
    let s = tape.scale(s, 1.0 / tau)?;
    let e = tape.exp(s)?;
    Ok((s, e))
}

/// Anchors are rows of `h1`, positives the matching rows of `h2`.
pub fn contrast_terms_var(
    tape: &mut Tape,
    h1: Var,
    h2: Var,
    cfg: &LossConfig,
) -> Result<ContrastVars> {
    cfg.validate()?;
    let (r1, r2) = (tape.value(h1).shape(), tape.value(h2).shape());
    if r1 != r2 {
        return Err(Error::ShapeMismatch {
            op: "contrastive loss",
            left: r1,
            right: r2,
        });
    }
    let n = r1.0;
    let u1 = tape.row_l2_normalize(h1)?;
    let u2 = tape.row_l2_normalize(h2)?;
    let off_diag = tape.constant(Tensor::from_fn(n, n, |i, j| (i != j) as u8 as f64));

    let (s12, e12) = scaled_exp_cos(tape, u1, u2, cfg.tau)?;
    let pos = tape.diag(e12)?;
    let inter = tape.mul(e12, off_diag)?;
    let mut neg = tape.row_sum(inter)?;
    if cfg.negatives == NegativesMode::IntraAndInter {
        let (_, e11) = scaled_exp_cos(tape, u1, u1, cfg.tau)?;
        let intra = tape.mul(e11, off_diag)?;
        let intra = tape.row_sum(intra)?;
        neg = tape.add(neg, intra)?;
    }
    // -ln(pos / (pos + neg)) = ln(pos + neg) - cos(z_u, z'_u) / tau
    let total = tape.add(pos, neg)?;
    let log_total = tape.log(total)?;
    let log_pos = tape.diag(s12)?;
    let per_node = tape.sub(log_total, log_pos)?;
    Ok(ContrastVars { pos, neg, per_node })
}

/// Scalar InfoNCE on a tape.
pub fn infonce_var(
    tape: &mut Tape,
    h1: Var,
    h2: Var,
    cfg: &LossConfig,
) -> Result<(Var, ContrastVars)> {
    let terms = contrast_terms_var(tape, h1, h2, cfg)?;
    let mut loss = tape.mean(terms.per_node)?;
    if cfg.symmetrize {
        let back = contrast_terms_var(tape, h2, h1, cfg)?;
        let back = tape.mean(back.per_node)?;
        let both = tape.add(loss, back)?;
        loss = tape.scale(both, 0.5)?;
    }
    Ok((loss, terms))
}

/// The noise-augmented objective for one noise draw: InfoNCE between the
/// clean view and the noisy view, with the clean view as anchor.
pub fn pingda_loss_var(
    tape: &mut Tape,
    h: Var,
    h_noisy: Var,
    cfg: &LossConfig,
) -> Result<(Var, ContrastVars)> {
    infonce_var(tape, h, h_noisy, cfg)
}

/// Per-node terms for plain embeddings.
pub fn contrast_terms(z: &Tensor, z_aug: &Tensor, cfg: &LossConfig) -> Result<Vec<KappaValue>> {
    let mut tape = Tape::new();
    let a = tape.constant(z.clone());
    let b = tape.constant(z_aug.clone());
    let t = contrast_terms_var(&mut tape, a, b, cfg)?;
    let (pos, neg) = (tape.value(t.pos), tape.value(t.neg));
    pos.data()
        .iter()
        .zip(neg.data())
        .map(|(&p, &q)| kappa(p, q))
        .collect()
}

/// `(pos(u), neg(u))` for a single anchor.
pub fn pos_neg_terms(z: &Tensor, z_aug: &Tensor, u: usize, cfg: &LossConfig) -> Result<(f64, f64)> {
    if u >= z.rows() {
        return Err(Error::ShapeMismatch {
            op: "pos_neg_terms",
            left: z.shape(),
            right: (u, z.cols()),
        });
    }
    let k = contrast_terms(z, z_aug, cfg)?[u];
    Ok((k.pos, k.neg))
}

/// Per-node `-ln kappa` for plain embeddings.
pub fn per_node_losses(z: &Tensor, z_aug: &Tensor, cfg: &LossConfig) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let a = tape.constant(z.clone());
    let b = tape.constant(z_aug.clone());
    let t = contrast_terms_var(&mut tape, a, b, cfg)?;
    Ok(tape.value(t.per_node).data().to_vec())
}

pub fn infonce_loss(z: &Tensor, z_aug: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(z.clone());
    let b = tape.constant(z_aug.clone());
    let (loss, _) = infonce_var(&mut tape, a, b, cfg)?;
    Ok(tape.value(loss).to_scalar())
}

pub fn pingda_loss(z: &Tensor, z_noisy: &Tensor, cfg: &LossConfig) -> Result<f64> {
    infonce_loss(z, z_noisy, cfg)
}

/// Differential entropy of `N(0, variance)`: `0.5 ln(2 pi e variance)`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn gaussian_entropy(variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::NonPositive {
            op: "gaussian_entropy",
            value: variance,
        });
    }
    Ok(0.5 * (2.0 * PI * E * variance).ln())
}

/// Mean over nodes of the entropy of `N(0, exp(loss(u)))`.
pub fn task_entropy(per_node_losses: &[f64]) -> f64 {
    if per_node_losses.is_empty() {
        return f64::NAN;
    }
    // 0.5 ln(2 pi e exp(l)) written without the exp so large losses stay finite
    let base = 0.5 * (2.0 * PI * E).ln();
    per_node_losses.iter().map(|l| base + 0.5 * l).sum::<f64>() / per_node_losses.len() as f64
}

/// Per-node closed form `ln C + 0.5 ln kappa - 0.5`, i.e. `int p ln p` for
/// `p = N(0, 1/kappa)`.
pub fn neg_conditional_entropy_term(kappa: f64) -> f64 {
    LOG_C + 0.5 * kappa.ln() - 0.5
}

/// Node average of [`neg_conditional_entropy_term`] from per-node losses.
pub fn neg_conditional_entropy_from_losses(per_node_losses: &[f64]) -> f64 {
    if per_node_losses.is_empty() {
        return f64::NAN;
    }
    let sum: f64 = per_node_losses.iter().map(|l| LOG_C - 0.5 * l - 0.5).sum();
    sum / per_node_losses.len() as f64
}

pub fn neg_conditional_entropy_estimate(
    z: &Tensor,
    z_noisy: &Tensor,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(neg_conditional_entropy_from_losses(&per_node_losses(
        z, z_noisy, cfg,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    /// Straight loops over the definition.
    fn oracle(z: &Tensor, za: &Tensor, tau: f64, intra: bool) -> Vec<(f64, f64)> {
        (0..z.rows())
            .map(|u| {
                let pos = (cos(z.row(u), za.row(u)) / tau).exp();
                let mut neg = 0.0;
                for v in (0..z.rows()).filter(|&v| v != u) {
                    neg += (cos(z.row(u), za.row(v)) / tau).exp();
                    if intra {
                        neg += (cos(z.row(u), z.row(v)) / tau).exp();
                    }
                }
                (pos, neg)
            })
            .collect()
    }

    fn random(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::standard_normal(n, d, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn symmetric_pair_gives_log3() {
        let z = Tensor::ones(2, 3);
        let cfg = LossConfig::with_tau(1.0);
        let (pos, neg) = pos_neg_terms(&z, &z, 0, &cfg).unwrap();
        assert!((pos - E).abs() < 1e-15);
        assert!((neg - 2.0 * E).abs() < 1e-14);
        assert!((infonce_loss(&z, &z, &cfg).unwrap() - 3f64.ln()).abs() < 1e-15);
        let k = contrast_terms(&z, &z, &cfg).unwrap();
        assert!((k[0].kappa - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_positive_is_one() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let za = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (pos, _) = pos_neg_terms(&z, &za, 0, &LossConfig::with_tau(1.0)).unwrap();
        assert_eq!(pos, 1.0);
    }

    #[test]
    fn matches_scalar_loops() {
        for (mode, intra) in [
            (NegativesMode::IntraAndInter, true),
            (NegativesMode::InterViewOnly, false),
        ] {
            let (z, za) = (random(5, 4, 1), random(5, 4, 2));
            let cfg = LossConfig {
                tau: 0.3,
                negatives: mode,
                symmetrize: false,
            };
            let want = oracle(&z, &za, 0.3, intra);
            let got = contrast_terms(&z, &za, &cfg).unwrap();
            let mut mean = 0.0;
            for (k, &(p, q)) in got.iter().zip(&want) {
                assert!((k.pos - p).abs() <= 1e-12 * p);
                assert!((k.neg - q).abs() <= 1e-12 * q);
                mean += -(p / (p + q)).ln() / 5.0;
            }
            assert!((infonce_loss(&z, &za, &cfg).unwrap() - mean).abs() < 1e-12);
            assert!((pingda_loss(&z, &za, &cfg).unwrap() - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_mean_of_neg_log_kappa() {
        let (z, za) = (random(7, 3, 3), random(7, 3, 4));
        let cfg = LossConfig::default();
        let ks = contrast_terms(&z, &za, &cfg).unwrap();
        let mean = ks.iter().map(|k| -k.kappa.ln()).sum::<f64>() / 7.0;
        assert!((pingda_loss(&z, &za, &cfg).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn row_scaling_is_invisible() {
        let (z, za) = (random(6, 3, 5), random(6, 3, 6));
        let cfg = LossConfig::default();
        let scaled = Tensor::from_fn(6, 3, |i, j| z.get(i, j) * (0.1 + i as f64 * 3.0));
        let a = infonce_loss(&z, &za, &cfg).unwrap();
        let b = infonce_loss(&scaled, &za, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn sharper_temperature_lowers_loss_when_positive_dominates() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.1]]).unwrap();
        let za = Tensor::from_rows(&[vec![1.0, 0.05], vec![0.05, 1.0], vec![-1.0, 0.15]]).unwrap();
        let cfg = |tau| LossConfig {
            tau,
            negatives: NegativesMode::InterViewOnly,
            symmetrize: false,
        };
        let l: Vec<f64> = [1.0, 0.5, 0.3]
            .iter()
            .map(|&t| per_node_losses(&z, &za, &cfg(t)).unwrap()[0])
            .collect();
        assert!(l[0] > l[1] && l[1] > l[2], "{l:?}");
    }

    #[test]
    fn bigger_positive_lowers_loss() {
        let a = kappa(1.0, 4.0).unwrap();
        let b = kappa(2.0, 4.0).unwrap();
        assert!(b.loss() < a.loss());
    }

    #[test]
    fn kappa_cases() {
        assert_eq!(kappa(2.0, 2.0).unwrap().kappa, 0.5);
        let near = kappa(1.0, 1e-300).unwrap();
        assert!(near.kappa == 1.0 && near.loss() == 0.0);
        assert!(kappa(0.0, 1.0).is_err());
        assert!(kappa(1.0, -1.0).is_err());
    }

    #[test]
    fn zero_row_is_degenerate() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let err = infonce_loss(&z, &z, &LossConfig::default()).unwrap_err();
        assert!(err.to_string().contains("degenerate embedding"), "{err}");
    }

    #[test]
    fn symmetrized_loss_averages_both_directions() {
        let (z, za) = (random(4, 3, 8), random(4, 3, 9));
        let mut cfg = LossConfig::default();
        let forward = infonce_loss(&z, &za, &cfg).unwrap();
        let backward = infonce_loss(&za, &z, &cfg).unwrap();
        cfg.symmetrize = true;
        assert!((infonce_loss(&z, &za, &cfg).unwrap() - 0.5 * (forward + backward)).abs() < 1e-14);
    }

    #[test]
    fn entropy_closed_forms() {
        let h1 = gaussian_entropy(1.0).unwrap();
        assert!((h1 - 1.418_938_533_204_672_7).abs() < 1e-15);
        assert!((h1 - gaussian_entropy((-2.0f64).exp()).unwrap() - 1.0).abs() < 1e-14);
        assert!(gaussian_entropy(0.0).is_err());
        assert!((task_entropy(&[0.0, 0.0]) - h1).abs() < 1e-15);
        let l3 = 3f64.ln();
        assert!((task_entropy(&[l3; 4]) - 0.5 * (6.0 * PI * E).ln()).abs() < 1e-14);
        let mixed = [0.1, 2.0, 0.7];
        let direct: f64 = mixed
            .iter()
            .map(|l: &f64| gaussian_entropy(l.exp()).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((task_entropy(&mixed) - direct).abs() < 1e-14);
    }

    #[test]
    fn conditional_entropy_cases() {
        let top = -0.5 * (2.0 * PI).ln() - 0.5;
        assert!((neg_conditional_entropy_from_losses(&[0.0; 3]) - top).abs() < 1e-15);
        let third = neg_conditional_entropy_from_losses(&[3f64.ln(); 2]);
        assert!((third - (top - 0.5 * 3f64.ln())).abs() < 1e-15);
        for k in [0.01, 0.2, 1.0 / 3.0, 0.9, 1.0] {
            let t = neg_conditional_entropy_term(k);
            assert!((t + gaussian_entropy(1.0 / k).unwrap()).abs() < 1e-12);
        }
    }

    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn rec(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            d: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if d == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, d - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, d - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        rec(
            f,
            a,
            b,
            fa,
            fm,
            fb,
            (b - a) / 6.0 * (fa + 4.0 * fm + fb),
            tol,
            depth,
        )
    }

    #[test]
    fn closed_form_matches_quadrature() {
        for var in [0.5, 1.0, 3.0, 10.0] {
            let s = f64::sqrt(var);
            let p_ln_p = |x: f64| {
                let lp = -0.5 * (2.0 * PI * var).ln() - x * x / (2.0 * var);
                lp.exp() * lp
            };
            let numeric = simpson(&p_ln_p, -30.0 * s, 30.0 * s, 1e-12, 50);
            assert!((numeric - neg_conditional_entropy_term(1.0 / var)).abs() < 1e-8);
            assert!((-numeric - gaussian_entropy(var).unwrap()).abs() < 1e-8);
        }
    }
}
