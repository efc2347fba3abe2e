//! Linear evaluation of frozen embeddings and the augmentation ablation grid.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{Graph, SplitMasks};
use crate::training::{train, AugMode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Candidate l2 strengths, picked by validation accuracy.
    pub l2_grid: Vec<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 0.01,
            l2_grid: vec![1e-4, 1e-3, 1e-2, 1e-1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    pub l2: f64,
}

/// Softmax regression weights, `d x c` plus a `1 x c` bias.
struct Softmax {
    w: Tensor,
    b: Vec<f64>,
}

impl Softmax {
    fn logits(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b);
        for (k, &xk) in x.iter().enumerate() {
            if xk != 0.0 {
                for (o, w) in out.iter_mut().zip(self.w.row(k)) {
                    *o += xk * w;
                }
            }
        }
    }

    fn predict(&self, x: &[f64]) -> usize {
        let mut l = vec![0.0; self.b.len()];
        self.logits(x, &mut l);
        argmax(&l)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Full-batch gradient descent on mean cross-entropy plus `l2/2 |W|^2`.
fn fit(
    z: &Tensor,
    labels: &[usize],
    train: &[usize],
    classes: usize,
    l2: f64,
    cfg: &ProbeConfig,
) -> Softmax {
    let d = z.cols();
    let mut m = Softmax {
        w: Tensor::zeros(d, classes),
        b: vec![0.0; classes],
    };
    let mut gw = Tensor::zeros(d, classes);
    let mut gb = vec![0.0; classes];
    let mut p = vec![0.0; classes];
    let inv = 1.0 / train.len() as f64;
    for _ in 0..cfg.iterations {
        gw.data_mut().fill(0.0);
        gb.fill(0.0);
        for &i in train {
            let x = z.row(i);
            m.logits(x, &mut p);
            let top = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in p.iter_mut() {
                *v = (*v - top).exp();
                s += *v;
            }
            for v in p.iter_mut() {
                *v /= s;
            }
            p[labels[i]] -= 1.0;
            for (k, &xk) in x.iter().enumerate() {
                if xk != 0.0 {
                    for (g, &pc) in gw.row_mut(k).iter_mut().zip(&p) {
                        *g += xk * pc;
                    }
                }
            }
            for (g, &pc) in gb.iter_mut().zip(&p) {
                *g += pc;
            }
        }
        for (w, g) in m.w.data_mut().iter_mut().zip(gw.data()) {
            *w -= cfg.lr * (g * inv + l2 * *w);
        }
        for (b, g) in m.b.iter_mut().zip(&gb) {
            *b -= cfg.lr * g * inv;
        }
    }
    m
}

fn accuracy(m: &Softmax, z: &Tensor, labels: &[usize], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    let hits = idx
        .iter()
        .filter(|&&i| m.predict(z.row(i)) == labels[i])
        .count();
    hits as f64 / idx.len() as f64
}

/// Trains one probe per l2 candidate on the training nodes and reports the
/// test accuracy of the one with the best validation accuracy (first wins ties).
pub fn linear_probe(
    z: &Tensor,
    labels: &[usize],
    splits: &SplitMasks,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if labels.len() != z.rows() || splits.num_nodes() != z.rows() {
        return Err(Error::ShapeMismatch {
            op: "linear_probe",
            left: z.shape(),
            right: (labels.len(), splits.num_nodes()),
        });
    }
    if cfg.l2_grid.is_empty() {
        return Err(Error::Config("probe l2 grid is empty".into()));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let train = splits.train_indices();
    let mut seen = vec![false; classes];
    for &i in &train {
        seen[labels[i]] = true;
    }
    if let Some(c) = seen.iter().position(|&s| !s) {
        return Err(Error::DegenerateSplit(format!(
            "class {c} has no training node"
        )));
    }
    let (val, test) = (splits.val_indices(), splits.test_indices());
    let mut best: Option<(ProbeResult, f64)> = None;
    for &l2 in &cfg.l2_grid {
        let m = fit(z, labels, &train, classes, l2, cfg);
        let va = accuracy(&m, z, labels, &val);
        if best.as_ref().is_none_or(|(_, b)| va > *b) {
            let r = ProbeResult {
                test_accuracy: accuracy(&m, z, labels, &test),
                val_accuracy: va,
                l2,
            };
            best = Some((r, va));
        }
    }
    Ok(best.expect("non-empty grid").0)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    /// Random 10/10/80 splits per trained encoder.
    pub n_splits: usize,
    /// Training seeds; one encoder per seed.
    pub seeds: Vec<u64>,
    /// Seed of the first split; split `r` uses `split_seed + r`.
    pub split_seed: u64,
    pub probe: ProbeConfig,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            n_splits: 20,
            seeds: vec![0],
            split_seed: 0,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Every probe accuracy, seed-major.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Hash of the training configuration and protocol.
    pub fingerprint: String,
    pub per_seed: Vec<SeedResult>,
}

impl EvalReport {
    fn from_seeds(per_seed: Vec<SeedResult>, fingerprint: String) -> Self {
        let accuracies: Vec<f64> = per_seed
            .iter()
            .flat_map(|s| s.accuracies.iter().copied())
            .collect();
        let (mean, std) = mean_std(&accuracies);
        Self {
            accuracies,
            mean,
            std,
            fingerprint,
            per_seed,
        }
    }

    /// Report over one list of runs.
    pub fn from_runs(accuracies: Vec<f64>, fingerprint: String) -> Self {
        let (mean, std) = mean_std(&accuracies);
        let seed = SeedResult {
            seed: 0,
            accuracies,
            mean,
            std,
        };
        Self::from_seeds(vec![seed], fingerprint)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("report serialises") + "\n";
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let mut h = DefaultHasher::new();
    serde_json::to_string(value)
        .expect("serialises")
        .hash(&mut h);
    format!("{:016x}", h.finish())
}

fn labels_of(graph: &Graph) -> Result<&[usize]> {
    graph
        .labels()
        .ok_or_else(|| Error::InvalidGraph("evaluation needs node labels".into()))
}

fn probe_splits(z: &Tensor, labels: &[usize], protocol: &EvalProtocol) -> Result<Vec<f64>> {
    (0..protocol.n_splits)
        .map(|r| {
            let splits = SplitMasks::random(z.rows(), protocol.split_seed + r as u64)?;
            Ok(linear_probe(z, labels, &splits, &protocol.probe)?.test_accuracy)
        })
        .collect()
}

/// Probes fixed embeddings (for example raw features) over the protocol's splits.
pub fn evaluate_embeddings(
    z: &Tensor,
    labels: &[usize],
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    Ok(EvalReport::from_runs(
        probe_splits(z, labels, protocol)?,
        fingerprint(protocol),
    ))
}

/// Trains one encoder per protocol seed and probes each on `n_splits` splits.
pub fn repeated_eval(
    graph: &Graph,
    cfg: &TrainConfig,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    if protocol.n_splits == 0 || protocol.seeds.is_empty() {
        return Err(Error::Config(
            "evaluation needs at least one split and one seed".into(),
        ));
    }
    let labels = labels_of(graph)?;
    let mut per_seed = Vec::with_capacity(protocol.seeds.len());
    for &seed in &protocol.seeds {
        let run_cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        let out = train(graph, &run_cfg)?;
        let z = out.embeddings(graph, &run_cfg)?;
        let accuracies = probe_splits(&z, labels, protocol)?;
        let (mean, std) = mean_std(&accuracies);
        log::info!(
            "seed {seed} [{}/{}]: {:.4} +- {:.4}",
            cfg.aug_feat.name(),
            cfg.aug_edge.name(),
            mean,
            std
        );
        per_seed.push(SeedResult {
            seed,
            accuracies,
            mean,
            std,
        });
    }
    Ok(EvalReport::from_seeds(
        per_seed,
        fingerprint(&(cfg, protocol)),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub feat: AugMode,
    pub edge: AugMode,
    pub report: EvalReport,
}

/// The 3 x 3 feature-mode by edge-mode ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    /// Row-major over feature mode, then edge mode, both in `AugMode::ALL` order.
    pub cells: Vec<GridCell>,
}

impl AblationGrid {
    pub fn cell(&self, feat: AugMode, edge: AugMode) -> &GridCell {
        self.cells
            .iter()
            .find(|c| c.feat == feat && c.edge == edge)
            .expect("grid holds every combination")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feat_mode,edge_mode,mean,std,runs\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.feat.name(),
                c.edge.name(),
                c.report.mean,
                c.report.std,
                c.report.accuracies.len()
            );
        }
        out
    }

    /// Rows are feature modes, columns edge modes; entries are percentages.
    pub fn to_latex(&self) -> String {
        let label = |m: AugMode| match m {
            AugMode::None => "Without Aug.",
            AugMode::Random => "Random",
            AugMode::Learnable => "Learnable",
        };
        let mut out =
            String::from("\\begin{tabular}{lccc}\n\\hline\nFeature \\textbackslash{} Edge");
        for e in AugMode::ALL {
            let _ = write!(out, " & {}", label(e));
        }
        out.push_str(" \\\\\n\\hline\n");
        for f in AugMode::ALL {
            out.push_str(label(f));
            for e in AugMode::ALL {
                let r = &self.cell(f, e).report;
                let _ = write!(out, " & {:.2} $\\pm$ {:.2}", 100.0 * r.mean, 100.0 * r.std);
            }
            out.push_str(" \\\\\n");
        }
        out.push_str("\\hline\n\\end{tabular}\n");
        out
    }

    /// Writes `report.json` and `report.csv` (and `report.tex` when asked) into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, latex: bool) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        write_json(&json, self)?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let mut paths = vec![json, csv];
        if latex {
            let tex = dir.join("report.tex");
            fs::write(&tex, self.to_latex()).map_err(|e| Error::io(&tex, e))?;
            paths.push(tex);
        }
        Ok(paths)
    }
}

/// Runs all nine augmentation combinations with shared seeds. Cells run in
/// parallel; each is single-threaded and the cell order is fixed.
pub fn ablation_grid(
    graph: &Graph,
    base: &TrainConfig,
    protocol: &EvalProtocol,
) -> Result<AblationGrid> {
    let combos: Vec<(AugMode, AugMode)> = AugMode::ALL
        .iter()
        .flat_map(|&f| AugMode::ALL.iter().map(move |&e| (f, e)))
        .collect();
    let cells = combos
        .par_iter()
        .map(|&(feat, edge)| {
            let cfg = TrainConfig {
                aug_feat: feat,
                aug_edge: edge,
                ..base.clone()
            };
            Ok(GridCell {
                feat,
                edge,
                report: repeated_eval(graph, &cfg, protocol)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationGrid { cells })
}
