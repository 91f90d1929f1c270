use rayon::prelude::*;
use serde::Serialize;

use super::engine::{run_attack_with, AttackMemo};
use super::{AttackConfig, AttackResult};
use crate::classifier::{evaluate, Classifier};
use crate::error::{Error, Result};
use crate::imagecore::LabeledDataset;
use crate::layers::LayerParams;
use crate::sig6;
use crate::threat::ThreatSpec;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteRow {
    pub attack: String,
    /// Fraction of correctly classified samples the attack fails to flip.
    pub defended_accuracy: f64,
    /// Fraction of all samples still classified correctly after the attack.
    pub accuracy_under_attack: f64,
    pub attacked: usize,
    pub successes: usize,
    pub mean_linf: f64,
    pub mean_l2: f64,
    pub mean_one_minus_ssim: Option<f64>,
    pub mean_lpips_style: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub samples: usize,
    pub clean_accuracy: f64,
    pub rows: Vec<SuiteRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.map(|v| mean(v.into_iter()))
}

fn summarize(name: &str, results: &[&AttackResult], samples: usize) -> SuiteRow {
    let attacked = results.len();
    let successes = results.iter().filter(|r| r.success).count();
    let survived = attacked - successes;
    SuiteRow {
        attack: name.to_string(),
        defended_accuracy: if attacked == 0 {
            1.0
        } else {
            survived as f64 / attacked as f64
        },
        accuracy_under_attack: survived as f64 / samples as f64,
        attacked,
        successes,
        mean_linf: mean(results.iter().map(|r| r.metrics.linf)),
        mean_l2: mean(results.iter().map(|r| r.metrics.l2)),
        mean_one_minus_ssim: mean_opt(results.iter().map(|r| r.metrics.ssim.map(|s| 1.0 - s))),
        mean_lpips_style: mean_opt(results.iter().map(|r| r.metrics.lpips_style)),
    }
}

/// Runs every config on every correctly classified sample. Samples run in
/// parallel; each keeps a private memo so combined attacks reuse the
/// single-layer results computed for other columns.
pub fn attack_suite<M: Classifier>(model: &M, data: &LabeledDataset, configs: &[AttackConfig]) -> Result<SuiteReport> {
    for c in configs {
        c.validate()?;
    }
    let eval = evaluate(model, data)?;
    let correct: Vec<usize> = (0..data.len()).filter(|&i| eval.correct[i]).collect();
    let per_sample: Vec<Vec<AttackResult>> = correct
        .par_iter()
        .map(|&i| {
            let mut memo = AttackMemo::new();
            configs
                .iter()
                .map(|c| run_attack_with(model, &data.images[i], data.labels[i], c, &mut memo, &[]))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let rows = configs
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let col: Vec<&AttackResult> = per_sample.iter().map(|r| &r[k]).collect();
            summarize(&c.name, &col, data.len())
        })
        .collect();
    Ok(SuiteReport {
        samples: data.len(),
        clean_accuracy: eval.accuracy,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixRow {
    pub defense: String,
    pub clean_accuracy: f64,
    /// Accuracy under attack over all samples, one per attack column.
    pub cells: Vec<f64>,
    pub suite: SuiteReport,
}

/// Accuracy of each defended model (rows) under each attack (columns).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixReport {
    pub attacks: Vec<String>,
    pub rows: Vec<MatrixRow>,
}

impl MatrixReport {
    /// `defense,Ground,<attack>...`, six significant digits per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("defense,Ground");
        for a in &self.attacks {
            out.push(',');
            out.push_str(a);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.defense);
            out.push(',');
            out.push_str(&sig6(r.clean_accuracy));
            for c in &r.cells {
                out.push(',');
                out.push_str(&sig6(*c));
            }
            out.push('\n');
        }
        out
    }
}

pub fn defense_matrix<M: Classifier>(
    defenses: &[(String, &M)],
    data: &LabeledDataset,
    configs: &[AttackConfig],
) -> Result<MatrixReport> {
    if defenses.is_empty() || configs.is_empty() {
        return Err(Error::invalid("matrix needs at least one defense and one attack"));
    }
    let rows = defenses
        .iter()
        .map(|(name, model)| {
            let suite = attack_suite(*model, data, configs)?;
            Ok(MatrixRow {
                defense: name.clone(),
                clean_accuracy: suite.clean_accuracy,
                cells: suite.rows.iter().map(|r| r.accuracy_under_attack).collect(),
                suite,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MatrixReport {
        attacks: configs.iter().map(|c| c.name.clone()).collect(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub delta: f64,
    pub flow: f64,
    pub accuracy: f64,
    pub defended_accuracy: f64,
    pub mean_linf: f64,
    pub mean_l2: f64,
    pub mean_one_minus_ssim: Option<f64>,
    pub mean_lpips_style: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub delta_grid: Vec<f64>,
    pub flow_grid: Vec<f64>,
    pub clean_accuracy: f64,
    /// Row-major: `cells[i * flow_grid.len() + j]` is `(delta_grid[i], flow_grid[j])`.
    pub cells: Vec<SweepCell>,
}

fn with_bounds(template: &AttackConfig, delta: f64, flow: f64) -> AttackConfig {
    let mut c = template.clone();
    for l in &mut c.layers {
        match &mut l.threat {
            ThreatSpec::Delta { linf_bound } => *linf_bound = delta,
            ThreatSpec::Flow { max_disp } => *max_disp = flow,
            ThreatSpec::Affine { .. } => {}
        }
    }
    c.name = format!("{}@{delta}/{flow}", template.name);
    c
}

/// Combined-attack strength grid. `template` must hold one delta and one
/// flow layer; its bounds are replaced by every `(delta, flow)` pair. Each
/// grid point is warm-started from the solutions at the tighter neighbours
/// `(i-1, j)` and `(i, j-1)`, so accuracy cannot increase along either axis.
pub fn strength_sweep<M: Classifier>(
    model: &M,
    data: &LabeledDataset,
    template: &AttackConfig,
    delta_grid: &[f64],
    flow_grid: &[f64],
) -> Result<SweepReport> {
    if delta_grid.is_empty() || flow_grid.is_empty() {
        return Err(Error::invalid("sweep grids must be non-empty"));
    }
    let mut kinds = template.kinds();
    kinds.sort_by_key(|k| k.name());
    if kinds != [crate::layers::LayerKind::Delta, crate::layers::LayerKind::Flow] {
        return Err(Error::invalid("sweep template needs exactly one delta and one flow layer"));
    }
    let sorted = |g: &[f64]| g.windows(2).all(|w| w[0] <= w[1]);
    if !sorted(delta_grid) || !sorted(flow_grid) {
        return Err(Error::invalid("sweep grids must be sorted ascending"));
    }
    let (nd, nf) = (delta_grid.len(), flow_grid.len());
    let configs: Vec<AttackConfig> = delta_grid
        .iter()
        .flat_map(|&d| flow_grid.iter().map(move |&f| (d, f)))
        .map(|(d, f)| with_bounds(template, d, f))
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let eval = evaluate(model, data)?;
    let correct: Vec<usize> = (0..data.len()).filter(|&i| eval.correct[i]).collect();
    let per_sample: Vec<Vec<AttackResult>> = correct
        .par_iter()
        .map(|&i| {
            let mut memo = AttackMemo::new();
            let mut grid: Vec<AttackResult> = Vec::with_capacity(nd * nf);
            for a in 0..nd {
                for b in 0..nf {
                    let mut cands: Vec<Vec<LayerParams>> = Vec::new();
                    if a > 0 {
                        cands.push(grid[(a - 1) * nf + b].params.clone());
                    }
                    if b > 0 {
                        cands.push(grid[a * nf + b - 1].params.clone());
                    }
                    let r = run_attack_with(model, &data.images[i], data.labels[i], &configs[a * nf + b], &mut memo, &cands)?;
                    grid.push(r);
                }
            }
            Ok(grid)
        })
        .collect::<Result<_>>()?;
    let cells = (0..nd * nf)
        .map(|k| {
            let col: Vec<&AttackResult> = per_sample.iter().map(|r| &r[k]).collect();
            let row = summarize(&configs[k].name, &col, data.len());
            SweepCell {
                delta: delta_grid[k / nf],
                flow: flow_grid[k % nf],
                accuracy: row.accuracy_under_attack,
                defended_accuracy: row.defended_accuracy,
                mean_linf: row.mean_linf,
                mean_l2: row.mean_l2,
                mean_one_minus_ssim: row.mean_one_minus_ssim,
                mean_lpips_style: row.mean_lpips_style,
            }
        })
        .collect();
    Ok(SweepReport {
        delta_grid: delta_grid.to_vec(),
        flow_grid: flow_grid.to_vec(),
        clean_accuracy: eval.accuracy,
        cells,
    })
}
