//! Registration quality metrics and approximation-set statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hv::{hypervolume, nondominated_sort};
use crate::model::{loss_vector, predict, warp_tensor, ModelParams, PairVars};
use crate::pair::{Dvf, Landmark, RegistrationPair};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreReport {
    /// `None` where the target landmark lies outside the field.
    pub per_landmark: Vec<Option<f64>>,
    pub mean: f64,
    pub out_of_bounds: usize,
}

/// Maps each target landmark with the field and measures the distance to
/// its source counterpart.
pub fn tre(dvf: &Dvf, landmarks: &[Landmark]) -> TreReport {
    let per_landmark: Vec<Option<f64>> = landmarks
        .iter()
        .map(|l| {
            let [tx, ty] = l.target;
            dvf.sample(tx, ty).map(|(ux, uy)| {
                let [sx, sy] = l.source;
                (tx + ux - sx).hypot(ty + uy - sy)
            })
        })
        .collect();
    let valid: Vec<f64> = per_landmark.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    TreReport {
        out_of_bounds: per_landmark.len() - valid.len(),
        per_landmark,
        mean,
    }
}

/// Percentage of interior forward-difference sites whose Jacobian
/// determinant of `x + u(x)` is non-positive.
pub fn folding_percent(dvf: &Dvf) -> f64 {
    let (h, w) = (dvf.height(), dvf.width());
    if h < 2 || w < 2 {
        return 0.0;
    }
    let (ux, uy) = (dvf.ux(), dvf.uy());
    let mut folded = 0usize;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let i = y * w + x;
            let dxx = ux[i + 1] - ux[i];
            let dxy = ux[i + w] - ux[i];
            let dyx = uy[i + 1] - uy[i];
            let dyy = uy[i + w] - uy[i];
            let det = (1.0 + dxx) * (1.0 + dyy) - dxy * dyx;
            if det <= 0.0 {
                folded += 1;
            }
        }
    }
    100.0 * folded as f64 / ((h - 1) * (w - 1)) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_organ: Vec<f64>,
    pub mean: f64,
    /// Organ channels that were empty in both masks (scored 100).
    pub empty: Vec<usize>,
}

/// Hard Dice in percent after thresholding both masks at 0.5.
pub fn dice_score(warped_mask: &Tensor, target_mask: &Tensor) -> Result<DiceReport> {
    if warped_mask.shape() != target_mask.shape() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            warped_mask.shape(),
            target_mask.shape()
        )));
    }
    let [n, k, h, w] = warped_mask.dims4()?;
    let hw = h * w;
    let mut per_organ = Vec::with_capacity(k);
    let mut empty = Vec::new();
    for c in 0..k {
        let (mut inter, mut total) = (0usize, 0usize);
        for b in 0..n {
            let off = (b * k + c) * hw;
            let a = &warped_mask.data()[off..off + hw];
            let t = &target_mask.data()[off..off + hw];
            for (&av, &tv) in a.iter().zip(t) {
                let (ai, ti) = (av >= 0.5, tv >= 0.5);
                inter += (ai && ti) as usize;
                total += ai as usize + ti as usize;
            }
        }
        if total == 0 {
            empty.push(c);
            per_organ.push(100.0);
        } else {
            per_organ.push(200.0 * inter as f64 / total as f64);
        }
    }
    let mean = per_organ.iter().sum::<f64>() / k.max(1) as f64;
    Ok(DiceReport {
        per_organ,
        mean,
        empty,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionMetrics {
    pub mean_tre: f64,
    pub folding_pct: f64,
    /// Absent when the pair has no masks to compare.
    pub dice_pct: Option<f64>,
    pub losses: Vec<f64>,
}

/// `p` solutions for one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproximationSet {
    pub reference: Vec<f64>,
    pub solutions: Vec<SolutionMetrics>,
}

/// A reported metric together with the solution it came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub head: usize,
    pub value: f64,
    /// Folding of that same solution.
    pub folding_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub hypervolume: f64,
    pub min_tre: Selected,
    pub max_dice: Option<Selected>,
    pub spread: f64,
    pub front0: Vec<usize>,
}

impl ApproximationSet {
    pub fn loss_vectors(&self) -> Vec<Vec<f64>> {
        self.solutions.iter().map(|s| s.losses.clone()).collect()
    }

    pub fn summary(&self) -> Result<SetSummary> {
        if self.solutions.is_empty() {
            return Err(Error::Contract("empty approximation set".into()));
        }
        let losses = self.loss_vectors();
        if losses.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite loss in approximation set".into()));
        }
        let front0 = nondominated_sort(&losses).first().to_vec();
        let pick = |key: &dyn Fn(&SolutionMetrics) -> f64, better: fn(f64, f64) -> bool| {
            let mut best = 0;
            for (i, s) in self.solutions.iter().enumerate() {
                if better(key(s), key(&self.solutions[best])) {
                    best = i;
                }
            }
            Selected {
                head: best,
                value: key(&self.solutions[best]),
                folding_pct: self.solutions[best].folding_pct,
            }
        };
        let min_tre = pick(&|s| s.mean_tre, |a, b| a < b);
        let max_dice = self.solutions[0]
            .dice_pct
            .map(|_| pick(&|s| s.dice_pct.unwrap_or(f64::NEG_INFINITY), |a, b| a > b));
        Ok(SetSummary {
            hypervolume: hypervolume(&clamped(&losses), &self.reference),
            min_tre,
            max_dice,
            spread: spread(&front0.iter().map(|&i| losses[i].as_slice()).collect::<Vec<_>>()),
            front0,
        })
    }
}

/// Losses capped at 1.0, the form used in objective space.
pub fn clamped(losses: &[Vec<f64>]) -> Vec<Vec<f64>> {
    losses
        .iter()
        .map(|v| v.iter().map(|x| x.min(1.0)).collect())
        .collect()
}

/// Mean Euclidean distance from each point to its nearest other point;
/// zero for fewer than two points.
pub fn spread(points: &[&[f64]]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, a)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| a.iter().zip(*b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / points.len() as f64
}

/// Losses and registration metrics of one field on one pair.
pub fn evaluate_solution(pair: &RegistrationPair, dvf: &Dvf, guidance: bool) -> Result<SolutionMetrics> {
    let mut tape = Tape::new();
    let inputs = PairVars::record(&mut tape, pair)?;
    let u = tape.constant(dvf.tensor().clone());
    let losses = loss_vector(&mut tape, &inputs, u, guidance)?.values(&tape);
    let warped_mask = warp_tensor(&pair.source_mask, dvf)?;
    Ok(SolutionMetrics {
        mean_tre: tre(dvf, &pair.landmarks).mean,
        folding_pct: folding_percent(dvf),
        dice_pct: Some(dice_score(&warped_mask, &pair.target_mask)?.mean),
        losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub pre_tre: f64,
    pub pre_dice: f64,
    pub set: ApproximationSet,
    pub summary: SetSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub pairs: Vec<PairReport>,
    pub pre_tre: f64,
    /// Per-head metrics averaged over pairs.
    pub mean_set: ApproximationSet,
    pub summary: SetSummary,
}

/// Evaluates every head of a model on every pair.
pub fn set_report(
    params: &ModelParams,
    pairs: &[RegistrationPair],
    reference: &[f64],
    guidance: bool,
) -> Result<RunReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("set report needs at least one pair".into()));
    }
    let mut reports = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let dvfs = predict(params, pair)?;
        let solutions = dvfs
            .iter()
            .map(|d| evaluate_solution(pair, d, guidance))
            .collect::<Result<Vec<_>>>()?;
        let set = ApproximationSet {
            reference: reference.to_vec(),
            solutions,
        };
        let zero = Dvf::zeros(pair.height(), pair.width());
        reports.push(PairReport {
            pre_tre: tre(&zero, &pair.landmarks).mean,
            pre_dice: dice_score(&pair.source_mask, &pair.target_mask)?.mean,
            summary: set.summary()?,
            set,
        });
    }
    let mean_set = average_sets(&reports.iter().map(|r| &r.set).collect::<Vec<_>>());
    let pre_tre = reports.iter().map(|r| r.pre_tre).sum::<f64>() / reports.len() as f64;
    Ok(RunReport {
        summary: mean_set.summary()?,
        pairs: reports,
        pre_tre,
        mean_set,
    })
}

fn average_sets(sets: &[&ApproximationSet]) -> ApproximationSet {
    let n = sets.len() as f64;
    let first = sets[0];
    let solutions = (0..first.solutions.len())
        .map(|i| {
            let avg = |f: &dyn Fn(&SolutionMetrics) -> f64| sets.iter().map(|s| f(&s.solutions[i])).sum::<f64>() / n;
            let dims = first.solutions[i].losses.len();
            SolutionMetrics {
                mean_tre: avg(&|s| s.mean_tre),
                folding_pct: avg(&|s| s.folding_pct),
                dice_pct: first.solutions[i].dice_pct.map(|_| avg(&|s| s.dice_pct.unwrap_or(0.0))),
                losses: (0..dims).map(|k| avg(&|s| s.losses[k])).collect(),
            }
        })
        .collect();
    ApproximationSet {
        reference: first.reference.clone(),
        solutions,
    }
}
