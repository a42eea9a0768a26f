//! Training loops: hypervolume-driven multi-objective training, the fixed
//! grid-weight baseline, the GenMED driver, and Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmed::{edge_distance, front_distance, genmed_eval, genmed_grad};
use crate::hv::{dynamic_weights, hypervolume};
use crate::metrics::clamped;
use crate::model::{forward_multi_head, loss_vector, weighted_total, BoundParams, LossVector, ModelConfig, ModelParams, PairVars};
use crate::pair::RegistrationPair;
use crate::synth::Dataset;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_tensors(params: &[&Tensor]) -> Self {
        Self::new(&params.iter().map(|t| t.len()).collect::<Vec<_>>())
    }

    /// One bias-corrected update of every buffer in `params`.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} buffers, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape(format!("buffer {i}: size mismatch")));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    iteration: self.step as usize,
                    head: None,
                    detail: format!("gradient of buffer {i} element {j} is {}", g[j]),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_model(&mut self, params: &mut ModelParams, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let mut bufs: Vec<&mut [f64]> = params.tensors_mut().into_iter().map(Tensor::data_mut).collect();
        self.update(&mut bufs, grads, lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub p: usize,
    pub iterations: usize,
    pub lr: f64,
    pub reference: Vec<f64>,
    pub guidance: bool,
    pub share_encoder: bool,
    pub seed: u64,
    /// Pairs per iteration.
    pub batch: usize,
    /// Evaluation-set HV is recorded every this many iterations (and at
    /// the start and end).
    pub eval_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p: 27,
            iterations: 2000,
            lr: 1e-4,
            reference: vec![1.0, 1.0, 1.0],
            guidance: true,
            share_encoder: true,
            seed: 0,
            batch: 1,
            eval_every: 250,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn objectives(&self) -> usize {
        if self.guidance {
            3
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::Config("p must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.reference.len() != self.objectives() {
            return Err(Error::Config(format!(
                "reference point has {} coordinates but there are {} objectives",
                self.reference.len(),
                self.objectives()
            )));
        }
        if self.reference.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!(
                "reference point {:?} must be componentwise positive",
                self.reference
            )));
        }
        if self.batch == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch and eval_every must be positive".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            heads: self.p,
            share_encoder: self.share_encoder,
            ..self.model.clone()
        }
    }
}

/// How each head was weighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Dynamic,
    Fixed(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    /// Per-head mean loss vectors over the evaluation split.
    pub losses: Vec<Vec<f64>>,
    pub hypervolume: f64,
    /// Weights of the most recent training step (for iteration 0, the
    /// weights the evaluation losses would induce).
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub config: TrainConfig,
    pub mode: WeightMode,
    pub records: Vec<EvalRecord>,
}

impl TrainTrace {
    pub fn initial(&self) -> &EvalRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &EvalRecord {
        self.records.last().expect("at least the initial record")
    }
}

pub struct Trained {
    pub trace: TrainTrace,
    pub params: ModelParams,
}

/// One recorded forward pass of all heads on a pair, ready for a weighted
/// backward pass.
pub struct ForwardPass {
    tape: Tape,
    bound: BoundParams,
    losses: Vec<LossVector>,
    dvfs: Vec<Var>,
}

impl ForwardPass {
    pub fn new(params: &ModelParams, pair: &RegistrationPair, guidance: bool) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let inputs = PairVars::record(&mut tape, pair)?;
        let dvfs = forward_multi_head(&mut tape, params, &bound, &inputs)?;
        let losses = dvfs
            .iter()
            .map(|&d| loss_vector(&mut tape, &inputs, d, guidance))
            .collect::<Result<_>>()?;
        Ok(ForwardPass {
            tape,
            bound,
            losses,
            dvfs,
        })
    }

    /// Loss vector of every head, unclamped.
    pub fn loss_values(&self) -> Vec<Vec<f64>> {
        self.losses.iter().map(|l| l.values(&self.tape)).collect()
    }

    pub fn dvf(&self, head: usize) -> &Tensor {
        self.tape.value(self.dvfs[head])
    }

    /// Gradient of `sum_i sum_k w_ik L_ik` for every parameter buffer.
    pub fn backward(mut self, weights: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if weights.len() != self.losses.len() {
            return Err(Error::Contract(format!(
                "{} weight rows for {} heads",
                weights.len(),
                self.losses.len()
            )));
        }
        let mut total: Option<Var> = None;
        for (lv, w) in self.losses.iter().zip(weights) {
            let head = weighted_total(&mut self.tape, lv, w)?;
            total = Some(match total {
                Some(t) => self.tape.add(t, head)?,
                None => head,
            });
        }
        self.tape.backward(total.expect("at least one head"))?;
        Ok(self.bound.grads(&self.tape))
    }
}

/// Mean loss vector of every head over the given pairs.
pub fn evaluate_losses(params: &ModelParams, pairs: &[RegistrationPair], guidance: bool) -> Result<Vec<Vec<f64>>> {
    let p = params.heads.len();
    let n = if guidance { 3 } else { 2 };
    let mut acc = vec![vec![0.0; n]; p];
    for pair in pairs {
        let pass = ForwardPass::new(params, pair, guidance)?;
        for (a, l) in acc.iter_mut().zip(pass.loss_values()) {
            for (x, y) in a.iter_mut().zip(l) {
                *x += y;
            }
        }
    }
    let count = pairs.len().max(1) as f64;
    Ok(acc
        .into_iter()
        .map(|v| v.into_iter().map(|x| x / count).collect())
        .collect())
}

fn check_losses(iteration: usize, losses: &[Vec<f64>]) -> Result<()> {
    for (head, l) in losses.iter().enumerate() {
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration,
                head: Some(head),
                detail: format!("loss vector {l:?}"),
            });
        }
    }
    Ok(())
}

fn check_grads(iteration: usize, grads: &[Vec<f64>], losses: &[Vec<f64>]) -> Result<()> {
    if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            iteration,
            head: None,
            detail: format!("gradient buffer {i} non-finite; losses {losses:?}"),
        });
    }
    Ok(())
}

/// Training and evaluation pairs of a dataset.
pub fn split(data: &Dataset) -> Result<(Vec<RegistrationPair>, Vec<RegistrationPair>)> {
    let train = data.train_indices().map(|i| data.pair(i)).collect::<Result<_>>()?;
    let eval = data.eval_indices().map(|i| data.pair(i)).collect::<Result<_>>()?;
    Ok((train, eval))
}

fn run(
    config: &TrainConfig,
    train: &[RegistrationPair],
    eval: &[RegistrationPair],
    mode: WeightMode,
    mut weigh: impl FnMut(&[Vec<f64>]) -> Vec<Vec<f64>>,
) -> Result<Trained> {
    config.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Config("dataset needs non-empty training and evaluation splits".into()));
    }
    let mut params = ModelParams::init(config.seed, &config.model_config())?;
    let mut adam = Adam::for_tensors(&params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);

    let record = |iteration: usize, params: &ModelParams, weights: Option<Vec<Vec<f64>>>, weigh: &mut dyn FnMut(&[Vec<f64>]) -> Vec<Vec<f64>>| -> Result<EvalRecord> {
        let losses = evaluate_losses(params, eval, config.guidance)?;
        check_losses(iteration, &losses)?;
        Ok(EvalRecord {
            iteration,
            hypervolume: hypervolume(&clamped(&losses), &config.reference),
            weights: weights.unwrap_or_else(|| weigh(&clamped(&losses))),
            losses,
        })
    };

    let mut records = vec![record(0, &params, None, &mut weigh)?];
    let mut last_weights = Vec::new();
    for it in 1..=config.iterations {
        let mut grads: Option<Vec<Vec<f64>>> = None;
        for _ in 0..config.batch {
            let pair = &train[rng.random_range(0..train.len())];
            let pass = ForwardPass::new(&params, pair, config.guidance)?;
            let losses = pass.loss_values();
            check_losses(it, &losses)?;
            let weights = weigh(&clamped(&losses));
            let g = pass.backward(&weights)?;
            check_grads(it, &g, &losses)?;
            last_weights = weights;
            grads = Some(match grads {
                None => g,
                Some(mut acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                    }
                    acc
                }
            });
        }
        let mut grads = grads.expect("batch >= 1");
        if config.batch > 1 {
            let s = 1.0 / config.batch as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        adam.step_model(&mut params, &grads, config.lr)?;
        if it % config.eval_every == 0 || it == config.iterations {
            records.push(record(it, &params, Some(last_weights.clone()), &mut weigh)?);
        }
    }
    Ok(Trained {
        trace: TrainTrace {
            config: config.clone(),
            mode,
            records,
        },
        params,
    })
}

/// Multi-objective training: every iteration each head's weights are its
/// normalized hypervolume gradient in (clamped) loss space.
pub fn train_mo(config: &TrainConfig, data: &Dataset) -> Result<Trained> {
    let (train, eval) = split(data)?;
    train_mo_on(config, &train, &eval)
}

pub fn train_mo_on(config: &TrainConfig, train: &[RegistrationPair], eval: &[RegistrationPair]) -> Result<Trained> {
    let reference = config.reference.clone();
    run(config, train, eval, WeightMode::Dynamic, |points| dynamic_weights(points, &reference))
}

/// Grid candidates for the image, smoothness and segmentation weights.
pub const GRID_W1: [f64; 3] = [0.0, 0.5, 1.0];
pub const GRID_W2: [f64; 4] = [0.0, 0.1, 0.5, 1.0];
pub const GRID_W3: [f64; 3] = [0.0, 0.5, 1.0];
pub const GRID_SIZE: usize = 27;

fn is_multiple(a: &[f64; 3], b: &[f64; 3]) -> bool {
    // a = c * b for some c > 0 with matching zero patterns
    let ratios: Vec<f64> = a
        .iter()
        .zip(b)
        .filter_map(|(x, y)| match (*x == 0.0, *y == 0.0) {
            (true, true) => Some(f64::NAN),
            (false, false) => Some(x / y),
            _ => None,
        })
        .collect();
    ratios.len() == 3 && {
        let r: Vec<f64> = ratios.into_iter().filter(|r| !r.is_nan()).collect();
        !r.is_empty() && r.iter().all(|x| (x - r[0]).abs() < 1e-12)
    }
}

/// The retained grid-search weight triples, unnormalized.
///
/// Drops the all-zero triple and triples without an image or segmentation
/// term. Among triples with a zero component, scaled copies of another
/// candidate are dropped in favour of the largest copy.
pub fn enumerate_grid_weights() -> Result<Vec<[f64; 3]>> {
    let mut all = Vec::new();
    for &a in &GRID_W1 {
        for &b in &GRID_W2 {
            for &c in &GRID_W3 {
                all.push([a, b, c]);
            }
        }
    }
    let kept: Vec<[f64; 3]> = all
        .iter()
        .copied()
        .filter(|w| !(w[0] == 0.0 && w[2] == 0.0))
        .filter(|w| {
            !w.contains(&0.0)
                || !all
                    .iter()
                    .any(|o| o != w && is_multiple(o, w) && o[0] + o[1] + o[2] > w[0] + w[1] + w[2])
        })
        .collect();
    if kept.len() != GRID_SIZE {
        return Err(Error::Config(format!(
            "grid rule retained {} triples, expected {GRID_SIZE}",
            kept.len()
        )));
    }
    Ok(kept)
}

/// Baseline: head `i` is trained with the `i`-th grid triple, normalized
/// to sum to one.
pub fn train_grid(config: &TrainConfig, data: &Dataset) -> Result<Trained> {
    let (train, eval) = split(data)?;
    train_grid_on(config, &train, &eval)
}

pub fn train_grid_on(config: &TrainConfig, train: &[RegistrationPair], eval: &[RegistrationPair]) -> Result<Trained> {
    if !config.guidance {
        return Err(Error::Config("grid search weights three objectives; enable guidance".into()));
    }
    let grid = enumerate_grid_weights()?;
    if config.p != grid.len() {
        return Err(Error::Config(format!(
            "grid search needs p = {} heads, got {}",
            grid.len(),
            config.p
        )));
    }
    let weights: Vec<Vec<f64>> = grid
        .iter()
        .map(|w| {
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        })
        .collect();
    let fixed = weights.clone();
    run(config, train, eval, WeightMode::Fixed(weights), move |_| fixed.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenmedConfig {
    pub p: usize,
    pub objectives: usize,
    pub iterations: usize,
    pub lr: f64,
    pub references: Vec<Vec<f64>>,
    pub seed: u64,
    pub record_every: usize,
}

impl Default for GenmedConfig {
    fn default() -> Self {
        GenmedConfig {
            p: 25,
            objectives: 3,
            iterations: 3000,
            lr: 0.01,
            references: vec![vec![2.2; 3], vec![10.0; 3]],
            seed: 0,
            record_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenmedRecord {
    pub iteration: usize,
    pub objectives: Vec<Vec<f64>>,
    pub hypervolume: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenmedTrace {
    pub reference: Vec<f64>,
    pub records: Vec<GenmedRecord>,
    pub decisions: Vec<Vec<f64>>,
    pub objectives: Vec<Vec<f64>>,
    pub front_distances: Vec<f64>,
    /// Mean objective-space distance to the edges of the front; smaller
    /// means the points gather on the edges.
    pub edge_statistic: f64,
}

/// Optimizes `p` decision vectors on GenMED directly, once per reference
/// point, from the same starting points.
pub fn train_genmed(config: &GenmedConfig) -> Result<Vec<GenmedTrace>> {
    let n = config.objectives;
    if config.p == 0 || !(2..=3).contains(&n) {
        return Err(Error::Config(format!(
            "GenMED needs p >= 1 and 2 or 3 objectives (p {}, n {n})",
            config.p
        )));
    }
    if config.references.is_empty() {
        return Err(Error::Config("at least one reference point required".into()));
    }
    if config.record_every == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("record_every and lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start: Vec<Vec<f64>> = (0..config.p)
        .map(|_| (0..n).map(|_| rng.random_range(0.0..0.5)).collect())
        .collect();
    config
        .references
        .iter()
        .map(|reference| {
            if reference.len() != n || reference.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::Config(format!("bad reference point {reference:?}")));
            }
            let mut x = start.clone();
            let mut adam = Adam::new(&vec![n; config.p]);
            let mut records = Vec::new();
            for it in 0..=config.iterations {
                let f: Vec<Vec<f64>> = x.iter().map(|xi| genmed_eval(xi)).collect();
                if it % config.record_every == 0 || it == config.iterations {
                    records.push(GenmedRecord {
                        iteration: it,
                        hypervolume: hypervolume(&f, reference),
                        objectives: f.clone(),
                    });
                }
                if it == config.iterations {
                    break;
                }
                let w = dynamic_weights(&f, reference);
                let grads: Vec<Vec<f64>> = x
                    .iter()
                    .zip(&w)
                    .map(|(xi, wi)| {
                        let jac = genmed_grad(xi);
                        (0..n).map(|j| (0..n).map(|k| wi[k] * jac[k][j]).sum()).collect()
                    })
                    .collect();
                let mut bufs: Vec<&mut [f64]> = x.iter_mut().map(Vec::as_mut_slice).collect();
                adam.update(&mut bufs, &grads, config.lr)?;
            }
            let objectives: Vec<Vec<f64>> = x.iter().map(|xi| genmed_eval(xi)).collect();
            let front_distances = x.iter().map(|xi| front_distance(xi)).collect::<Result<Vec<_>>>()?;
            let edge_statistic = objectives.iter().map(|f| edge_distance(f)).sum::<f64>() / config.p as f64;
            Ok(GenmedTrace {
                reference: reference.clone(),
                records,
                decisions: x,
                objectives,
                front_distances,
                edge_statistic,
            })
        })
        .collect()
}
