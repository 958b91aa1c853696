//! Bi-level search for the mixing factors, followed by a frozen-coefficient finetune.
//!
//! Each search iteration takes one AdamW step on the task weights using an
//! inner-train batch, then one step on the alpha factors using the hypergradient
//!
//! ```text
//! ∇α L_val(W′, α) − η_w · (∇α G(W⁺, α) − ∇α G(W⁻, α)) / 2ε,   W± = W ± ε ∇W′ L_val(W′, α)
//! ```
//!
//! where `W` is the task weight before the inner step and `W′` after it.

use serde::{Deserialize, Serialize};

use crate::data::{split_indices, BatchCycler, Dataset, SplitPair};
use crate::error::{Error, Result};
use crate::model::{Coefficients, Network, ParamRole, Targets};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::seed;
use crate::tensor::Tensor;

/// Numerator of the perturbation scale `ε = 0.01 / ‖∇W′ L_val‖₂`.
pub const PERTURBATION_RADIUS: f64 = 0.01;
/// Below this gradient norm `ε` is treated as undefined.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Mean of the composed coefficient matrices.
    #[default]
    Coefficients,
    /// Mean of the raw factors, composed afterwards.
    Factors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub eta_w: f64,
    pub eta_alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub warmup_ratio_w: f64,
    pub warmup_ratio_alpha: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub split_ratio: f64,
    pub replicates: usize,
    pub rank: usize,
    pub alpha_init_mean: f64,
    pub alpha_init_std: f64,
    pub averaging: Averaging,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            eta_w: 2e-5,
            eta_alpha: 2e-3,
            lambda1: 0.01,
            lambda2: 0.01,
            warmup_ratio_w: 0.1,
            warmup_ratio_alpha: 0.1,
            total_steps: 100,
            batch_size: 16,
            split_ratio: 0.8,
            replicates: 1,
            rank: 1,
            alpha_init_mean: 1.0,
            alpha_init_std: 0.005,
            averaging: Averaging::Coefficients,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio));
        }
        if self.replicates == 0 {
            return bad("replicates (K) must be at least 1".into());
        }
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [
            ("eta_w", self.eta_w),
            ("eta_alpha", self.eta_alpha),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha_init_std", self.alpha_init_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [("warmup_ratio_w", self.warmup_ratio_w), ("warmup_ratio_alpha", self.warmup_ratio_alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    pub fn w_schedule(&self) -> LrSchedule {
        LrSchedule::with_ratio(self.eta_w, self.warmup_ratio_w, self.total_steps)
    }

    pub fn alpha_schedule(&self) -> LrSchedule {
        LrSchedule::with_ratio(self.eta_alpha, self.warmup_ratio_alpha, self.total_steps)
    }

    pub fn w_optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            weight_decay: self.lambda1,
            ..Default::default()
        })
    }

    pub fn alpha_optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            weight_decay: self.lambda2,
            ..Default::default()
        })
    }
}

/// `0.01 / ‖g‖₂`, or `None` when the norm is below [`DEGENERATE_NORM`].
pub fn compute_epsilon(val_w_grad: &[f64]) -> Option<f64> {
    let norm = val_w_grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm >= DEGENERATE_NORM).then(|| PERTURBATION_RADIUS / norm)
}

/// Gradients of the outer objective at one point.
#[derive(Clone, Debug)]
pub struct OuterGrads {
    pub loss: f64,
    pub alpha: Vec<f64>,
    pub w: Vec<f64>,
}

/// The two oracles the hypergradient estimator needs.
pub trait BilevelProblem {
    /// Outer loss and its gradients w.r.t. `α` and `w`.
    fn outer_grads(&mut self, w: &[f64], alpha: &[f64]) -> Result<OuterGrads>;
    /// Gradient of the inner objective w.r.t. `α` at `(w, α)`.
    fn inner_alpha_grad(&mut self, w: &[f64], alpha: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsilonRule {
    /// `0.01 / ‖∇W′ L_val‖₂`.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct Hypergradient {
    pub grad: Vec<f64>,
    /// `∇α L_val(W′, α)` alone.
    pub direct: Vec<f64>,
    /// Finite-difference estimate of `∇²_{α,W} G · ∇W′ L_val`.
    pub hessian_term: Vec<f64>,
    pub epsilon: f64,
    pub outer_loss: f64,
}

#[derive(Clone, Debug)]
pub enum HypergradOutcome {
    Step(Hypergradient),
    /// Validation gradient w.r.t. the task weights vanished; no α step this iteration.
    Degenerate { outer_loss: f64 },
}

/// Finite-difference hypergradient around the pre-update weights `w_pre`.
pub fn fd_hypergradient(
    problem: &mut dyn BilevelProblem,
    w_pre: &[f64],
    w_post: &[f64],
    alpha: &[f64],
    eta_w: f64,
    rule: EpsilonRule,
) -> Result<HypergradOutcome> {
    if w_pre.len() != w_post.len() {
        return Err(Error::dim("fd_hypergradient", &[w_pre.len()], &[w_post.len()]));
    }
    let outer = problem.outer_grads(w_post, alpha)?;
    let epsilon = match rule {
        EpsilonRule::Auto => match compute_epsilon(&outer.w) {
            Some(e) => e,
            None => return Ok(HypergradOutcome::Degenerate { outer_loss: outer.loss }),
        },
        EpsilonRule::Fixed(e) => e,
    };
    let perturbed = |sign: f64| -> Vec<f64> {
        w_pre.iter().zip(&outer.w).map(|(w, v)| w + sign * epsilon * v).collect()
    };
    let plus = problem.inner_alpha_grad(&perturbed(1.0), alpha)?;
    let minus = problem.inner_alpha_grad(&perturbed(-1.0), alpha)?;
    let hessian_term: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * epsilon)).collect();
    let grad: Vec<f64> = outer
        .alpha
        .iter()
        .zip(&hessian_term)
        .map(|(d, h)| d - eta_w * h)
        .collect();
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite hypergradient".into()));
    }
    Ok(HypergradOutcome::Step(Hypergradient {
        grad,
        direct: outer.alpha,
        hessian_term,
        epsilon,
        outer_loss: outer.loss,
    }))
}

/// Adapts a network and two batches to [`BilevelProblem`] over the flattened
/// mixup task weights and alpha factors.
pub struct NetworkProblem<'a> {
    pub net: &'a mut Network,
    pub val: (&'a Tensor, &'a Targets),
    pub train: (&'a Tensor, &'a Targets),
}

impl NetworkProblem<'_> {
    fn load(&mut self, w: &[f64], alpha: &[f64]) {
        self.net.set_mixup_weights_flat(w);
        debug_assert_eq!(alpha, self.net.alpha_flat().as_slice());
        self.net.zero_grad();
    }
}

impl BilevelProblem for NetworkProblem<'_> {
    fn outer_grads(&mut self, w: &[f64], alpha: &[f64]) -> Result<OuterGrads> {
        self.load(w, alpha);
        for p in self.net.params_mut(ParamRole::TaskWeight) {
            p.set_requires_grad(true);
        }
        self.net.set_alpha_trainable(true);
        let loss = self.net.loss_and_grad(self.val.0, self.val.1)?;
        let out = OuterGrads {
            loss,
            alpha: self.net.alpha_grads_flat(),
            w: self.net.mixup_weight_grads_flat(),
        };
        self.net.zero_grad();
        Ok(out)
    }

    fn inner_alpha_grad(&mut self, w: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
        self.load(w, alpha);
        self.net.set_weights_trainable(false);
        self.net.set_alpha_trainable(true);
        self.net.loss_and_grad(self.train.0, self.train.1)?;
        let g = self.net.alpha_grads_flat();
        self.net.zero_grad();
        self.net.set_weights_trainable(true);
        Ok(g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Weights,
    Alpha,
}

impl Stage {
    pub fn label(&self) -> &'static str {
        match self {
            Stage::Weights => "w",
            Stage::Alpha => "alpha",
        }
    }
}

/// One row of `steps.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub epsilon: Option<f64>,
    pub alpha_mean: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

pub const STEPS_CSV_HEADER: &str = "step,stage,loss,epsilon,alpha_mean,alpha_min,alpha_max";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let eps = self.epsilon.map(|e| format!("{e:e}")).unwrap_or_default();
        format!(
            "{},{},{:.10e},{},{:.10},{:.10},{:.10}",
            self.step,
            self.stage.label(),
            self.loss,
            eps,
            self.alpha_mean,
            self.alpha_min,
            self.alpha_max
        )
    }
}

fn record(net: &Network, step: usize, stage: Stage, loss: f64, epsilon: Option<f64>) -> StepRecord {
    let (lo, hi, mean) = net.alpha_stats().unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    StepRecord {
        step,
        stage,
        loss,
        epsilon,
        alpha_mean: mean,
        alpha_min: lo,
        alpha_max: hi,
    }
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub loss: f64,
    /// Mixup task weights before the update, flattened.
    pub w_pre: Vec<f64>,
}

/// Inner step: AdamW on task weights, biases and head; alpha factors untouched.
pub fn stage1_step(
    net: &mut Network,
    batch: (&Tensor, &Targets),
    opt_w: &mut AdamW,
    lr: f64,
) -> Result<Stage1Outcome> {
    net.set_alpha_trainable(false);
    net.set_weights_trainable(true);
    net.zero_grad();
    let w_pre = net.mixup_weights_flat();
    let loss = net.loss_and_grad(batch.0, batch.1)?;
    opt_w.step(&mut net.weight_params_mut(), lr)?;
    net.zero_grad();
    Ok(Stage1Outcome { loss, w_pre })
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub val_loss: f64,
    /// `None` when the step was skipped as degenerate.
    pub epsilon: Option<f64>,
    /// Factor entries that left `[0, 1]` before projection.
    pub clipped: usize,
}

/// Outer step: hypergradient, AdamW on the alpha factors, projection to `[0, 1]`.
///
/// `eta_w` is the inner learning rate used for this iteration.
#[allow(clippy::too_many_arguments)]
pub fn stage2_step(
    net: &mut Network,
    val_batch: (&Tensor, &Targets),
    train_batch: (&Tensor, &Targets),
    w_pre: &[f64],
    opt_alpha: &mut AdamW,
    eta_w: f64,
    lr_alpha: f64,
    rule: EpsilonRule,
) -> Result<Stage2Outcome> {
    let w_post = net.mixup_weights_flat();
    let alpha = net.alpha_flat();
    let outcome = {
        let mut problem = NetworkProblem {
            net: &mut *net,
            val: val_batch,
            train: train_batch,
        };
        fd_hypergradient(&mut problem, w_pre, &w_post, &alpha, eta_w, rule)
    };
    net.set_mixup_weights_flat(&w_post);
    net.set_weights_trainable(true);
    net.set_alpha_trainable(false);
    net.zero_grad();

    let hg = match outcome? {
        HypergradOutcome::Degenerate { outer_loss } => {
            log::debug!("alpha step skipped: vanishing validation gradient");
            return Ok(Stage2Outcome {
                val_loss: outer_loss,
                epsilon: None,
                clipped: 0,
            });
        }
        HypergradOutcome::Step(hg) => hg,
    };

    let mut off = 0;
    for p in net.params_mut(ParamRole::AlphaFactor) {
        let n = p.numel();
        p.accumulate_grad(&hg.grad[off..off + n])?;
        off += n;
    }
    opt_alpha.step(&mut net.params_mut(ParamRole::AlphaFactor), lr_alpha)?;
    let mut clipped = 0;
    for p in net.params_mut(ParamRole::AlphaFactor) {
        clipped += p.data().iter().filter(|x| !(0.0..=1.0).contains(*x)).count();
        p.clamp_(0.0, 1.0);
        p.zero_grad();
    }
    Ok(Stage2Outcome {
        val_loss: hg.outer_loss,
        epsilon: Some(hg.epsilon),
        clipped,
    })
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub coefficients: Vec<Coefficients>,
    /// Network state at the end of the search (task weights included).
    pub network: Network,
    pub steps: Vec<StepRecord>,
    pub skipped_alpha_steps: usize,
    /// Pre-projection violations summed over all alpha steps.
    pub clipped_entries: usize,
}

/// Runs `config.total_steps` alternating inner/outer iterations on `split`.
///
/// `observe` is called after every completed iteration.
pub fn search_phase_with(
    mut net: Network,
    data: &Dataset,
    split: &SplitPair,
    config: &SearchConfig,
    mut observe: impl FnMut(usize, &Network),
) -> Result<SearchOutcome> {
    config.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Config("search needs non-empty inner-train and inner-validation splits".into()));
    }
    if !net.has_mixup() {
        return Err(Error::Config("search needs at least one mixup layer".into()));
    }
    let mut train_batches = BatchCycler::new(split.train.clone(), config.batch_size, seed::derive(config.seed, "inner-train", 0))?;
    let mut val_batches = BatchCycler::new(split.val.clone(), config.batch_size, seed::derive(config.seed, "inner-val", 0))?;
    let (w_sched, a_sched) = (config.w_schedule(), config.alpha_schedule());
    let mut opt_w = config.w_optimizer();
    let mut opt_a = config.alpha_optimizer();
    let mut steps = Vec::with_capacity(2 * config.total_steps);
    let (mut skipped, mut clipped) = (0, 0);

    for t in 0..config.total_steps {
        let (xt, yt) = data.batch(&train_batches.next_batch())?;
        let (xv, yv) = data.batch(&val_batches.next_batch())?;
        let eta_w = w_sched.lr(t);
        let s1 = stage1_step(&mut net, (&xt, &yt), &mut opt_w, eta_w)?;
        steps.push(record(&net, t, Stage::Weights, s1.loss, None));
        let s2 = stage2_step(
            &mut net,
            (&xv, &yv),
            (&xt, &yt),
            &s1.w_pre,
            &mut opt_a,
            eta_w,
            a_sched.lr(t),
            EpsilonRule::Auto,
        )?;
        if s2.epsilon.is_none() {
            skipped += 1;
        }
        clipped += s2.clipped;
        steps.push(record(&net, t, Stage::Alpha, s2.val_loss, s2.epsilon));
        observe(t, &net);
    }
    Ok(SearchOutcome {
        coefficients: net.coefficients()?,
        network: net,
        steps,
        skipped_alpha_steps: skipped,
        clipped_entries: clipped,
    })
}

pub fn search_phase(net: Network, data: &Dataset, split: &SplitPair, config: &SearchConfig) -> Result<SearchOutcome> {
    search_phase_with(net, data, split, config, |_, _| {})
}

/// Element-wise mean of per-replicate coefficient lists, reduced in replicate order.
pub fn average_coefficients(results: &[Vec<Coefficients>]) -> Result<Vec<Coefficients>> {
    let first = results
        .first()
        .ok_or_else(|| Error::Input("no replicate results to average".into()))?;
    let k = results.len() as f64;
    let mut out = first.clone();
    for r in &results[1..] {
        if r.len() != out.len() {
            return Err(Error::Input("replicates disagree on the number of mixup layers".into()));
        }
        for (acc, c) in out.iter_mut().zip(r) {
            acc.task = acc.task.zip_with(&c.task, |a, b| a + b)?;
            acc.pretrained = acc.pretrained.zip_with(&c.pretrained, |a, b| a + b)?;
        }
    }
    for c in &mut out {
        c.task = c.task.map(|x| x / k);
        c.pretrained = c.pretrained.map(|x| x / k);
    }
    Ok(out)
}

fn average_factor_coefficients(nets: &[&Network]) -> Result<Vec<Coefficients>> {
    let mut template = nets[0].clone();
    let k = nets.len() as f64;
    for (li, layer) in template.mixup_layers_mut().enumerate() {
        let mut a1 = Tensor::zeros(layer.alpha1.shape());
        let mut a2 = Tensor::zeros(layer.alpha2.shape());
        for n in nets {
            let src = n
                .mixup_layers()
                .nth(li)
                .ok_or_else(|| Error::Input("replicates disagree on the number of mixup layers".into()))?;
            a1 = a1.zip_with(&src.alpha1, |a, b| a + b)?;
            a2 = a2.zip_with(&src.alpha2, |a, b| a + b)?;
        }
        layer.alpha1 = a1.map(|x| x / k);
        layer.alpha2 = a2.map(|x| x / k);
    }
    template.coefficients()
}

#[derive(Clone, Debug)]
pub struct ReplicateSearch {
    pub coefficients: Vec<Coefficients>,
    pub replicates: Vec<SearchOutcome>,
    pub splits: Vec<SplitPair>,
}

/// Runs the search on `config.replicates` resampled splits and averages the result.
///
/// Replicate `k` uses seed `config.seed + k` for its split, its batches and the
/// fresh network produced by `make_net`.
pub fn k_replicate_search(
    data: &Dataset,
    config: &SearchConfig,
    mut make_net: impl FnMut(u64) -> Result<Network>,
) -> Result<ReplicateSearch> {
    config.validate()?;
    let mut replicates = Vec::with_capacity(config.replicates);
    let mut splits = Vec::with_capacity(config.replicates);
    for k in 0..config.replicates as u64 {
        let rep_seed = config.seed.wrapping_add(k);
        let split = split_indices(data.len(), config.split_ratio, seed::derive(rep_seed, "split", 0))?;
        let cfg = SearchConfig {
            seed: rep_seed,
            ..config.clone()
        };
        replicates.push(search_phase(make_net(rep_seed)?, data, &split, &cfg)?);
        splits.push(split);
    }
    let coefficients = match config.averaging {
        Averaging::Coefficients => {
            let all: Vec<Vec<Coefficients>> = replicates.iter().map(|r| r.coefficients.clone()).collect();
            average_coefficients(&all)?
        }
        Averaging::Factors => {
            let nets: Vec<&Network> = replicates.iter().map(|r| &r.network).collect();
            average_factor_coefficients(&nets)?
        }
    };
    Ok(ReplicateSearch {
        coefficients,
        replicates,
        splits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 3,
            lr: 2e-5,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size.max(1))
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub network: Network,
    pub losses: Vec<f64>,
}

/// Trains task weights, biases and head on all of `data` with fixed mixing
/// coefficients. Mixup layers are frozen at `coefficients` when given,
/// otherwise at their current composition. Plain networks train as-is.
pub fn finetune_phase(
    mut net: Network,
    data: &Dataset,
    coefficients: Option<&[Coefficients]>,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if net.has_mixup() {
        let coefs = match coefficients {
            Some(c) => c.to_vec(),
            None => net.coefficients()?,
        };
        net.freeze_coefficients(&coefs)?;
    }
    net.set_alpha_trainable(false);
    net.set_weights_trainable(true);
    let total = config.total_steps(data.len());
    let sched = LrSchedule::with_ratio(config.lr, config.warmup_ratio, total);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let mut batches = BatchCycler::new((0..data.len()).collect(), config.batch_size, seed::derive(config.seed, "finetune", 0))?;
    let mut losses = Vec::with_capacity(total);
    for t in 0..total {
        let (x, y) = data.batch(&batches.next_batch())?;
        net.zero_grad();
        losses.push(net.loss_and_grad(&x, &y)?);
        opt.step(&mut net.weight_params_mut(), sched.lr(t))?;
    }
    net.zero_grad();
    Ok(FinetuneOutcome { network: net, losses })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    pub finetune: FinetuneConfig,
    pub lr_alpha: f64,
    pub warmup_ratio_alpha: f64,
    pub weight_decay_alpha: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            finetune: FinetuneConfig::default(),
            lr_alpha: 2e-3,
            warmup_ratio_alpha: 0.1,
            weight_decay_alpha: 0.01,
        }
    }
}

/// Single-level ablation: task weights and alpha factors descend the same
/// training loss together on all of `data`.
pub fn joint_phase(mut net: Network, data: &Dataset, config: &JointConfig) -> Result<FinetuneOutcome> {
    let ft = &config.finetune;
    if ft.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    net.set_weights_trainable(true);
    net.set_alpha_trainable(true);
    let total = ft.total_steps(data.len());
    let w_sched = LrSchedule::with_ratio(ft.lr, ft.warmup_ratio, total);
    let a_sched = LrSchedule::with_ratio(config.lr_alpha, config.warmup_ratio_alpha, total);
    let mut opt_w = AdamW::new(AdamWConfig {
        weight_decay: ft.weight_decay,
        ..Default::default()
    });
    let mut opt_a = AdamW::new(AdamWConfig {
        weight_decay: config.weight_decay_alpha,
        ..Default::default()
    });
    let mut batches = BatchCycler::new((0..data.len()).collect(), ft.batch_size, seed::derive(ft.seed, "finetune", 0))?;
    let mut losses = Vec::with_capacity(total);
    for t in 0..total {
        let (x, y) = data.batch(&batches.next_batch())?;
        net.zero_grad();
        losses.push(net.loss_and_grad(&x, &y)?);
        opt_w.step(&mut net.weight_params_mut(), w_sched.lr(t))?;
        if net.has_mixup() {
            opt_a.step(&mut net.params_mut(ParamRole::AlphaFactor), a_sched.lr(t))?;
            for p in net.params_mut(ParamRole::AlphaFactor) {
                p.clamp_(0.0, 1.0);
            }
        }
    }
    net.set_alpha_trainable(false);
    net.zero_grad();
    Ok(FinetuneOutcome { network: net, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Activation;
    use crate::model::{AlphaInit, TaskKind};

    #[test]
    fn epsilon_examples() {
        assert_eq!(compute_epsilon(&[1.0]), Some(0.01));
        assert!((compute_epsilon(&[3.0, 4.0]).unwrap() - 0.002).abs() < 1e-18);
        assert_eq!(compute_epsilon(&[0.0, 0.0]), None);
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        let bad = SearchConfig { split_ratio: 1.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = SearchConfig { replicates: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn averaging_two_stubbed_results() {
        let c = |a: f64, b: f64| Coefficients {
            task: Tensor::full(&[2, 2], a),
            pretrained: Tensor::full(&[2, 2], b),
        };
        let avg = average_coefficients(&[vec![c(1.0, 0.0)], vec![c(0.5, 0.25)]]).unwrap();
        assert_eq!(avg[0].task.data(), &[0.75; 4]);
        assert_eq!(avg[0].pretrained.data(), &[0.125; 4]);
        let single = average_coefficients(&[vec![c(0.3, 0.7)]]).unwrap();
        assert_eq!(single, vec![c(0.3, 0.7)]);
        assert!(average_coefficients(&[]).is_err());
    }

    fn tiny_setup() -> (Network, Dataset) {
        let task = TaskKind::Classification { classes: 2 };
        let base = Network::plain(3, &[4], Activation::Tanh, task, 11).unwrap();
        let init = AlphaInit { rank: 1, mean: 1.0, std: 0.1, seed: 5 };
        let net = Network::from_pretrained(&base, task, Some(init), 2).unwrap();
        let feats: Vec<f64> = (0..30).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let labels = (0..10).map(|i| (i * 3 % 2) as usize).collect();
        let ds = Dataset::new("t", Tensor::new(&[10, 3], feats).unwrap(), Targets::Classes(labels), task).unwrap();
        (net, ds)
    }

    #[test]
    fn empty_split_is_config_error() {
        let (net, ds) = tiny_setup();
        let split = SplitPair { train: vec![0, 1], val: vec![] };
        assert!(matches!(search_phase(net, &ds, &split, &SearchConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn zero_steps_returns_initial_coefficients() {
        let (net, ds) = tiny_setup();
        let initial = net.coefficients().unwrap();
        let split = split_indices(ds.len(), 0.8, 0).unwrap();
        let cfg = SearchConfig { total_steps: 0, ..Default::default() };
        let out = search_phase(net, &ds, &split, &cfg).unwrap();
        assert_eq!(out.coefficients, initial);
        assert!(out.steps.is_empty());
    }

    #[test]
    fn zero_alpha_lr_keeps_coefficients() {
        let (net, ds) = tiny_setup();
        let initial = net.coefficients().unwrap();
        let split = split_indices(ds.len(), 0.8, 0).unwrap();
        let cfg = SearchConfig {
            total_steps: 15,
            eta_w: 1e-2,
            eta_alpha: 0.0,
            batch_size: 4,
            ..Default::default()
        };
        let out = search_phase(net, &ds, &split, &cfg).unwrap();
        assert_eq!(out.coefficients, initial);
        assert_eq!(out.steps.len(), 30);
    }

    #[test]
    fn search_is_deterministic() {
        let (net, ds) = tiny_setup();
        let split = split_indices(ds.len(), 0.8, 0).unwrap();
        let cfg = SearchConfig {
            total_steps: 10,
            eta_w: 1e-2,
            eta_alpha: 0.05,
            batch_size: 4,
            ..Default::default()
        };
        let a = search_phase(net.clone(), &ds, &split, &cfg).unwrap();
        let b = search_phase(net, &ds, &split, &cfg).unwrap();
        assert_eq!(a.coefficients, b.coefficients);
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn step_record_csv() {
        let r = StepRecord {
            step: 3,
            stage: Stage::Alpha,
            loss: 0.5,
            epsilon: Some(0.002),
            alpha_mean: 0.9,
            alpha_min: 0.8,
            alpha_max: 1.0,
        };
        assert_eq!(r.csv_line().split(',').count(), STEPS_CSV_HEADER.split(',').count());
        assert!(r.csv_line().starts_with("3,alpha,"));
    }
}
