//! Helpers shared by the integration suites.
#![allow(dead_code)]

use attmix::model::{AlphaInit, ParamRole};
use attmix::{Activation, Network, Targets, TaskKind, Tensor};
use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller keeps this independent of the library's own sampler.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// A small mixup network whose task weights differ from the pretrained ones
/// and whose alpha factors sit strictly inside (0, 1), plus a batch to
/// evaluate it on. Parameter count stays below 200.
pub fn random_mixup_problem(seed: u64) -> (Network, Tensor, Targets) {
    let mut r = rng(seed);
    let input = r.gen_range(2..=4);
    let depth = r.gen_range(1..=2);
    let widths: Vec<usize> = (0..depth).map(|_| r.gen_range(2..=4)).collect();
    let regression = seed % 3 == 0;
    let task = if regression {
        TaskKind::Regression
    } else {
        TaskKind::Classification { classes: r.gen_range(2..=3) }
    };
    let activation = if seed % 2 == 0 { Activation::Tanh } else { Activation::Relu };
    let pre = Network::plain(input, &widths, activation, task, seed).unwrap();
    let rank = r.gen_range(1..=2);
    let mut net = Network::from_pretrained(
        &pre,
        task,
        Some(AlphaInit { rank, mean: 0.5, std: 0.0, seed }),
        seed + 1,
    )
    .unwrap();
    for p in net.params_mut(ParamRole::TaskWeight) {
        let noise = gaussian_tensor(p.shape(), 0.3, &mut r);
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    for p in net.params_mut(ParamRole::AlphaFactor) {
        for x in p.data_mut() {
            *x = r.gen_range(0.1..0.9);
        }
    }
    for p in net.params_mut(ParamRole::Plain) {
        let noise = gaussian_tensor(p.shape(), 0.3, &mut r);
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    let batch = r.gen_range(3..=6);
    let x = gaussian_tensor(&[batch, input], 1.0, &mut r);
    let y = match task {
        TaskKind::Regression => Targets::Reals((0..batch).map(|_| r.gen_range(-1.0..1.0)).collect()),
        TaskKind::Classification { classes } => Targets::Classes((0..batch).map(|_| r.gen_range(0..classes)).collect()),
    };
    (net, x, y)
}

pub fn trainable_count(net: &mut Network) -> usize {
    [ParamRole::TaskWeight, ParamRole::AlphaFactor, ParamRole::Plain]
        .into_iter()
        .map(|role| net.params_mut(role).iter().map(|p| p.numel()).sum::<usize>())
        .sum()
}

/// Worst relative error between backprop and central differences over every
/// trainable entry. Entries where both are below `floor` are skipped.
pub fn worst_gradient_error(net: &Network, x: &Tensor, y: &Targets, h: f64, floor: f64) -> (f64, usize) {
    let mut analytic = net.clone();
    analytic.set_weights_trainable(true);
    analytic.set_alpha_trainable(true);
    analytic.zero_grad();
    analytic.loss_and_grad(x, y).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for role in [ParamRole::TaskWeight, ParamRole::AlphaFactor, ParamRole::Plain] {
        let grads: Vec<Vec<f64>> = analytic
            .params_mut(role)
            .iter()
            .map(|p| p.grad().map_or(vec![0.0; p.numel()], <[f64]>::to_vec))
            .collect();
        let count = grads.len();
        for (pi, g) in grads.iter().enumerate().take(count) {
            for (i, &a) in g.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut probe = net.clone();
                    probe.params_mut(role)[pi].data_mut()[i] += delta;
                    probe.loss(x, y).unwrap()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let scale = a.abs().max(numeric.abs());
                if scale < floor {
                    continue;
                }
                worst = worst.max((a - numeric).abs() / scale);
                checked += 1;
            }
        }
    }
    (worst, checked)
}

/// Forward-mode dual number: value plus one directional derivative.
#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn c(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    pub fn var(v: f64) -> Self {
        Dual { v, d: 1.0 }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}

impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}

/// Bilevel toy over `n` scalars mixed entry-wise, `g = α⊙w + (1−α)⊙w₀`, with
/// `L_tr = ½‖A g − a‖²` (or `¼Σ(A g − a)⁴` when `quartic`) and `L_val = ½‖B g − b‖²`.
#[derive(Clone, Debug)]
pub struct MixToy {
    pub w0: Vec<f64>,
    pub a_mat: Vec<Vec<f64>>,
    pub a: Vec<f64>,
    pub b_mat: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub quartic: bool,
}

impl MixToy {
    pub fn scalar() -> Self {
        MixToy {
            w0: vec![0.4],
            a_mat: vec![vec![1.3]],
            a: vec![1.1],
            b_mat: vec![vec![0.9]],
            b: vec![-0.6],
            quartic: false,
        }
    }

    pub fn two_param() -> Self {
        MixToy {
            w0: vec![0.4, -0.2],
            a_mat: vec![vec![1.2, 0.3], vec![-0.4, 0.9]],
            a: vec![0.7, -1.1],
            b_mat: vec![vec![0.8, -0.5], vec![0.2, 1.4]],
            b: vec![-0.3, 0.6],
            quartic: false,
        }
    }

    pub fn mix(&self, w: &[Dual], alpha: &[Dual]) -> Vec<Dual> {
        w.iter()
            .zip(alpha)
            .zip(&self.w0)
            .map(|((&w, &al), &w0)| al * w + (Dual::c(1.0) - al) * Dual::c(w0))
            .collect()
    }

    fn residual(m: &[Vec<f64>], t: &[f64], g: &[Dual]) -> Vec<Dual> {
        m.iter()
            .zip(t)
            .map(|(row, &ti)| row.iter().zip(g).fold(Dual::c(-ti), |acc, (&mij, &gj)| acc + Dual::c(mij) * gj))
            .collect()
    }

    /// `∂L/∂g` for the training loss.
    fn train_g_grad(&self, g: &[Dual]) -> Vec<Dual> {
        let r = Self::residual(&self.a_mat, &self.a, g);
        let r: Vec<Dual> = if self.quartic { r.iter().map(|&x| x * x * x).collect() } else { r };
        (0..g.len())
            .map(|j| self.a_mat.iter().zip(&r).fold(Dual::c(0.0), |acc, (row, &ri)| acc + Dual::c(row[j]) * ri))
            .collect()
    }

    fn val_g_grad(&self, g: &[Dual]) -> Vec<Dual> {
        let r = Self::residual(&self.b_mat, &self.b, g);
        (0..g.len())
            .map(|j| self.b_mat.iter().zip(&r).fold(Dual::c(0.0), |acc, (row, &ri)| acc + Dual::c(row[j]) * ri))
            .collect()
    }

    pub fn val_loss(&self, g: &[Dual]) -> Dual {
        Self::residual(&self.b_mat, &self.b, g)
            .iter()
            .fold(Dual::c(0.0), |acc, &r| acc + Dual::c(0.5) * r * r)
    }

    /// `(∂L_tr/∂w, ∂L_tr/∂α)`.
    pub fn train_grads(&self, w: &[Dual], alpha: &[Dual]) -> (Vec<Dual>, Vec<Dual>) {
        let gg = self.train_g_grad(&self.mix(w, alpha));
        let dw = gg.iter().zip(alpha).map(|(&g, &a)| g * a).collect();
        let da = gg.iter().zip(w).zip(&self.w0).map(|((&g, &w), &w0)| g * (w - Dual::c(w0))).collect();
        (dw, da)
    }

    pub fn sgd_step(&self, w: &[Dual], alpha: &[Dual], eta: f64) -> Vec<Dual> {
        let (dw, _) = self.train_grads(w, alpha);
        w.iter().zip(dw).map(|(&w, g)| w - Dual::c(eta) * g).collect()
    }

    /// Exact `dL_val(w′(α), α)/dα` of the one-step unrolled objective, by forward mode.
    pub fn unrolled_hypergradient(&self, w: &[f64], alpha: &[f64], eta: f64) -> Vec<f64> {
        (0..alpha.len())
            .map(|k| {
                let a: Vec<Dual> = alpha.iter().enumerate().map(|(i, &x)| if i == k { Dual::var(x) } else { Dual::c(x) }).collect();
                let wd: Vec<Dual> = w.iter().map(|&x| Dual::c(x)).collect();
                let w1 = self.sgd_step(&wd, &a, eta);
                self.val_loss(&self.mix(&w1, &a)).d
            })
            .collect()
    }

    /// Exact `∇²_{αw} L_tr(w) · v`.
    pub fn mixed_hvp(&self, w: &[f64], alpha: &[f64], v: &[f64]) -> Vec<f64> {
        let wd: Vec<Dual> = w.iter().zip(v).map(|(&x, &d)| Dual { v: x, d }).collect();
        let a: Vec<Dual> = alpha.iter().map(|&x| Dual::c(x)).collect();
        self.train_grads(&wd, &a).1.iter().map(|x| x.d).collect()
    }
}

impl attmix::blo::BilevelProblem for MixToy {
    fn outer_grads(&mut self, w: &[f64], alpha: &[f64]) -> attmix::Result<attmix::blo::OuterGrads> {
        let wd: Vec<Dual> = w.iter().map(|&x| Dual::c(x)).collect();
        let a: Vec<Dual> = alpha.iter().map(|&x| Dual::c(x)).collect();
        let g = self.mix(&wd, &a);
        let gg = self.val_g_grad(&g);
        Ok(attmix::blo::OuterGrads {
            loss: self.val_loss(&g).v,
            alpha: gg.iter().zip(w).zip(&self.w0).map(|((g, w), w0)| g.v * (w - w0)).collect(),
            w: gg.iter().zip(alpha).map(|(g, a)| g.v * a).collect(),
        })
    }

    fn inner_alpha_grad(&mut self, w: &[f64], alpha: &[f64]) -> attmix::Result<Vec<f64>> {
        let wd: Vec<Dual> = w.iter().map(|&x| Dual::c(x)).collect();
        let a: Vec<Dual> = alpha.iter().map(|&x| Dual::c(x)).collect();
        Ok(self.train_grads(&wd, &a).1.iter().map(|x| x.v).collect())
    }
}

/// Runs the estimator on `toy` after one plain-SGD inner step from `w`.
pub fn toy_hypergradient(toy: &mut MixToy, w: &[f64], alpha: &[f64], eta: f64, eps: f64) -> attmix::blo::Hypergradient {
    use attmix::blo::{fd_hypergradient, EpsilonRule, HypergradOutcome};
    let wd: Vec<Dual> = w.iter().map(|&x| Dual::c(x)).collect();
    let a: Vec<Dual> = alpha.iter().map(|&x| Dual::c(x)).collect();
    let w1: Vec<f64> = toy.sgd_step(&wd, &a, eta).iter().map(|x| x.v).collect();
    match fd_hypergradient(toy, w, &w1, alpha, eta, EpsilonRule::Fixed(eps)).unwrap() {
        HypergradOutcome::Step(h) => h,
        HypergradOutcome::Degenerate { .. } => panic!("fixed epsilon never degenerates"),
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / (den + 1e-12)
}

/// Error of the finite-difference Hessian term against the exact mixed product.
pub fn hessian_term_error(toy: &mut MixToy, w: &[f64], alpha: &[f64], eta: f64, eps: f64) -> f64 {
    let h = toy_hypergradient(toy, w, alpha, eta, eps);
    let wd: Vec<Dual> = w.iter().map(|&x| Dual::c(x)).collect();
    let a: Vec<Dual> = alpha.iter().map(|&x| Dual::c(x)).collect();
    let w1: Vec<f64> = toy.sgd_step(&wd, &a, eta).iter().map(|x| x.v).collect();
    let v = attmix::blo::BilevelProblem::outer_grads(toy, &w1, alpha).unwrap().w;
    let exact = toy.mixed_hvp(w, alpha, &v);
    h.hessian_term.iter().zip(&exact).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

use attmix::blo::{search_phase_with, SearchConfig};
use attmix::data::{split_indices, BatchCycler, Dataset};
use attmix::optim::{AdamW, AdamWConfig};
use attmix::synthetic::{make_synthetic_transfer, SyntheticTaskSpec};

/// Small synthetic downstream set plus an untrained plain network standing in
/// for the pretrained one.
pub fn small_transfer(seed: u64, n: usize) -> (Network, Dataset) {
    let spec = SyntheticTaskSpec {
        input_dim: 6,
        source_n: 2 * n + 10,
        target_n: n,
        test_n: 50,
        seed,
        ..SyntheticTaskSpec::default()
    };
    let data = make_synthetic_transfer(&spec).unwrap();
    let task = TaskKind::Classification { classes: 2 };
    let pre = Network::plain(6, &[8, 8], Activation::Tanh, task, seed).unwrap();
    (pre, data.target)
}

/// Largest element-wise gap between the search-phase weight trajectory with
/// all-ones alpha and `eta_alpha = 0`, and plain AdamW finetuning of the same
/// weights on the same batch order.
pub fn vanilla_equivalence_gap(steps: usize, seed: u64) -> f64 {
    let (pre, data) = small_transfer(seed, 120);
    let task = TaskKind::Classification { classes: 2 };
    let config = SearchConfig {
        eta_w: 1e-2,
        eta_alpha: 0.0,
        total_steps: steps,
        batch_size: 8,
        seed,
        ..SearchConfig::default()
    };
    let split = split_indices(data.len(), config.split_ratio, seed).unwrap();
    let ones = AlphaInit { rank: 1, mean: 1.0, std: 0.0, seed };
    let mixup = Network::from_pretrained(&pre, task, Some(ones), seed + 7).unwrap();
    let mut searched: Vec<Vec<f64>> = Vec::with_capacity(steps);
    search_phase_with(mixup, &data, &split, &config, |_, net| searched.push(all_weights(net))).unwrap();

    let mut plain = Network::from_pretrained(&pre, task, None, seed + 7).unwrap();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: config.lambda1, ..Default::default() });
    let sched = config.w_schedule();
    let mut batches = BatchCycler::new(
        split.train.clone(),
        config.batch_size,
        attmix::seed::derive(seed, "inner-train", 0),
    )
    .unwrap();
    let mut worst = 0.0f64;
    for (t, snapshot) in searched.iter().enumerate() {
        let (x, y) = data.batch(&batches.next_batch()).unwrap();
        plain.zero_grad();
        plain.loss_and_grad(&x, &y).unwrap();
        opt.step(&mut plain.weight_params_mut(), sched.lr(t)).unwrap();
        let reference = all_weights(&plain);
        assert_eq!(reference.len(), snapshot.len());
        for (a, b) in reference.iter().zip(snapshot) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Every hidden weight, bias and head entry, in layer order.
pub fn all_weights(net: &Network) -> Vec<f64> {
    let mut clone = net.clone();
    clone.weight_params_mut().iter().flat_map(|p| p.data().to_vec()).collect()
}

pub struct ProjectionRun {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub checksum_before: u64,
    pub checksum_after: u64,
    pub clipped: usize,
    pub steps: usize,
}

fn pretrained_checksum(net: &Network) -> u64 {
    net.params(ParamRole::FrozenPretrained)
        .iter()
        .fold(0u64, |acc, t| acc.rotate_left(7) ^ t.checksum())
}

/// Search run with an aggressive alpha rate, tracking the factor range after
/// every step and the pretrained checksum before and after.
pub fn projection_run(steps: usize, seed: u64) -> ProjectionRun {
    let (pre, data) = small_transfer(seed, 120);
    let task = TaskKind::Classification { classes: 2 };
    let config = SearchConfig {
        eta_w: 1e-2,
        eta_alpha: 0.05,
        total_steps: steps,
        batch_size: 8,
        seed,
        ..SearchConfig::default()
    };
    let split = split_indices(data.len(), config.split_ratio, seed).unwrap();
    let init = AlphaInit { rank: 2, mean: 1.0, std: 0.005, seed };
    let net = Network::from_pretrained(&pre, task, Some(init), seed + 1).unwrap();
    let checksum_before = pretrained_checksum(&net);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let out = search_phase_with(net, &data, &split, &config, |_, n| {
        let (a, b, _) = n.alpha_stats().unwrap();
        lo = lo.min(a);
        hi = hi.max(b);
    })
    .unwrap();
    ProjectionRun {
        alpha_min: lo,
        alpha_max: hi,
        checksum_before,
        checksum_after: pretrained_checksum(&out.network),
        clipped: out.clipped_entries,
        steps: out.steps.len() / 2,
    }
}

/// `(case, computed, expected, tolerance)` for the hand-evaluated metric cases.
pub fn metric_cases() -> Vec<(&'static str, f64, f64, f64)> {
    use attmix::metrics::{accuracy, f1, mcc, pearson, spearman};
    let perfect = [1, 0, 1, 1, 0, 0];
    let balanced = [1, 0, 1, 0, 1, 0];
    let all_pos = [1; 6];
    // TP=2, TN=1, FP=1, FN=1
    let target = [1, 1, 0, 0, 1];
    let pred = [1, 1, 0, 1, 0];
    vec![
        ("accuracy perfect", accuracy(&perfect, &perfect).unwrap(), 1.0, 0.0),
        ("f1 perfect", f1(&perfect, &perfect).unwrap(), 1.0, 0.0),
        ("mcc perfect", mcc(&perfect, &perfect).unwrap(), 1.0, 0.0),
        ("mcc all-positive", mcc(&all_pos, &balanced).unwrap(), 0.0, 0.0),
        ("accuracy 2/1/1/1", accuracy(&pred, &target).unwrap(), 3.0 / 5.0, 0.0),
        ("f1 2/1/1/1", f1(&pred, &target).unwrap(), 4.0 / 6.0, 1e-15),
        ("mcc 2/1/1/1", mcc(&pred, &target).unwrap(), 1.0 / 6.0, 1e-15),
        ("spearman reversed", spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[9.0, 7.0, 4.0, 0.5, -3.0]).unwrap(), -1.0, 1e-12),
        ("spearman ties", spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.9486832980505138, 1e-12),
        ("pearson affine", pearson(&[1.0, 2.0, 4.0, 7.0], &[3.0, 5.0, 9.0, 15.0]).unwrap(), 1.0, 1e-12),
        ("pearson hand", pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5, 1e-12),
    ]
}

/// `(α≡1 gives W exactly, α≡0 gives W₀ exactly, bound violations over `pairs` random factor pairs)`.
pub fn mixup_identities(pairs: usize) -> (bool, bool, usize) {
    use attmix::model::{compose_alpha, MixupLinearLayer};
    let mut r = rng(11);
    let w0 = gaussian_tensor(&[5, 4], 1.0, &mut r);
    let bias = Tensor::zeros(&[5]);
    let make = |value: f64| {
        let mut l = MixupLinearLayer::new(w0.clone(), bias.clone(), Tensor::full(&[5, 2], value), Tensor::full(&[2, 4], value)).unwrap();
        l.weight = gaussian_tensor(&[5, 4], 1.0, &mut rng(12));
        l
    };
    let ones = make(1.0);
    let zeros = make(0.0);
    let ones_ok = ones.mix_weights().unwrap().data() == ones.weight.data();
    let zeros_ok = zeros.mix_weights().unwrap().data() == w0.data();
    let mut violations = 0;
    for _ in 0..pairs {
        let rank = r.gen_range(1..=3);
        let (n, m) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let a1 = Tensor::new(&[n, rank], (0..n * rank).map(|_| r.gen_range(0.0..=1.0)).collect()).unwrap();
        let a2 = Tensor::new(&[rank, m], (0..rank * m).map(|_| r.gen_range(0.0..=1.0)).collect()).unwrap();
        let c = compose_alpha(&a1, &a2, rank).unwrap();
        let c0 = compose_alpha(&a1.map(|x| 1.0 - x), &a2.map(|x| 1.0 - x), rank).unwrap();
        violations += c.data().iter().chain(c0.data()).filter(|x| !(0.0..=1.0).contains(*x)).count();
    }
    (ones_ok, zeros_ok, violations)
}
