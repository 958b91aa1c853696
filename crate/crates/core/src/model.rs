//! Feed-forward networks whose hidden linear layers interpolate between a
//! trainable task weight and a frozen pretrained weight.
//!
//! For a mixup layer with factors `α₁ ∈ [0,1]^{N×r}`, `α₂ ∈ [0,1]^{r×M}` the
//! weight used in the forward pass is
//!
//! ```text
//! W̃ = (α₁α₂ / r) ⊙ W + ((1−α₁)(1−α₂) / r) ⊙ W₀
//! ```
//!
//! The output head never mixes: it has no pretrained counterpart.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::seed;
use crate::tensor::Tensor;

/// Standard deviation for freshly initialized heads.
pub const HEAD_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

impl TaskKind {
    pub fn output_dim(&self) -> usize {
        match self {
            TaskKind::Classification { classes } => *classes,
            TaskKind::Regression => 1,
        }
    }
}

/// Supervision for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Reals(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Reals(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    TaskWeight,
    AlphaFactor,
    FrozenPretrained,
    Plain,
}

/// Draws `α₁[n×r]`, `α₂[r×m]` i.i.d. from `N(mu, sigma)` and clips to `[0, 1]`.
pub fn init_alpha(n: usize, m: usize, r: usize, mu: f64, sigma: f64, seed: u64) -> Result<(Tensor, Tensor)> {
    if n == 0 || m == 0 || r == 0 {
        return Err(Error::Input(format!("init_alpha: dims must be positive, got n={n} m={m} r={r}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Input(format!("init_alpha: sigma must be >= 0, got {sigma}")));
    }
    let normal = Normal::new(mu, sigma).map_err(|e| Error::Input(e.to_string()))?;
    let mut rng = seed::rng(seed);
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len).map(|_| normal.sample(&mut rng).clamp(0.0, 1.0)).collect()
    };
    let a1 = draw(n * r);
    let a2 = draw(r * m);
    Ok((Tensor::new(&[n, r], a1)?, Tensor::new(&[r, m], a2)?))
}

/// `α₁α₂ / r`.
pub fn compose_alpha(alpha1: &Tensor, alpha2: &Tensor, r: usize) -> Result<Tensor> {
    let (_, r1) = alpha1.dims2()?;
    let (r2, _) = alpha2.dims2()?;
    if r1 != r || r2 != r {
        return Err(Error::dim("compose_alpha", alpha1.shape(), alpha2.shape()));
    }
    let prod = alpha1.matmul(alpha2)?;
    let inv = 1.0 / r as f64;
    Ok(prod.map(|x| x * inv))
}

/// Fixed per-entry mixing coefficients `(C_W, C_W0)` of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients {
    pub task: Tensor,
    pub pretrained: Tensor,
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    /// `[out × in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn gaussian(out_dim: usize, in_dim: usize, std: f64, seed: u64) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut rng = seed::rng(seed);
        let w = (0..out_dim * in_dim).map(|_| normal.sample(&mut rng)).collect();
        LinearLayer {
            weight: Tensor::new(&[out_dim, in_dim], w).expect("positive dims").with_requires_grad(true),
            bias: Tensor::zeros(&[out_dim]).with_requires_grad(true),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MixupLinearLayer {
    pub weight: Tensor,
    pub pretrained: Tensor,
    pub alpha1: Tensor,
    pub alpha2: Tensor,
    pub rank: usize,
    pub bias: Tensor,
    /// When set, the layer mixes with these constants instead of the factors.
    pub frozen: Option<Coefficients>,
}

impl MixupLinearLayer {
    /// Task weight starts as a copy of the pretrained one.
    pub fn new(pretrained: Tensor, bias: Tensor, alpha1: Tensor, alpha2: Tensor) -> Result<Self> {
        let (n, m) = pretrained.dims2()?;
        let (n1, r) = alpha1.dims2()?;
        let (r2, m2) = alpha2.dims2()?;
        if n1 != n || m2 != m || r2 != r {
            return Err(Error::dim("mixup_layer", &[n, m], &[n1, r, r2, m2]));
        }
        if bias.shape() != [n] {
            return Err(Error::dim("mixup_layer bias", &[n], bias.shape()));
        }
        Ok(MixupLinearLayer {
            weight: pretrained.clone().with_requires_grad(true),
            pretrained: pretrained.with_requires_grad(false),
            alpha1: alpha1.with_requires_grad(false),
            alpha2: alpha2.with_requires_grad(false),
            rank: r,
            bias: bias.with_requires_grad(true),
            frozen: None,
        })
    }

    /// Current `(C_W, C_W0)`: frozen constants if set, otherwise composed from the factors.
    pub fn coefficients(&self) -> Result<Coefficients> {
        if let Some(c) = &self.frozen {
            return Ok(c.clone());
        }
        let task = compose_alpha(&self.alpha1, &self.alpha2, self.rank)?;
        let c1 = self.alpha1.map(|x| 1.0 - x);
        let c2 = self.alpha2.map(|x| 1.0 - x);
        let pretrained = compose_alpha(&c1, &c2, self.rank)?;
        Ok(Coefficients { task, pretrained })
    }

    /// The resultant weight `W̃`, evaluated eagerly.
    pub fn mix_weights(&self) -> Result<Tensor> {
        let c = self.coefficients()?;
        let a = c.task.zip_with(&self.weight, |x, y| x * y)?;
        let b = c.pretrained.zip_with(&self.pretrained, |x, y| x * y)?;
        a.zip_with(&b, |x, y| x + y)
    }

    pub fn freeze(&mut self, coefficients: Coefficients) -> Result<()> {
        if coefficients.task.shape() != self.weight.shape()
            || coefficients.pretrained.shape() != self.weight.shape()
        {
            return Err(Error::dim(
                "freeze",
                self.weight.shape(),
                coefficients.task.shape(),
            ));
        }
        self.alpha1.set_requires_grad(false);
        self.alpha2.set_requires_grad(false);
        self.frozen = Some(coefficients);
        Ok(())
    }

    /// Records `W̃` into `g`, returning it with the leaf handles it used.
    fn record(&self, g: &mut Graph) -> Result<(Var, Vec<(Slot, Var)>)> {
        let w = g.leaf(&self.weight);
        let w0 = g.constant(&self.pretrained);
        let mut leaves = vec![(Slot::Weight, w)];
        let (cw, cw0) = match &self.frozen {
            Some(c) => (g.constant(&c.task), g.constant(&c.pretrained)),
            None => {
                let a1 = g.leaf(&self.alpha1);
                let a2 = g.leaf(&self.alpha2);
                leaves.push((Slot::Alpha1, a1));
                leaves.push((Slot::Alpha2, a2));
                let inv = 1.0 / self.rank as f64;
                let f = g.matmul(a1, a2)?;
                let cw = g.scale(f, inv);
                let b1 = g.one_minus(a1);
                let b2 = g.one_minus(a2);
                let f0 = g.matmul(b1, b2)?;
                let cw0 = g.scale(f0, inv);
                (cw, cw0)
            }
        };
        let t = g.mul(cw, w)?;
        let p = g.mul(cw0, w0)?;
        Ok((g.add(t, p)?, leaves))
    }
}

#[derive(Clone, Debug)]
pub enum HiddenLayer {
    Plain(LinearLayer),
    Mixup(MixupLinearLayer),
}

impl HiddenLayer {
    pub fn out_dim(&self) -> usize {
        match self {
            HiddenLayer::Plain(l) => l.weight.shape()[0],
            HiddenLayer::Mixup(l) => l.weight.shape()[0],
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            HiddenLayer::Plain(l) => l.weight.shape()[1],
            HiddenLayer::Mixup(l) => l.weight.shape()[1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Weight,
    Alpha1,
    Alpha2,
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum LayerRef {
    Hidden(usize),
    Head,
}

/// A recorded forward pass whose leaves can be mapped back to network parameters.
pub struct ForwardPass {
    pub graph: Graph,
    pub output: Var,
    bindings: Vec<(LayerRef, Slot, Var)>,
}

impl ForwardPass {
    pub fn loss(&mut self, targets: &Targets) -> Result<Var> {
        match targets {
            Targets::Classes(c) => self.graph.loss_ce(self.output, c),
            Targets::Reals(r) => self.graph.loss_mse(self.output, r),
        }
    }
}

/// Hidden layers (each plain or mixup) with a shared activation, then a plain head.
#[derive(Clone, Debug)]
pub struct Network {
    pub hidden: Vec<HiddenLayer>,
    pub head: LinearLayer,
    pub activation: Activation,
    pub task: TaskKind,
}

/// Everything needed to wrap a pretrained checkpoint in mixup layers.
#[derive(Clone, Copy, Debug)]
pub struct AlphaInit {
    pub rank: usize,
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
}

impl Network {
    pub fn new(hidden: Vec<HiddenLayer>, head: LinearLayer, activation: Activation, task: TaskKind) -> Result<Self> {
        let mut width = None;
        for (i, h) in hidden.iter().enumerate() {
            if let Some(w) = width {
                if h.in_dim() != w {
                    return Err(Error::dim("network", &[i, w], &[h.in_dim()]));
                }
            }
            width = Some(h.out_dim());
        }
        let (hout, hin) = head.weight.dims2()?;
        if let Some(w) = width {
            if hin != w {
                return Err(Error::dim("network head", &[w], &[hin]));
            }
        }
        if hout != task.output_dim() {
            return Err(Error::dim("network head output", &[task.output_dim()], &[hout]));
        }
        Ok(Network {
            hidden,
            head,
            activation,
            task,
        })
    }

    /// Randomly initialized plain network (used for pretraining).
    pub fn plain(input_dim: usize, widths: &[usize], activation: Activation, task: TaskKind, seed: u64) -> Result<Self> {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for (i, &w) in widths.iter().enumerate() {
            let std = 1.0 / (fan_in as f64).sqrt();
            hidden.push(HiddenLayer::Plain(LinearLayer::gaussian(w, fan_in, std, seed::derive(seed, "layer", i as u64))));
            fan_in = w;
        }
        let std = 1.0 / (fan_in as f64).sqrt();
        let head = LinearLayer::gaussian(task.output_dim(), fan_in, std, seed::derive(seed, "head", 0));
        Network::new(hidden, head, activation, task)
    }

    /// Builds a downstream network from pretrained hidden layers.
    ///
    /// Hidden weights and biases come from `pretrained`; the head is freshly drawn
    /// from `N(0, 0.02²)` with `head_seed`. With `alpha = Some(..)` every hidden
    /// layer becomes a mixup layer whose pretrained copy is frozen.
    pub fn from_pretrained(
        pretrained: &Network,
        task: TaskKind,
        alpha: Option<AlphaInit>,
        head_seed: u64,
    ) -> Result<Self> {
        let mut hidden = Vec::with_capacity(pretrained.hidden.len());
        for (i, h) in pretrained.hidden.iter().enumerate() {
            let (w, b) = match h {
                HiddenLayer::Plain(l) => (l.weight.clone(), l.bias.clone()),
                HiddenLayer::Mixup(l) => (l.mix_weights()?, l.bias.clone()),
            };
            let layer = match alpha {
                None => HiddenLayer::Plain(LinearLayer {
                    weight: w.with_requires_grad(true),
                    bias: b.with_requires_grad(true),
                }),
                Some(a) => {
                    let (n, m) = w.dims2()?;
                    let (a1, a2) = init_alpha(n, m, a.rank, a.mean, a.std, seed::derive(a.seed, "alpha", i as u64))?;
                    HiddenLayer::Mixup(MixupLinearLayer::new(w, b, a1, a2)?)
                }
            };
            hidden.push(layer);
        }
        let width = hidden.last().map_or(pretrained.head.weight.shape()[1], |h| h.out_dim());
        let head = LinearLayer::gaussian(task.output_dim(), width, HEAD_INIT_STD, head_seed);
        Network::new(hidden, head, pretrained.activation, task)
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().map_or(self.head.weight.shape()[1], |h| h.in_dim())
    }

    pub fn mixup_layers(&self) -> impl Iterator<Item = &MixupLinearLayer> {
        self.hidden.iter().filter_map(|h| match h {
            HiddenLayer::Mixup(l) => Some(l),
            HiddenLayer::Plain(_) => None,
        })
    }

    pub fn mixup_layers_mut(&mut self) -> impl Iterator<Item = &mut MixupLinearLayer> {
        self.hidden.iter_mut().filter_map(|h| match h {
            HiddenLayer::Mixup(l) => Some(l),
            HiddenLayer::Plain(_) => None,
        })
    }

    pub fn has_mixup(&self) -> bool {
        self.mixup_layers().next().is_some()
    }

    /// Parameters with the given role, in a fixed order.
    pub fn params_mut(&mut self, role: ParamRole) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for h in &mut self.hidden {
            match (h, role) {
                (HiddenLayer::Plain(l), ParamRole::Plain) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                (HiddenLayer::Mixup(l), ParamRole::TaskWeight) => out.push(&mut l.weight),
                (HiddenLayer::Mixup(l), ParamRole::AlphaFactor) => {
                    out.push(&mut l.alpha1);
                    out.push(&mut l.alpha2);
                }
                (HiddenLayer::Mixup(l), ParamRole::FrozenPretrained) => out.push(&mut l.pretrained),
                (HiddenLayer::Mixup(l), ParamRole::Plain) => out.push(&mut l.bias),
                _ => {}
            }
        }
        if role == ParamRole::Plain {
            out.push(&mut self.head.weight);
            out.push(&mut self.head.bias);
        }
        out
    }

    pub fn params(&self, role: ParamRole) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for h in &self.hidden {
            match (h, role) {
                (HiddenLayer::Plain(l), ParamRole::Plain) => {
                    out.push(&l.weight);
                    out.push(&l.bias);
                }
                (HiddenLayer::Mixup(l), ParamRole::TaskWeight) => out.push(&l.weight),
                (HiddenLayer::Mixup(l), ParamRole::AlphaFactor) => {
                    out.push(&l.alpha1);
                    out.push(&l.alpha2);
                }
                (HiddenLayer::Mixup(l), ParamRole::FrozenPretrained) => out.push(&l.pretrained),
                (HiddenLayer::Mixup(l), ParamRole::Plain) => out.push(&l.bias),
                _ => {}
            }
        }
        if role == ParamRole::Plain {
            out.push(&self.head.weight);
            out.push(&self.head.bias);
        }
        out
    }

    /// Task weights plus plain trainables: everything the W-level optimizer owns.
    pub fn weight_params_mut(&mut self) -> Vec<&mut Tensor> {
        // Order: per hidden layer (weight, bias), then head.
        let mut out = Vec::new();
        for h in &mut self.hidden {
            match h {
                HiddenLayer::Plain(l) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                HiddenLayer::Mixup(l) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn set_alpha_trainable(&mut self, flag: bool) {
        for l in self.mixup_layers_mut() {
            let trainable = flag && l.frozen.is_none();
            l.alpha1.set_requires_grad(trainable);
            l.alpha2.set_requires_grad(trainable);
        }
    }

    pub fn set_weights_trainable(&mut self, flag: bool) {
        for p in self.weight_params_mut() {
            p.set_requires_grad(flag);
        }
    }

    pub fn zero_grad(&mut self) {
        for h in &mut self.hidden {
            match h {
                HiddenLayer::Plain(l) => {
                    l.weight.zero_grad();
                    l.bias.zero_grad();
                }
                HiddenLayer::Mixup(l) => {
                    l.weight.zero_grad();
                    l.bias.zero_grad();
                    l.alpha1.zero_grad();
                    l.alpha2.zero_grad();
                }
            }
        }
        self.head.weight.zero_grad();
        self.head.bias.zero_grad();
    }

    /// Freezes every mixup layer at the given coefficients (one entry per mixup layer).
    pub fn freeze_coefficients(&mut self, coefficients: &[Coefficients]) -> Result<()> {
        let n = self.mixup_layers().count();
        if coefficients.len() != n {
            return Err(Error::Input(format!(
                "{} coefficient pairs for {n} mixup layers",
                coefficients.len()
            )));
        }
        for (l, c) in self.mixup_layers_mut().zip(coefficients) {
            l.freeze(c.clone())?;
        }
        Ok(())
    }

    pub fn coefficients(&self) -> Result<Vec<Coefficients>> {
        self.mixup_layers().map(|l| l.coefficients()).collect()
    }

    /// Records a forward pass on `batch[B×D]`.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardPass> {
        let (_, d) = batch.dims2()?;
        if d != self.input_dim() {
            return Err(Error::dim("forward", &[self.input_dim()], batch.shape()));
        }
        let mut g = Graph::new();
        let mut bindings = Vec::new();
        let mut h = g.constant(batch);
        for (i, layer) in self.hidden.iter().enumerate() {
            let li = LayerRef::Hidden(i);
            let (w, bias) = match layer {
                HiddenLayer::Plain(l) => {
                    let w = g.leaf(&l.weight);
                    bindings.push((li, Slot::Weight, w));
                    (w, &l.bias)
                }
                HiddenLayer::Mixup(l) => {
                    let (w, leaves) = l.record(&mut g)?;
                    bindings.extend(leaves.into_iter().map(|(s, v)| (li, s, v)));
                    (w, &l.bias)
                }
            };
            let b = g.leaf(bias);
            bindings.push((li, Slot::Bias, b));
            h = linear(&mut g, h, w, b)?;
            h = g.activation(h, self.activation);
        }
        let w = g.leaf(&self.head.weight);
        let b = g.leaf(&self.head.bias);
        bindings.push((LayerRef::Head, Slot::Weight, w));
        bindings.push((LayerRef::Head, Slot::Bias, b));
        let output = linear(&mut g, h, w, b)?;
        Ok(ForwardPass {
            graph: g,
            output,
            bindings,
        })
    }

    /// Forward + loss + backward, accumulating gradients into the parameters.
    /// Returns the loss value.
    pub fn loss_and_grad(&mut self, batch: &Tensor, targets: &Targets) -> Result<f64> {
        let mut pass = self.forward(batch)?;
        let loss = pass.loss(targets)?;
        let value = pass.graph.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        pass.graph.backward(loss)?;
        self.accumulate_grads(&pass)?;
        Ok(value)
    }

    pub fn loss(&self, batch: &Tensor, targets: &Targets) -> Result<f64> {
        let mut pass = self.forward(batch)?;
        let loss = pass.loss(targets)?;
        Ok(pass.graph.value(loss)[0])
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let pass = self.forward(batch)?;
        Ok(pass.graph.tensor(pass.output))
    }

    /// Pushes leaf gradients recorded in `pass` into the matching tensors.
    pub fn accumulate_grads(&mut self, pass: &ForwardPass) -> Result<()> {
        for &(layer, slot, var) in &pass.bindings {
            let Some(g) = pass.graph.grad(var) else { continue };
            let t = self.slot_mut(layer, slot);
            if t.requires_grad() {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn slot_mut(&mut self, layer: LayerRef, slot: Slot) -> &mut Tensor {
        match layer {
            LayerRef::Head => match slot {
                Slot::Weight => &mut self.head.weight,
                Slot::Bias => &mut self.head.bias,
                _ => unreachable!("head has no alpha factors"),
            },
            LayerRef::Hidden(i) => match (&mut self.hidden[i], slot) {
                (HiddenLayer::Plain(l), Slot::Weight) => &mut l.weight,
                (HiddenLayer::Plain(l), Slot::Bias) => &mut l.bias,
                (HiddenLayer::Mixup(l), Slot::Weight) => &mut l.weight,
                (HiddenLayer::Mixup(l), Slot::Bias) => &mut l.bias,
                (HiddenLayer::Mixup(l), Slot::Alpha1) => &mut l.alpha1,
                (HiddenLayer::Mixup(l), Slot::Alpha2) => &mut l.alpha2,
                (HiddenLayer::Plain(_), _) => unreachable!("plain layer has no alpha factors"),
            },
        }
    }

    /// Min, max and mean over every alpha factor entry. `None` without mixup layers.
    pub fn alpha_stats(&self) -> Option<(f64, f64, f64)> {
        let mut n = 0usize;
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for l in self.mixup_layers() {
            for t in [&l.alpha1, &l.alpha2] {
                for &x in t.data() {
                    lo = lo.min(x);
                    hi = hi.max(x);
                    sum += x;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (lo, hi, sum / n as f64))
    }

    /// Named tensors in a stable order, suitable for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let strip = |t: &Tensor| t.clone().with_requires_grad(false);
        for (i, h) in self.hidden.iter().enumerate() {
            match h {
                HiddenLayer::Plain(l) => {
                    out.push((format!("layer{i}.weight"), strip(&l.weight)));
                    out.push((format!("layer{i}.bias"), strip(&l.bias)));
                }
                HiddenLayer::Mixup(l) => {
                    out.push((format!("layer{i}.weight"), strip(&l.weight)));
                    out.push((format!("layer{i}.bias"), strip(&l.bias)));
                    out.push((format!("layer{i}.pretrained"), strip(&l.pretrained)));
                    match &l.frozen {
                        Some(c) => {
                            out.push((format!("layer{i}.coef_task"), strip(&c.task)));
                            out.push((format!("layer{i}.coef_pretrained"), strip(&c.pretrained)));
                        }
                        None => {
                            out.push((format!("layer{i}.alpha1"), strip(&l.alpha1)));
                            out.push((format!("layer{i}.alpha2"), strip(&l.alpha2)));
                        }
                    }
                }
            }
        }
        out.push(("head.weight".into(), strip(&self.head.weight)));
        out.push(("head.bias".into(), strip(&self.head.bias)));
        out
    }

    /// Inverse of [`Network::named_tensors`].
    pub fn from_named_tensors(tensors: &[(String, Tensor)], activation: Activation, task: TaskKind) -> Result<Self> {
        let map: BTreeMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let get = |name: &str| -> Result<Tensor> {
            map.get(name)
                .map(|t| (*t).clone())
                .ok_or_else(|| Error::Input(format!("checkpoint has no tensor `{name}`")))
        };
        let mut hidden = Vec::new();
        let mut i = 0;
        while map.contains_key(format!("layer{i}.weight").as_str()) {
            let w = get(&format!("layer{i}.weight"))?;
            let b = get(&format!("layer{i}.bias"))?;
            let layer = if map.contains_key(format!("layer{i}.pretrained").as_str()) {
                let w0 = get(&format!("layer{i}.pretrained"))?;
                let frozen = if map.contains_key(format!("layer{i}.coef_task").as_str()) {
                    Some(Coefficients {
                        task: get(&format!("layer{i}.coef_task"))?,
                        pretrained: get(&format!("layer{i}.coef_pretrained"))?,
                    })
                } else {
                    None
                };
                let (n, m) = w.dims2()?;
                let (a1, a2) = match &frozen {
                    Some(_) => (Tensor::ones(&[n, 1]), Tensor::ones(&[1, m])),
                    None => (get(&format!("layer{i}.alpha1"))?, get(&format!("layer{i}.alpha2"))?),
                };
                let mut l = MixupLinearLayer::new(w0, b, a1, a2)?;
                l.weight = w.with_requires_grad(true);
                if let Some(c) = frozen {
                    l.freeze(c)?;
                }
                HiddenLayer::Mixup(l)
            } else {
                HiddenLayer::Plain(LinearLayer {
                    weight: w.with_requires_grad(true),
                    bias: b.with_requires_grad(true),
                })
            };
            hidden.push(layer);
            i += 1;
        }
        let head = LinearLayer {
            weight: get("head.weight")?.with_requires_grad(true),
            bias: get("head.bias")?.with_requires_grad(true),
        };
        Network::new(hidden, head, activation, task)
    }

    // Flat views used by the hypergradient estimator.

    pub fn mixup_weights_flat(&self) -> Vec<f64> {
        self.mixup_layers().flat_map(|l| l.weight.data().iter().copied()).collect()
    }

    pub fn set_mixup_weights_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for l in self.mixup_layers_mut() {
            let n = l.weight.numel();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        debug_assert_eq!(off, flat.len());
    }

    pub fn mixup_weight_grads_flat(&self) -> Vec<f64> {
        flat_grads(self.mixup_layers().map(|l| &l.weight))
    }

    pub fn alpha_grads_flat(&self) -> Vec<f64> {
        flat_grads(self.mixup_layers().flat_map(|l| [&l.alpha1, &l.alpha2]))
    }

    pub fn alpha_flat(&self) -> Vec<f64> {
        self.mixup_layers()
            .flat_map(|l| l.alpha1.data().iter().chain(l.alpha2.data()).copied())
            .collect()
    }
}

fn flat_grads<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> Vec<f64> {
    let mut out = Vec::new();
    for t in tensors {
        match t.grad() {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat(0.0).take(t.numel())),
        }
    }
    out
}

/// `x · wᵀ + b`
fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    let y = g.matmul(x, wt)?;
    g.add_row(y, b)
}
