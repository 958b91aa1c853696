//! Synthetic transfer benchmark: a random teacher labels Gaussian inputs; the
//! downstream task sees the same inputs rotated in a random 2-plane, with a
//! fraction of its training labels flipped.

use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Targets, TaskKind};
use crate::seed::{self, Rng};
use crate::tensor::Tensor;

const BALANCE_PROBE: usize = 4000;
const MAX_TEACHER_DRAWS: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub input_dim: usize,
    pub source_n: usize,
    pub target_n: usize,
    pub test_n: usize,
    pub teacher_hidden: usize,
    /// Radians.
    pub shift_angle: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            input_dim: 20,
            source_n: 20_000,
            target_n: 300,
            test_n: 2_000,
            teacher_hidden: 8,
            shift_angle: 0.3,
            label_noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config(format!("label_noise must lie in [0, 0.5), got {}", self.label_noise)));
        }
        if self.input_dim < 2 {
            return Err(Error::Config("input_dim must be at least 2 to hold a rotation plane".into()));
        }
        if self.teacher_hidden == 0 || self.source_n == 0 || self.target_n == 0 || self.test_n == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if self.target_n >= self.source_n {
            return Err(Error::Config(format!(
                "target_n ({}) must be smaller than source_n ({})",
                self.target_n, self.source_n
            )));
        }
        Ok(())
    }
}

/// One-hidden-layer tanh network; the label is the sign of its output.
#[derive(Clone, Debug)]
pub struct Teacher {
    hidden: Vec<Vec<f64>>,
    readout: Vec<f64>,
}

impl Teacher {
    fn draw(dim: usize, width: usize, rng: &mut Rng) -> Self {
        let scale = 2.0 / (dim as f64).sqrt();
        let hidden = (0..width)
            .map(|_| (0..dim).map(|_| scale * gauss(rng)).collect())
            .collect();
        let readout = (0..width).map(|_| gauss(rng)).collect();
        Teacher { hidden, readout }
    }

    pub fn label(&self, x: &[f64]) -> usize {
        let s: f64 = self
            .hidden
            .iter()
            .zip(&self.readout)
            .map(|(row, v)| v * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().tanh())
            .sum();
        usize::from(s > 0.0)
    }
}

fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss_vec(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| gauss(rng)).collect()
}

/// Rotation by `angle` inside the plane spanned by orthonormal `u`, `v`.
#[derive(Clone, Debug)]
pub struct PlaneRotation {
    u: Vec<f64>,
    v: Vec<f64>,
    angle: f64,
}

impl PlaneRotation {
    fn draw(dim: usize, angle: f64, rng: &mut Rng) -> Self {
        let normalize = |x: &mut Vec<f64>| {
            let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            x.iter_mut().for_each(|a| *a /= n);
        };
        let mut u = gauss_vec(dim, rng);
        normalize(&mut u);
        let mut v = gauss_vec(dim, rng);
        let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(b, a)| *b -= proj * a);
        normalize(&mut v);
        PlaneRotation { u, v, angle }
    }

    pub fn inverse(&self) -> PlaneRotation {
        PlaneRotation {
            angle: -self.angle,
            ..self.clone()
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let pu: f64 = self.u.iter().zip(x).map(|(a, b)| a * b).sum();
        let pv: f64 = self.v.iter().zip(x).map(|(a, b)| a * b).sum();
        let (s, c) = self.angle.sin_cos();
        let du = (c - 1.0) * pu - s * pv;
        let dv = s * pu + (c - 1.0) * pv;
        x.iter()
            .enumerate()
            .map(|(i, xi)| xi + du * self.u[i] + dv * self.v[i])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTransfer {
    pub source: Dataset,
    pub target: Dataset,
    pub test: Dataset,
    pub teacher: Teacher,
    /// Maps source-frame inputs to the shifted frame.
    pub rotation: PlaneRotation,
}

fn class_balance(teacher: &Teacher, dim: usize, rng: &mut Rng) -> f64 {
    let ones: usize = (0..BALANCE_PROBE).map(|_| teacher.label(&gauss_vec(dim, rng))).sum();
    ones as f64 / BALANCE_PROBE as f64
}

/// Draws a teacher whose positive rate on a probe sample lies in `[0.35, 0.65]`.
pub fn draw_balanced_teacher(dim: usize, width: usize, seed: u64) -> Result<Teacher> {
    for attempt in 0..MAX_TEACHER_DRAWS {
        let mut rng = seed::rng(seed::derive(seed, "teacher", attempt));
        let teacher = Teacher::draw(dim, width, &mut rng);
        let balance = class_balance(&teacher, dim, &mut rng);
        if (0.35..=0.65).contains(&balance) {
            return Ok(teacher);
        }
    }
    Err(Error::Config("no balanced teacher found".into()))
}

pub fn make_synthetic_transfer(spec: &SyntheticTaskSpec) -> Result<SyntheticTransfer> {
    spec.validate()?;
    let d = spec.input_dim;
    let teacher = draw_balanced_teacher(d, spec.teacher_hidden, spec.seed)?;
    let rotation = PlaneRotation::draw(d, spec.shift_angle, &mut seed::rng(seed::derive(spec.seed, "plane", 0)));
    let task = TaskKind::Classification { classes: 2 };

    let draw = |tag: &str, n: usize, shifted: bool, noise: f64| -> Result<Dataset> {
        let mut rng = seed::rng(seed::derive(spec.seed, tag, 0));
        let flip = Bernoulli::new(noise).map_err(|e| Error::Config(e.to_string()))?;
        let mut feats = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x = gauss_vec(d, &mut rng);
            let mut y = teacher.label(&x);
            if flip.sample(&mut rng) {
                y = 1 - y;
            }
            if shifted {
                feats.extend(rotation.apply(&x));
            } else {
                feats.extend(x);
            }
            labels.push(y);
        }
        Dataset::new(tag, Tensor::new(&[n, d], feats)?, Targets::Classes(labels), task)
    };

    Ok(SyntheticTransfer {
        source: draw("source", spec.source_n, false, 0.0)?,
        target: draw("target", spec.target_n, true, spec.label_noise)?,
        test: draw("test", spec.test_n, true, 0.0)?,
        teacher,
        rotation,
    })
}
