use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::labeling::{Task, TaskSet};
use crate::model::{EncodedInstance, ForwardVars};
use crate::numerics::{Tape, Var, PROB_CLAMP};
use crate::{Error, Result};

/// Direction of the SP/RT class-weight ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxWeightMode {
    /// `#positive / #negative`.
    #[default]
    Paper,
    /// `#negative / #positive`.
    Inverse,
}

impl FromStr for AuxWeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(AuxWeightMode::Paper),
            "inverse" => Ok(AuxWeightMode::Inverse),
            other => Err(Error::Config(format!(
                "aux weight mode must be paper or inverse, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for AuxWeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuxWeightMode::Paper => "paper",
            AuxWeightMode::Inverse => "inverse",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_main: f64,
    pub mu_main: f64,
    pub lambda_sp: f64,
    pub lambda_rt: f64,
    pub alpha_sp: f64,
    pub alpha_rt: f64,
    pub alpha_ta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_main: 1.0,
            mu_main: 1.0,
            lambda_sp: 1.0,
            lambda_rt: 1.0,
            alpha_sp: 0.2,
            alpha_rt: 0.2,
            alpha_ta: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_main,
            self.mu_main,
            self.lambda_sp,
            self.lambda_rt,
            self.alpha_sp,
            self.alpha_rt,
            self.alpha_ta,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, task: Task) -> f64 {
        match task {
            Task::Sp => self.alpha_sp,
            Task::Rt => self.alpha_rt,
            Task::Ta => self.alpha_ta,
        }
    }

    /// Tasks that actually contribute to the objective.
    pub fn active(&self, enabled: TaskSet) -> TaskSet {
        let mut out = TaskSet::NONE;
        for t in enabled.iter().filter(|t| self.alpha(*t) > 0.0) {
            out.insert(t);
        }
        out
    }
}

/// `n / d`, or `cap` when `d = 0`, never above `cap`.
fn capped_ratio(n: usize, d: usize, cap: f64) -> f64 {
    if d == 0 {
        cap
    } else {
        (n as f64 / d as f64).min(cap)
    }
}

/// Main-task positive weight `#neg / #pos`.
pub fn main_lambda(labels: impl IntoIterator<Item = bool>, cap: f64) -> f64 {
    let (pos, neg) = count(labels);
    capped_ratio(neg, pos, cap)
}

/// SP/RT positive weight from the training labels.
pub fn aux_lambda(labels: impl IntoIterator<Item = bool>, mode: AuxWeightMode, cap: f64) -> f64 {
    let (pos, neg) = count(labels);
    match mode {
        AuxWeightMode::Paper => capped_ratio(pos, neg, cap),
        AuxWeightMode::Inverse => capped_ratio(neg, pos, cap),
    }
}

fn count(labels: impl IntoIterator<Item = bool>) -> (usize, usize) {
    labels
        .into_iter()
        .fold((0, 0), |(p, n), y| if y { (p + 1, n) } else { (p, n + 1) })
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `-[λ y log ŷ + μ (1 - y) log(1 - ŷ)]`.
pub fn loss_main(y_hat: f64, y: bool, lambda: f64, mu: f64) -> f64 {
    let p = clamp(y_hat);
    if y {
        -lambda * p.ln()
    } else {
        -mu * (1.0 - p).ln()
    }
}

/// SP and RT loss: the main loss with `μ = 1`.
pub fn loss_aux(y_hat: f64, y: bool, lambda: f64) -> f64 {
    loss_main(y_hat, y, lambda, 1.0)
}

/// Plain sum of squared errors.
pub fn loss_ta(y_hat: &[f64], y: &[bool]) -> Result<f64> {
    if y_hat.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} TA predictions for {} labels",
            y_hat.len(),
            y.len()
        )));
    }
    Ok(y_hat
        .iter()
        .zip(y)
        .map(|(p, t)| (f64::from(u8::from(*t)) - p).powi(2))
        .sum())
}

/// Per-task loss values; disabled tasks are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLosses {
    pub main: f64,
    pub sp: Option<f64>,
    pub rt: Option<f64>,
    pub ta: Option<f64>,
}

impl TaskLosses {
    pub fn get(&self, task: Task) -> Option<f64> {
        match task {
            Task::Sp => self.sp,
            Task::Rt => self.rt,
            Task::Ta => self.ta,
        }
    }

    fn slot(&mut self, task: Task) -> &mut Option<f64> {
        match task {
            Task::Sp => &mut self.sp,
            Task::Rt => &mut self.rt,
            Task::Ta => &mut self.ta,
        }
    }

    pub fn add(&mut self, other: &TaskLosses) {
        self.main += other.main;
        for t in Task::ALL {
            if let Some(v) = other.get(t) {
                *self.slot(t) = Some(self.get(t).unwrap_or(0.0) + v);
            }
        }
    }

    pub fn scaled(&self, s: f64) -> TaskLosses {
        TaskLosses {
            main: self.main * s,
            sp: self.sp.map(|v| v * s),
            rt: self.rt.map(|v| v * s),
            ta: self.ta.map(|v| v * s),
        }
    }
}

/// `L_main + Σ α_task L_task` over the tasks present in `parts`.
pub fn loss_total(parts: &TaskLosses, weights: &LossWeights) -> f64 {
    let mut total = parts.main;
    for t in Task::ALL {
        if let Some(l) = parts.get(t) {
            total += weights.alpha(t) * l;
        }
    }
    total
}

/// Loss nodes recorded for one instance.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub main: Var,
    pub sp: Var,
    pub rt: Var,
    pub ta: Var,
}

/// Records all four unweighted task losses for one forward pass.
pub fn record_losses(
    tape: &mut Tape<'_>,
    vars: &ForwardVars,
    inst: &EncodedInstance,
    w: &LossWeights,
) -> Result<LossVars> {
    if vars.ta.len() != inst.y_ta.len() {
        return Err(Error::Shape(format!(
            "{} TA predictions for {} labels",
            vars.ta.len(),
            inst.y_ta.len()
        )));
    }
    let main = tape.weighted_bce(vars.main, inst.y_main, w.lambda_main, w.mu_main)?;
    let sp = tape.weighted_bce(vars.sp, inst.y_sp, w.lambda_sp, 1.0)?;
    let rt = tape.weighted_bce(vars.rt, inst.y_rt, w.lambda_rt, 1.0)?;
    let terms = vars
        .ta
        .iter()
        .zip(&inst.y_ta)
        .map(|(p, y)| tape.squared_error(*p, f64::from(u8::from(*y))))
        .collect::<Result<Vec<_>>>()?;
    let ta = tape.sum(&terms)?;
    Ok(LossVars { main, sp, rt, ta })
}

/// Builds `L_main + Σ α L` over `active` tasks. With no active task the main
/// loss node itself is returned, so gradients match main-only training
/// exactly.
pub fn combine_losses(
    tape: &mut Tape<'_>,
    losses: &LossVars,
    w: &LossWeights,
    active: TaskSet,
) -> Result<Var> {
    let mut parts = vec![losses.main];
    for t in active.iter() {
        let var = match t {
            Task::Sp => losses.sp,
            Task::Rt => losses.rt,
            Task::Ta => losses.ta,
        };
        parts.push(tape.scale(var, w.alpha(t)));
    }
    if parts.len() == 1 {
        Ok(losses.main)
    } else {
        tape.sum(&parts)
    }
}

/// Loss values of the tasks in `enabled`, read back from the tape.
pub fn read_losses(tape: &Tape<'_>, losses: &LossVars, enabled: TaskSet) -> TaskLosses {
    let pick = |task: Task, v: Var| enabled.contains(task).then(|| tape.scalar(v));
    TaskLosses {
        main: tape.scalar(losses.main),
        sp: pick(Task::Sp, losses.sp),
        rt: pick(Task::Rt, losses.rt),
        ta: pick(Task::Ta, losses.ta),
    }
}
