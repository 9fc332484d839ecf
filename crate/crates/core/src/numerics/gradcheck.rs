use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Gradients, ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Check at most this many entries (sampled); `None` checks every entry.
    pub max_entries: Option<usize>,
    /// Denominator floor: `rel = |a - n| / max(|a|, |n|, abs_floor)`.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            max_entries: None,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Entry with the largest relative error.
    pub worst: Option<Violation>,
    pub violators: Vec<Violation>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.violators.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `loss`.
///
/// Each checked entry is perturbed in place and restored afterwards, so
/// `store` is unchanged on return.
pub fn grad_check<F>(
    store: &mut ParamStore,
    analytic: &Gradients,
    mut loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(1e-6..=1e-4).contains(&cfg.eps) {
        return Err(Error::Config(format!(
            "grad check eps {} outside [1e-6, 1e-4]",
            cfg.eps
        )));
    }
    let base = loss(store)?;
    if !base.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite loss {base}")));
    }

    let entries = select_entries(store, analytic, cfg);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        violators: Vec::new(),
    };
    for (id, idx) in entries {
        let original = store.value(id).data()[idx];
        store.get_mut(id).value.data_mut()[idx] = original + cfg.eps;
        let plus = loss(store);
        store.get_mut(id).value.data_mut()[idx] = original - cfg.eps;
        let minus = loss(store);
        store.get_mut(id).value.data_mut()[idx] = original;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite loss while perturbing {}[{idx}]",
                store.get(id).name
            )));
        }
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let a = analytic.get(id, idx);
        let rel = relative_error(a, numeric, cfg.abs_floor);
        let entry = Violation {
            param: store.get(id).name.clone(),
            index: idx,
            analytic: a,
            numeric,
            rel_error: rel,
        };
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(entry.clone());
        }
        if rel > cfg.tol {
            report.violators.push(entry);
        }
    }
    Ok(report)
}

/// Every entry, or a per-parameter stratified sample when capped. Row-sparse
/// parameters are sampled from the rows that actually received gradient.
fn select_entries(
    store: &ParamStore,
    analytic: &Gradients,
    cfg: &GradCheckConfig,
) -> Vec<(ParamId, usize)> {
    let candidates: Vec<(ParamId, Vec<usize>)> = store
        .ids()
        .map(|id| {
            let p = store.get(id);
            let idx: Vec<usize> = if p.row_sparse {
                let w = p.value.cols();
                analytic
                    .touched_rows(id)
                    .into_iter()
                    .flat_map(|r| r * w..(r + 1) * w)
                    .collect()
            } else {
                (0..p.value.len()).collect()
            };
            (id, idx)
        })
        .filter(|(_, idx)| !idx.is_empty())
        .collect();

    let total: usize = candidates.iter().map(|(_, c)| c.len()).sum();
    let Some(cap) = cfg.max_entries.filter(|cap| *cap < total) else {
        return candidates
            .into_iter()
            .flat_map(|(id, idx)| idx.into_iter().map(move |i| (id, i)))
            .collect();
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut quota = vec![0usize; candidates.len()];
    let mut remaining = cap;
    // Round-robin so every parameter group is represented.
    while remaining > 0 {
        let mut progressed = false;
        for (q, (_, idx)) in quota.iter_mut().zip(&candidates) {
            if remaining == 0 {
                break;
            }
            if *q < idx.len() {
                *q += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let mut out = Vec::with_capacity(cap);
    for ((id, idx), q) in candidates.into_iter().zip(quota) {
        let picked: Vec<usize> = idx.choose_multiple(&mut rng, q).copied().collect();
        out.extend(picked.into_iter().map(|i| (id, i)));
    }
    out
}
