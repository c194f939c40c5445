//! Central-difference verification of analytic gradients.

use std::fmt;

use crate::autodiff::params::{ParamGrads, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Scalar;
use crate::error::{Error, Result};

/// A scalar function of named parameters with an analytic gradient.
pub trait Objective<T: Scalar> {
    fn value(&mut self, params: &ParamStore<T>) -> Result<T>;

    fn value_and_grad(&mut self, params: &ParamStore<T>) -> Result<(T, ParamGrads<T>)>;
}

/// Adapts a closure that records a scalar loss on a fresh tape.
pub struct TapeObjective<F>(pub F);

impl<T, F> Objective<T> for TapeObjective<F>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    fn value(&mut self, params: &ParamStore<T>) -> Result<T> {
        let mut tape = Tape::new();
        let loss = (self.0)(&mut tape, params)?;
        Ok(tape.value(loss).item())
    }

    fn value_and_grad(&mut self, params: &ParamStore<T>) -> Result<(T, ParamGrads<T>)> {
        let mut tape = Tape::new();
        let loss = (self.0)(&mut tape, params)?;
        let grads = tape.backward(loss)?;
        let mut out = grads.param_grads(&tape);
        // parameters never touched by the loss have an exactly-zero gradient
        for (name, t) in params.iter() {
            out.entry(name.to_string())
                .or_insert_with(|| crate::Tensor::zeros(t.shape()));
        }
        Ok((tape.value(loss).item(), out))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Parameters whose analytic gradient is declared blocked (exactly zero).
    pub blocked: Vec<String>,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elems_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            tol: 1e-6,
            blocked: Vec::new(),
            max_elems_per_param: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Analytic gradient is exactly zero by declaration; the numeric one need not be.
    IntentionallyBlocked,
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub status: CheckStatus,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.status != CheckStatus::Fail)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.status != CheckStatus::IntentionallyBlocked)
            .map(|p| p.max_abs_err)
            .fold(0.0, f64::max)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.status != CheckStatus::IntentionallyBlocked)
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamReport> {
        self.params.iter().filter(|p| p.status == CheckStatus::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&ParamReport> {
        self.params.iter().find(|p| p.name == name)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "loss={:.6e} tol={:.1e} max_abs={:.3e} max_rel={:.3e} => {}",
            self.loss,
            self.tol,
            self.max_abs_err(),
            self.max_rel_err(),
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for p in &self.params {
            let status = match p.status {
                CheckStatus::Pass => "ok",
                CheckStatus::Fail => "FAIL",
                CheckStatus::IntentionallyBlocked => "intentionally blocked",
            };
            writeln!(
                f,
                "  {:<40} n={:<6} abs={:.3e} rel={:.3e} {}",
                p.name, p.checked, p.max_abs_err, p.max_rel_err, status
            )?;
        }
        Ok(())
    }
}

/// Compare the analytic gradient of `f` against central differences.
///
/// An element passes when `|analytic - numeric| <= tol * max(1, |numeric|)`.
pub fn finite_diff_check<T: Scalar>(
    f: &mut dyn Objective<T>,
    params: &ParamStore<T>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (loss, analytic) = f.value_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "objective at unperturbed parameters".into(),
        });
    }
    let mut work = params.clone();
    let mut reports = Vec::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let indices: Vec<usize> = match opts.max_elems_per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Internal(format!("no analytic gradient for `{name}`")))?;
        let blocked = opts.blocked.iter().any(|b| b == &name);
        let mut rep = ParamReport {
            name: name.clone(),
            checked: indices.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            analytic: Vec::with_capacity(indices.len()),
            numeric: Vec::with_capacity(indices.len()),
            status: CheckStatus::Pass,
        };
        for &i in &indices {
            let orig = params.get(&name)?.data()[i];
            let h = T::of(opts.eps);
            let eval = |work: &mut ParamStore<T>, f: &mut dyn Objective<T>, x: T| -> Result<f64> {
                work.get_mut(&name).expect("param exists").data_mut()[i] = x;
                let v = f.value(work)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("objective with `{name}`[{i}] perturbed"),
                    });
                }
                Ok(v.f64())
            };
            let plus = eval(&mut work, f, orig + h)?;
            let minus = eval(&mut work, f, orig - h)?;
            work.get_mut(&name).expect("param exists").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[i].f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-12);
            rep.max_abs_err = rep.max_abs_err.max(abs);
            rep.max_rel_err = rep.max_rel_err.max(rel);
            rep.analytic.push(a);
            rep.numeric.push(numeric);
            if blocked {
                if a != 0.0 {
                    rep.status = CheckStatus::Fail;
                }
            } else if abs > opts.tol * numeric.abs().max(1.0) {
                rep.status = CheckStatus::Fail;
            }
        }
        if blocked && rep.status != CheckStatus::Fail {
            rep.status = CheckStatus::IntentionallyBlocked;
        }
        reports.push(rep);
    }
    Ok(GradCheckReport {
        loss: loss.f64(),
        params: reports,
        tol: opts.tol,
    })
}
