//! Overall performance measures: mean total accuracy across sessions and the
//! fine/coarse/overall forgetting rates.
//!
//! Accuracies are fractions in [0, 1] (the functions are homogeneous, so
//! percent inputs give the same forgetting rates and a percent mean).

use crate::error::{Error, Result};
use crate::numerics::Real;

/// Per-session accuracy series feeding the overall forgetting rate.
///
/// `a_t[i]` is total accuracy at session i (0..=T). `a_c[i]` is coarse
/// accuracy at session i for i in 0..T (absent where the coarse query pool
/// was empty). `a_f[i]` is fine accuracy at session i+1 (fine classes exist
/// only from session 1). `c_t[i]` is the cumulative fine-class count at
/// session i+1.
#[derive(Debug, Clone)]
pub struct MetricSeries<F> {
    pub a_t: Vec<F>,
    pub a_c: Vec<Option<F>>,
    pub a_f: Vec<F>,
    pub c_t: Vec<usize>,
    pub n_f: usize,
}

impl<F: Real> MetricSeries<F> {
    pub fn sessions(&self) -> usize {
        self.a_t.len().saturating_sub(1)
    }
}

/// Mean of the total-accuracy series over sessions 0..=T.
pub fn average_accuracy<F: Real>(a_t: &[F]) -> Result<F> {
    if a_t.is_empty() {
        return Err(Error::Config("average_accuracy: empty series".into()));
    }
    let sum = a_t.iter().fold(F::zero(), |a, &b| a + b);
    Ok(sum / F::from_usize(a_t.len()).unwrap())
}

/// Fine forgetting between consecutive sessions:
/// `(A_f^{t-1} - A_f^t) / A_f^{t-1}`.
pub fn fine_forgetting<F: Real>(prev: F, cur: F) -> Result<F> {
    if prev <= F::zero() {
        return Err(Error::UndefinedMetric(
            "fine_forgetting: previous fine accuracy is zero".into(),
        ));
    }
    Ok((prev - cur) / prev)
}

/// Coarse forgetting relative to the base session:
/// `(A_c^0 - A_c^t) / A_c^0`.
pub fn coarse_forgetting<F: Real>(base: F, cur: F) -> Result<F> {
    if base <= F::zero() {
        return Err(Error::UndefinedMetric(
            "coarse_forgetting: base coarse accuracy is zero".into(),
        ));
    }
    Ok((base - cur) / base)
}

/// Overall forgetting rate:
/// `F = 1/(T-1) [ sum_{t=2..T} F_f^t c_t/N_f + sum_{t=1..T-1} F_c^t (1 - c_t/N_f) ]`
/// with each weight evaluated at its own summand's t.
///
/// Coarse terms whose `A_c^t` is absent (empty coarse pool) are omitted.
pub fn overall_forgetting<F: Real>(series: &MetricSeries<F>) -> Result<F> {
    let t_sessions = series.sessions();
    if t_sessions < 2 {
        return Err(Error::Config(
            "overall_forgetting: needs at least two incremental sessions".into(),
        ));
    }
    let n_f = F::from_usize(series.n_f).unwrap();
    let mut total = F::zero();
    // fine terms, t = 2..=T
    for t in 2..=t_sessions {
        let prev = series.a_f[t - 2];
        let cur = series.a_f[t - 1];
        let ff = fine_forgetting(prev, cur)?;
        let w = F::from_usize(series.c_t[t - 1]).unwrap() / n_f;
        total = total + ff * w;
    }
    // coarse terms, t = 1..=T-1
    let base = series.a_c[0].ok_or_else(|| {
        Error::UndefinedMetric("overall_forgetting: base coarse accuracy missing".into())
    })?;
    for t in 1..t_sessions {
        if let Some(ac) = series.a_c[t] {
            let fc = coarse_forgetting(base, ac)?;
            let w = F::one() - F::from_usize(series.c_t[t - 1]).unwrap() / n_f;
            total = total + fc * w;
        }
    }
    Ok(total / F::from_usize(t_sessions - 1).unwrap())
}
