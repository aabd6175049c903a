//! Numeric verification suite: stability decay of frozen-vs-unfrozen and
//! normalized-vs-raw heads, descent of the normalized update direction,
//! weight-norm growth of raw unfrozen heads, and the truth-table evaluation
//! of the freeze-embedding ablation.

use rayon::prelude::*;
use serde::Serialize;

use crate::classifier::ClassifierHead;
use crate::data::SessionStream;
use crate::embedding::OptimConfig;
use crate::error::{Error, Result};
use crate::numerics::norm2;
use crate::protocol::{
    augment_for_session, run_base_session, run_experiment, train_session, ExperimentResult, Mode,
    NetSpec,
    RunFlags,
};
use crate::rng::derive_seed;

const LOGIT_DENOM_GUARD: f64 = 1e-9;

/// Number of held-out base samples used as the fixed probe panel.
pub const PROBE_PANEL: usize = 32;

/// Default learning-rate grid for the descent probe.
pub const LR_GRID: [f64; 7] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1];

fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Stability decay of one probe between an early session and the final one:
/// `D = sum_i ((o_i^final - o_i^initial) / o_i^initial)^2` over the columns
/// existing at the earlier session. A near-zero denominator makes the probe
/// undefined.
pub fn stability_decay(initial: &[f64], final_logits: &[f64]) -> Result<f64> {
    if final_logits.len() < initial.len() {
        return Err(Error::Shape(
            "final logit vector shorter than the initial one".into(),
        ));
    }
    let mut d = 0.0;
    for (i, &o0) in initial.iter().enumerate() {
        if o0.abs() < LOGIT_DENOM_GUARD {
            return Err(Error::UndefinedMetric(format!(
                "stability_decay: logit {i} is {o0:e} at the reference session"
            )));
        }
        let rel = (final_logits[i] - o0) / o0;
        d += rel * rel;
    }
    Ok(d)
}

/// The four head variants compared by the stability analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    /// raw logits, classifier unfrozen
    A,
    /// normalized logits, classifier unfrozen
    B,
    /// raw logits, classifier frozen
    C,
    /// normalized logits, classifier frozen
    D,
}

pub const VARIANTS: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

impl Variant {
    pub fn normalize(self) -> bool {
        matches!(self, Variant::B | Variant::D)
    }

    pub fn freeze_classifier(self) -> bool {
        matches!(self, Variant::C | Variant::D)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
        }
    }

    fn index(self) -> usize {
        match self {
            Variant::A => 0,
            Variant::B => 1,
            Variant::C => 2,
            Variant::D => 3,
        }
    }
}

/// Stability comparison across the four variants.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    /// Pooled median D per variant, order a, b, c, d.
    pub median_d: [f64; 4],
    /// Per-seed median D per variant.
    pub per_seed: Vec<[f64; 4]>,
    /// Probes skipped for an undefined D, per variant.
    pub skipped: [usize; 4],
    /// Pooled medians satisfy D_d < D_b < D_a.
    pub ordering_via_b: bool,
    /// Pooled medians satisfy D_d < D_c < D_a.
    pub ordering_via_c: bool,
    /// Fraction of seeds where D_d is strictly below D_b and D_c and D_a is
    /// the maximum.
    pub seed_fraction_ordered: f64,
}

/// Median stability decay per variant for one seed. All four variants share
/// the same contrastively trained frozen embedding and the same coarse
/// columns; only the head mode differs. D is measured between the first
/// incremental session and the last.
pub fn stability_medians_for_seed(
    stream: &SessionStream,
    net_spec: &NetSpec,
    base_opt: &OptimConfig,
    session_opt: &OptimConfig,
    seed: u64,
) -> Result<([f64; 4], [usize; 4])> {
    let base = run_base_session(
        stream,
        RunFlags::knowe(),
        net_spec,
        base_opt,
        derive_seed(seed, "stability-base"),
    )?;
    let probes: Vec<Vec<f64>> = stream.queries[0]
        .iter()
        .take(PROBE_PANEL)
        .map(|q| q.x.clone())
        .collect();
    if probes.is_empty() {
        return Err(Error::Config("stability: no probe inputs available".into()));
    }

    let mut medians = [0.0; 4];
    let mut skipped = [0usize; 4];
    for variant in VARIANTS {
        let mut model = base.clone();
        model.flags.normalize_weights = variant.normalize();
        model.flags.freeze_classifier = variant.freeze_classifier();
        model.head.normalize = variant.normalize();

        // Reference logits are taken right after the first session's columns
        // are appended but before they are trained: the reference must include
        // the new columns in their unlearned state, otherwise fully frozen
        // variants would trivially score D = 0 and the ordering comparison
        // would be vacuous.
        let mut first: Vec<Vec<f64>> = Vec::new();
        for t in 1..=stream.sessions {
            let session_seed = derive_seed(seed, &format!("stability-session-{t}"));
            augment_for_session(&mut model, stream, t, session_seed)?;
            if t == 1 && stream.sessions > 1 {
                first = probes
                    .iter()
                    .map(|p| model.head.logits(&model.net.feature(p)?))
                    .collect::<Result<_>>()?;
            }
            train_session(&mut model, stream, t, session_opt, session_seed)?;
            // Degenerate single-session stream: the reference session is the
            // final session, so D compares a state with itself.
            if t == 1 && stream.sessions == 1 {
                first = probes
                    .iter()
                    .map(|p| model.head.logits(&model.net.feature(p)?))
                    .collect::<Result<_>>()?;
            }
        }
        let last: Vec<Vec<f64>> = probes
            .iter()
            .map(|p| model.head.logits(&model.net.feature(p)?))
            .collect::<Result<_>>()?;

        let mut ds = Vec::new();
        for (o1, ot) in first.iter().zip(&last) {
            match stability_decay(o1, ot) {
                Ok(d) => ds.push(d),
                Err(Error::UndefinedMetric(_)) => skipped[variant.index()] += 1,
                Err(e) => return Err(e),
            }
        }
        if ds.is_empty() {
            return Err(Error::UndefinedMetric(format!(
                "stability: every probe undefined for variant {}",
                variant.label()
            )));
        }
        medians[variant.index()] = median(&ds);
    }
    Ok((medians, skipped))
}

/// Run the stability comparison over several seeds.
pub fn compare_variants(
    stream: &SessionStream,
    net_spec: &NetSpec,
    base_opt: &OptimConfig,
    session_opt: &OptimConfig,
    seeds: &[u64],
) -> Result<StabilityReport> {
    if seeds.is_empty() {
        return Err(Error::Config("compare_variants: no seeds".into()));
    }
    let per_seed_results: Vec<([f64; 4], [usize; 4])> = seeds
        .par_iter()
        .map(|&s| stability_medians_for_seed(stream, net_spec, base_opt, session_opt, s))
        .collect::<Result<_>>()?;

    let per_seed: Vec<[f64; 4]> = per_seed_results.iter().map(|(m, _)| *m).collect();
    let mut skipped = [0usize; 4];
    for (_, sk) in &per_seed_results {
        for i in 0..4 {
            skipped[i] += sk[i];
        }
    }
    let mut median_d = [0.0; 4];
    for i in 0..4 {
        let vals: Vec<f64> = per_seed.iter().map(|m| m[i]).collect();
        median_d[i] = median(&vals);
    }
    let [a, b, c, d] = median_d;
    let ordered_seeds = per_seed
        .iter()
        .filter(|m| {
            let [a, b, c, d] = **m;
            d < b && d < c && a >= b && a >= c && a > d
        })
        .count();
    Ok(StabilityReport {
        median_d,
        per_seed: per_seed.clone(),
        skipped,
        ordering_via_b: d < b && b < a,
        ordering_via_c: d < c && c < a,
        seed_fraction_ordered: ordered_seeds as f64 / per_seed.len() as f64,
    })
}

/// Descent probe for the normalized update direction.
#[derive(Debug, Clone, Serialize)]
pub struct PlasticityReport {
    /// Inner product of the unit-temperature update direction with the head's
    /// own analytic gradient.
    pub inner_product: f64,
    /// (lr, loss(W - lr * dW) - loss(W)) per grid point.
    pub deltas: Vec<(f64, f64)>,
    /// Largest grid lr with a strict loss decrease.
    pub largest_descending_lr: Option<f64>,
    /// Gradient norm below 1e-9 (saturated correct classification).
    pub stationary: bool,
}

/// Evaluate whether stepping against the normalized-mode update direction
/// still lowers the loss. The step direction is the gradient at unit
/// temperature; the reference gradient `g` uses the head's own temperature.
pub fn plasticity_probe(
    head: &ClassifierHead<f64>,
    batch: &[(&[f64], usize)],
    lr_grid: &[f64],
) -> Result<PlasticityReport> {
    if !head.normalize {
        return Err(Error::Config(
            "plasticity_probe: head must be in normalized mode".into(),
        ));
    }
    let base = head.loss_grad(batch)?;
    let mut unit_head = head.clone();
    unit_head.lambda = 1.0;
    let step = unit_head.loss_grad(batch)?;

    let mut inner = 0.0;
    let mut g_sq = 0.0;
    for (dw, g) in step.w_grads.iter().zip(&base.w_grads) {
        for (&d, &gk) in dw.iter().zip(g) {
            inner += d * gk;
            g_sq += gk * gk;
        }
    }

    let mut deltas = Vec::with_capacity(lr_grid.len());
    let mut largest = None;
    for &lr in lr_grid {
        let mut stepped = head.clone();
        for i in 0..stepped.num_columns() {
            for k in 0..stepped.dim() {
                let d = step.w_grads[i][k];
                stepped.column_mut(i)[k] -= lr * d;
            }
        }
        let delta = stepped.loss_grad(batch)?.loss - base.loss;
        if delta < 0.0 {
            largest = Some(largest.map_or(lr, |l: f64| l.max(lr)));
        }
        deltas.push((lr, delta));
    }
    Ok(PlasticityReport {
        inner_product: inner,
        deltas,
        largest_descending_lr: largest,
        stationary: g_sq.sqrt() < 1e-9,
    })
}

/// Diagnostic only: mean squared projection of each update column onto the
/// mean prior-session feature direction. A small value means the update
/// barely disturbs responses to earlier inputs. Informational; the method
/// itself never uses it.
pub fn prior_feature_residual(prior_feats: &[Vec<f64>], dw: &[Vec<f64>]) -> Result<f64> {
    if prior_feats.is_empty() || dw.is_empty() {
        return Err(Error::Config("prior_feature_residual: empty input".into()));
    }
    let dim = prior_feats[0].len();
    let mut mean = vec![0.0; dim];
    for f in prior_feats {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v / prior_feats.len() as f64;
        }
    }
    let n = norm2(&mean);
    if n > 0.0 {
        for m in mean.iter_mut() {
            *m /= n;
        }
    }
    let mut total = 0.0;
    for col in dw {
        let p: f64 = mean.iter().zip(col).map(|(a, b)| a * b).sum();
        total += p * p;
    }
    Ok(total / dw.len() as f64)
}

/// Weight-norm growth verdict over a per-session block-norm series.
#[derive(Debug, Clone, Serialize)]
pub struct NormTrace {
    /// Frobenius norm of block t measured at the end of session t, t >= 1.
    pub norms: Vec<f64>,
    /// Fraction of included adjacent pairs with strict growth.
    pub growth_fraction: f64,
    pub pairs_total: usize,
    pub pairs_excluded: usize,
}

/// Outlier rule: a point is excluded when it deviates from the running
/// median (of the series up to and including it) by more than 3 MAD.
fn is_outlier(norms: &[f64], i: usize) -> bool {
    let prefix = &norms[..=i];
    let med = median(prefix);
    let devs: Vec<f64> = prefix.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&devs).max(1e-12);
    (norms[i] - med).abs() > 3.0 * mad
}

pub fn growth_verdict(norms: &[f64]) -> NormTrace {
    let mut total = 0usize;
    let mut excluded = 0usize;
    let mut grew = 0usize;
    for i in 1..norms.len() {
        total += 1;
        if is_outlier(norms, i - 1) || is_outlier(norms, i) {
            excluded += 1;
            continue;
        }
        if norms[i] > norms[i - 1] {
            grew += 1;
        }
    }
    let included = total - excluded;
    NormTrace {
        norms: norms.to_vec(),
        growth_fraction: if included > 0 {
            grew as f64 / included as f64
        } else {
            0.0
        },
        pairs_total: total,
        pairs_excluded: excluded,
    }
}

/// Extract the incremental block-norm series from an experiment (block t at
/// the end of its own session) and apply the growth verdict. The experiment
/// must have run with raw logits and an unfrozen classifier.
pub fn weight_norm_trace(result: &ExperimentResult) -> Result<NormTrace> {
    let flags = result.model.flags;
    if flags.normalize_weights || flags.freeze_classifier {
        return Err(Error::Config(
            "weight_norm_trace: requires raw logits and an unfrozen classifier".into(),
        ));
    }
    let norms: Vec<f64> = result
        .reports
        .iter()
        .skip(1)
        .map(|r| r.block_norms[r.t])
        .collect();
    Ok(growth_verdict(&norms))
}

/// One run of the ablation grid.
#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub normalize: bool,
    pub freeze_classifier: bool,
    pub freeze_embedding: bool,
    pub seed: u64,
    pub a_bar: f64,
    pub f: Option<f64>,
}

/// One row of the truth table: for fixed (p, q), does freezing the embedding
/// improve the median accuracy by more than epsilon points?
#[derive(Debug, Clone, Serialize)]
pub struct TruthRow {
    pub p: bool,
    pub q: bool,
    /// Median accuracy (percent) with the embedding frozen.
    pub a_bar_frozen: f64,
    /// Median accuracy (percent) with the embedding fine-tuned.
    pub a_bar_unfrozen: f64,
    pub delta_points: f64,
    pub r: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationOutcome {
    pub cells: Vec<AblationCell>,
    pub rows: Vec<TruthRow>,
    /// not-p and not-q implies r
    pub c2: bool,
    /// p or q iff not-r
    pub c3: bool,
    /// p or q implies not-r
    pub c4: bool,
    pub biconditional: bool,
}

/// Run every (normalize, freeze-classifier, freeze-embedding) combination
/// over the given seeds and evaluate the conjecture truth table. `eps_points`
/// is the accuracy-point margin defining "improves".
pub fn ablation_grid(
    stream: &SessionStream,
    net_spec: &NetSpec,
    base_opt: &OptimConfig,
    session_opt: &OptimConfig,
    seeds: &[u64],
    eps_points: f64,
) -> Result<AblationOutcome> {
    if !(eps_points > 0.0) {
        return Err(Error::Config("ablation_grid: eps must be positive".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation_grid: no seeds".into()));
    }

    let mut jobs = Vec::new();
    for &seed in seeds {
        for combo in 0..8u8 {
            jobs.push((seed, combo & 1 != 0, combo & 2 != 0, combo & 4 != 0));
        }
    }
    let cells: Vec<AblationCell> = jobs
        .par_iter()
        .map(|&(seed, p, q, emb)| {
            let flags = RunFlags {
                contrastive_base: true,
                freeze_embedding: emb,
                normalize_weights: p,
                freeze_classifier: q,
                mode: Mode::Knowe,
            };
            let res = run_experiment(
                stream,
                flags,
                net_spec,
                base_opt,
                session_opt,
                derive_seed(seed, "ablation"),
                None,
            )?;
            Ok(AblationCell {
                normalize: p,
                freeze_classifier: q,
                freeze_embedding: emb,
                seed,
                a_bar: res.summary.a_bar,
                f: res.summary.f,
            })
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(4);
    for (p, q) in [(false, false), (true, true), (true, false), (false, true)] {
        let med = |emb: bool| -> f64 {
            let vals: Vec<f64> = cells
                .iter()
                .filter(|c| {
                    c.normalize == p && c.freeze_classifier == q && c.freeze_embedding == emb
                })
                .map(|c| c.a_bar * 100.0)
                .collect();
            median(&vals)
        };
        let frozen = med(true);
        let unfrozen = med(false);
        let delta = frozen - unfrozen;
        rows.push(TruthRow {
            p,
            q,
            a_bar_frozen: frozen,
            a_bar_unfrozen: unfrozen,
            delta_points: delta,
            r: delta > eps_points,
        });
    }

    let c2 = rows.iter().all(|row| row.p || row.q || row.r);
    let c4 = rows.iter().all(|row| !(row.p || row.q) || !row.r);
    let biconditional = rows.iter().all(|row| (row.p || row.q) == !row.r);
    Ok(AblationOutcome {
        cells,
        rows,
        c2,
        c3: biconditional,
        c4,
        biconditional,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_session_stream, Hierarchy, SynthParams};
    use crate::rng::RunRng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn stability_decay_identical_is_zero() {
        let o = vec![0.4, -0.2, 0.9];
        assert_eq!(stability_decay(&o, &o).unwrap(), 0.0);
    }

    #[test]
    fn stability_decay_idealized_unfrozen_normalized() {
        // logits flip sign entirely: (1, -1) -> (-1, 1) gives D = 8
        let d = stability_decay(&[1.0, -1.0], &[-1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(d, 8.0, epsilon = 1e-12);
    }

    #[test]
    fn stability_decay_idealized_frozen_normalized() {
        // superclass logit stays 1, the other flips -1 -> 1: D = 4
        let d = stability_decay(&[1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(d, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn stability_decay_ignores_columns_added_later() {
        let d = stability_decay(&[1.0, -1.0], &[1.0, 1.0, 123.0, -7.0]).unwrap();
        assert_abs_diff_eq!(d, 4.0, epsilon = 1e-12);
        assert!(stability_decay(&[1.0, 1.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn stability_decay_zero_denominator_is_undefined() {
        assert!(matches!(
            stability_decay(&[1.0, 0.0], &[1.0, 1.0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn stability_decay_nonnegative_and_permutation_invariant() {
        let mut rng = RunRng::new(3);
        for _ in 0..50 {
            let o1: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..2.0)).collect();
            let o2: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let d = stability_decay(&o1, &o2).unwrap();
            assert!(d >= 0.0);
            let r1: Vec<f64> = o1.iter().rev().cloned().collect();
            let r2: Vec<f64> = o2.iter().rev().cloned().collect();
            assert_abs_diff_eq!(d, stability_decay(&r1, &r2).unwrap(), epsilon = 1e-12);
        }
    }

    fn random_head(dim: usize, cols: usize, lambda: f64, seed: u64) -> ClassifierHead<f64> {
        let mut rng = RunRng::new(seed);
        let columns: Vec<Vec<f64>> = (0..cols)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        ClassifierHead::new(columns, true, lambda).unwrap()
    }

    #[test]
    fn plasticity_probe_descends_on_random_trials() {
        for trial in 0..30u64 {
            let head = random_head(8, 5, 0.5, trial + 1);
            let mut rng = RunRng::new(trial + 500);
            let feats: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let batch: Vec<(&[f64], usize)> = feats
                .iter()
                .map(|f| (&f[..], rng.random_range(0..5)))
                .collect();
            let rep = plasticity_probe(&head, &batch, &LR_GRID).unwrap();
            assert!(!rep.stationary);
            assert!(rep.inner_product > 0.0, "trial {trial}");
            let at_1e3 = rep.deltas.iter().find(|(lr, _)| *lr == 1e-3).unwrap().1;
            assert!(at_1e3 < 0.0, "trial {trial}: delta {at_1e3}");
        }
    }

    #[test]
    fn plasticity_inner_product_matches_summation_oracle() {
        let head = random_head(6, 4, 0.5, 42);
        let mut rng = RunRng::new(43);
        let feats: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let batch: Vec<(&[f64], usize)> = feats.iter().map(|f| (&f[..], 1usize)).collect();
        let rep = plasticity_probe(&head, &batch, &[1e-3]).unwrap();

        let mut unit = head.clone();
        unit.lambda = 1.0;
        let dw = unit.loss_grad(&batch).unwrap().w_grads;
        let g = head.loss_grad(&batch).unwrap().w_grads;
        let mut oracle = 0.0;
        for i in 0..4 {
            for k in 0..6 {
                oracle += dw[i][k] * g[i][k];
            }
        }
        assert_abs_diff_eq!(rep.inner_product, oracle, epsilon = 1e-12);
    }

    #[test]
    fn plasticity_stationary_limit() {
        // A huge margin at a tiny temperature saturates the softmax, so the
        // gradient all but vanishes.
        let f = vec![1.0, 0.0];
        let mut head =
            ClassifierHead::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], true, 0.01).unwrap();
        head.lambda = 0.01;
        let batch: Vec<(&[f64], usize)> = vec![(&f[..], 0)];
        let rep = plasticity_probe(&head, &batch, &[1e-3]).unwrap();
        assert!(rep.stationary);
        assert!(rep.inner_product >= 0.0);
        assert!(rep.deltas[0].1.abs() < 1e-9);
    }

    #[test]
    fn plasticity_requires_normalized_head() {
        let mut head = random_head(4, 3, 0.5, 7);
        head.normalize = false;
        let f = vec![1.0, 0.0, 0.0, 0.0];
        assert!(plasticity_probe(&head, &[(&f[..], 0)], &[1e-3]).is_err());
    }

    #[test]
    fn growth_verdict_cases() {
        let up = growth_verdict(&[1.0, 1.5, 2.0, 2.4]);
        assert_eq!(up.growth_fraction, 1.0);
        assert_eq!(up.pairs_total, 3);
        assert_eq!(up.pairs_excluded, 0);

        let down = growth_verdict(&[2.0, 1.5, 1.0]);
        assert_eq!(down.growth_fraction, 0.0);

        let flat = growth_verdict(&[1.0, 1.0, 1.0]);
        assert_eq!(flat.growth_fraction, 0.0);
    }

    #[test]
    fn growth_verdict_excludes_outlier_pairs() {
        // A single spike breaks both of its adjacent pairs, leaving the
        // clean growth pairs intact.
        let t = growth_verdict(&[1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 500.0, 1.6, 1.7]);
        assert_eq!(t.pairs_excluded, 2);
        assert_eq!(t.growth_fraction, 1.0);
    }

    #[test]
    fn prior_feature_residual_orthogonal_update_is_zero() {
        let prior = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let dw = vec![vec![0.0, 2.0]];
        assert_abs_diff_eq!(
            prior_feature_residual(&prior, &dw).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        let dw = vec![vec![3.0, 0.0]];
        assert_abs_diff_eq!(
            prior_feature_residual(&prior, &dw).unwrap(),
            9.0,
            epsilon = 1e-12
        );
    }

    fn tiny_stream(seed: u64, t_sessions: usize) -> SessionStream {
        let h = Hierarchy::balanced(3, 2).unwrap();
        let params = SynthParams {
            input_dim: 6,
            coarse_sep: 10.0,
            fine_sep: 3.0,
            noise_sigma: 0.4,
            n_per_fine: 30,
        };
        let ds = generate_synthetic(&h, &params, seed).unwrap();
        make_session_stream(&ds, 2, 5, 5, t_sessions, seed).unwrap()
    }

    fn tiny_opt(epochs: usize) -> OptimConfig {
        OptimConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
            epochs,
            tau: 0.2,
            view_jitter: 0.2,
        }
    }

    fn tiny_spec() -> NetSpec {
        NetSpec {
            hidden: vec![16],
            feat_dim: 8,
            proj_hidden: 8,
            proj_dim: 8,
            lambda: 0.5,
        }
    }

    #[test]
    fn single_session_stream_gives_zero_decay() {
        let stream = tiny_stream(2, 1);
        let (medians, _) =
            stability_medians_for_seed(&stream, &tiny_spec(), &tiny_opt(8), &tiny_opt(10), 2)
                .unwrap();
        for m in medians {
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ablation_grid_shape_and_threshold_limit() {
        let stream = tiny_stream(3, 2);
        let seeds = [1u64, 2];
        let out = ablation_grid(
            &stream,
            &tiny_spec(),
            &tiny_opt(6),
            &tiny_opt(8),
            &seeds,
            1.0,
        )
        .unwrap();
        assert_eq!(out.cells.len(), 16);
        assert_eq!(out.rows.len(), 4);
        // every (p, q, emb) combination appears once per seed
        for p in [false, true] {
            for q in [false, true] {
                for emb in [false, true] {
                    let n = out
                        .cells
                        .iter()
                        .filter(|c| {
                            c.normalize == p
                                && c.freeze_classifier == q
                                && c.freeze_embedding == emb
                        })
                        .count();
                    assert_eq!(n, seeds.len());
                }
            }
        }

        // a huge threshold makes r false everywhere
        let wide = ablation_grid(
            &stream,
            &tiny_spec(),
            &tiny_opt(6),
            &tiny_opt(8),
            &seeds,
            1e9,
        )
        .unwrap();
        assert!(wide.rows.iter().all(|row| !row.r));
        assert!(wide.c4);
        assert!(!wide.c2);
        assert!(!wide.biconditional);
        assert_eq!(wide.c3, wide.biconditional);

        assert!(ablation_grid(
            &stream,
            &tiny_spec(),
            &tiny_opt(6),
            &tiny_opt(8),
            &seeds,
            0.0
        )
        .is_err());
    }

    #[test]
    fn weight_norm_trace_rejects_wrong_flags() {
        let stream = tiny_stream(4, 2);
        let res = run_experiment(
            &stream,
            RunFlags::knowe(),
            &tiny_spec(),
            &tiny_opt(5),
            &tiny_opt(5),
            4,
            None,
        )
        .unwrap();
        assert!(weight_norm_trace(&res).is_err());
    }

    #[test]
    fn frozen_normalized_run_keeps_block_norms_constant() {
        let stream = tiny_stream(5, 2);
        let res = run_experiment(
            &stream,
            RunFlags::knowe(),
            &tiny_spec(),
            &tiny_opt(5),
            &tiny_opt(8),
            5,
            None,
        )
        .unwrap();
        // block 1's norm at session 1 must match its norm at session 2
        let n1_at_1 = res.reports[1].block_norms[1];
        let n1_at_2 = res.reports[2].block_norms[1];
        assert_eq!(n1_at_1, n1_at_2);
        let n0_at_0 = res.reports[0].block_norms[0];
        let n0_at_2 = res.reports[2].block_norms[0];
        assert_eq!(n0_at_0, n0_at_2);
    }
}
