//! The bias-free linear head: optional cosine normalization, per-session
//! column blocks, freeze masks, and the support-set cross-entropy
//! loss/gradient (including the projection term of the normalized mode).

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, softmax, Real};
use crate::rng::RunRng;

const ZERO_NORM_GUARD: f64 = 1e-12;

/// Weight head over features: columns grouped into session blocks. Block 0
/// holds the coarse columns; block t holds the C columns added in session t.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<F> {
    dim: usize,
    columns: Vec<Vec<F>>,
    frozen: Vec<bool>,
    /// Column range (start, end) of each block; block 0 = coarse.
    blocks: Vec<(usize, usize)>,
    pub normalize: bool,
    pub lambda: F,
}

/// Loss value plus gradients from one batch.
#[derive(Debug, Clone)]
pub struct LossGrad<F> {
    pub loss: F,
    /// Per-column weight gradient; frozen columns are exactly zero.
    pub w_grads: Vec<Vec<F>>,
    /// Per-sample gradient w.r.t. the input feature (for unfrozen embeddings).
    pub f_grads: Vec<Vec<F>>,
}

impl<F: Real> ClassifierHead<F> {
    /// Create a head whose block 0 is the given coarse columns (all unfrozen).
    pub fn new(coarse_columns: Vec<Vec<F>>, normalize: bool, lambda: F) -> Result<Self> {
        if coarse_columns.is_empty() {
            return Err(Error::Config("head needs at least one coarse column".into()));
        }
        let dim = coarse_columns[0].len();
        if coarse_columns.iter().any(|c| c.len() != dim) {
            return Err(Error::Shape("coarse columns have mixed dimensions".into()));
        }
        if !(lambda > F::zero()) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        let n = coarse_columns.len();
        Ok(Self {
            dim,
            columns: coarse_columns,
            frozen: vec![false; n],
            blocks: vec![(0, n)],
            normalize,
            lambda,
        })
    }

    /// Rebuild a head from stored parts (checkpoint loading).
    pub(crate) fn from_parts(
        columns: Vec<Vec<F>>,
        frozen: Vec<bool>,
        blocks: Vec<(usize, usize)>,
        normalize: bool,
        lambda: F,
    ) -> Result<Self> {
        if columns.is_empty() || frozen.len() != columns.len() {
            return Err(Error::Shape("head parts: column/mask length mismatch".into()));
        }
        let dim = columns[0].len();
        if columns.iter().any(|c| c.len() != dim) {
            return Err(Error::Shape("head parts: mixed column dimensions".into()));
        }
        let mut expected = 0usize;
        for &(s, e) in &blocks {
            if s != expected || e <= s {
                return Err(Error::Shape("head parts: blocks are not contiguous".into()));
            }
            expected = e;
        }
        if expected != columns.len() {
            return Err(Error::Shape("head parts: blocks do not cover columns".into()));
        }
        if !(lambda > F::zero()) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        Ok(Self {
            dim,
            columns,
            frozen,
            blocks,
            normalize,
            lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    /// Number of incremental sessions whose block exists (block count - 1).
    pub fn session_count(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn column(&self, i: usize) -> &[F] {
        &self.columns[i]
    }

    pub fn column_mut(&mut self, i: usize) -> &mut Vec<F> {
        &mut self.columns[i]
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn block_range(&self, t: usize) -> (usize, usize) {
        self.blocks[t]
    }

    pub fn set_all_unfrozen(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = false);
    }

    pub fn freeze_prior_blocks(&mut self) {
        let (start, _) = *self.blocks.last().unwrap();
        for i in 0..start {
            self.frozen[i] = true;
        }
    }

    pub fn set_block_frozen(&mut self, t: usize, frozen: bool) {
        let (start, end) = self.blocks[t];
        for i in start..end {
            self.frozen[i] = frozen;
        }
    }

    /// Append `c_way` new columns as the next session block. All prior
    /// columns are frozen; the new columns are drawn from a centered Gaussian
    /// with standard deviation `init_sigma` (default `1/sqrt(d)`).
    pub fn augment(&mut self, c_way: usize, init_sigma: Option<F>, rng: &mut RunRng) {
        let sigma = init_sigma
            .unwrap_or_else(|| F::one() / F::from_usize(self.dim).unwrap().sqrt());
        self.frozen.iter_mut().for_each(|f| *f = true);
        let start = self.columns.len();
        for _ in 0..c_way {
            let col: Vec<F> = (0..self.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    F::from_f64(z).unwrap() * sigma
                })
                .collect();
            self.columns.push(col);
            self.frozen.push(false);
        }
        self.blocks.push((start, self.columns.len()));
    }

    /// Raw or cosine-normalized logits for a feature vector.
    pub fn logits(&self, f: &[F]) -> Result<Vec<F>> {
        if f.len() != self.dim {
            return Err(Error::Shape(format!(
                "feature dim {} != head dim {}",
                f.len(),
                self.dim
            )));
        }
        let guard = F::from_f64(ZERO_NORM_GUARD).unwrap();
        if self.normalize {
            let fnorm = norm2(f);
            if fnorm < guard {
                return Err(Error::Numeric("zero-norm feature under normalization".into()));
            }
            self.columns
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let wnorm = norm2(w);
                    if wnorm < guard {
                        Err(Error::Numeric(format!("zero-norm weight column {i}")))
                    } else {
                        Ok(dot(w, f) / (wnorm * fnorm))
                    }
                })
                .collect()
        } else {
            Ok(self.columns.iter().map(|w| dot(w, f)).collect())
        }
    }

    /// Class probabilities `softmax(logits / lambda)`.
    pub fn predict_proba(&self, f: &[F]) -> Result<Vec<F>> {
        softmax(&self.logits(f)?, self.lambda)
    }

    /// Argmax column; ties break to the lowest index.
    pub fn predict(&self, f: &[F]) -> Result<usize> {
        let o = self.logits(f)?;
        let mut best = 0;
        for (i, &v) in o.iter().enumerate() {
            if v > o[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Mean cross-entropy over the batch (labels are column indices) with
    /// analytic gradients. The softmax runs over every column of the head, so
    /// old classes compete with new ones. Frozen columns receive a zero
    /// gradient.
    pub fn loss_grad(&self, batch: &[(&[F], usize)]) -> Result<LossGrad<F>> {
        if batch.is_empty() {
            return Err(Error::Config("loss_grad: empty batch".into()));
        }
        let n_cols = self.columns.len();
        let inv_n = F::one() / F::from_usize(batch.len()).unwrap();
        let mut loss = F::zero();
        let mut w_grads = vec![vec![F::zero(); self.dim]; n_cols];
        let mut f_grads = Vec::with_capacity(batch.len());

        let w_norms: Vec<F> = self.columns.iter().map(|w| norm2(w)).collect();

        for &(f, label) in batch {
            if label >= n_cols {
                return Err(Error::Label(format!(
                    "label {label} outside the {n_cols}-column head"
                )));
            }
            let o = self.logits(f)?;
            let p = softmax(&o, self.lambda)?;
            let tiny = F::from_f64(1e-300).unwrap();
            loss = loss - (p[label].max(tiny)).ln() * inv_n;

            let fnorm = norm2(f);
            let mut df = vec![F::zero(); self.dim];
            for i in 0..n_cols {
                // dL/do_i per sample, averaged, with the 1/lambda chain factor.
                let delta = if i == label { F::one() } else { F::zero() };
                let dl_do = (p[i] - delta) / self.lambda * inv_n;
                if self.normalize {
                    let wn = w_norms[i];
                    let wf = dot(&self.columns[i], f);
                    if !self.frozen[i] {
                        // projection term: d(cos)/dw = f/(|f||w|) - w (w.f)/(|f||w|^3)
                        let a = F::one() / (fnorm * wn);
                        let b = wf / (fnorm * wn * wn * wn);
                        for k in 0..self.dim {
                            w_grads[i][k] =
                                w_grads[i][k] + dl_do * (f[k] * a - self.columns[i][k] * b);
                        }
                    }
                    // d(cos)/df = w/(|w||f|) - f (w.f)/(|w||f|^3)
                    let a = F::one() / (wn * fnorm);
                    let b = wf / (wn * fnorm * fnorm * fnorm);
                    for k in 0..self.dim {
                        df[k] = df[k] + dl_do * (self.columns[i][k] * a - f[k] * b);
                    }
                } else {
                    if !self.frozen[i] {
                        for k in 0..self.dim {
                            w_grads[i][k] = w_grads[i][k] + dl_do * f[k];
                        }
                    }
                    for k in 0..self.dim {
                        df[k] = df[k] + dl_do * self.columns[i][k];
                    }
                }
            }
            f_grads.push(df);
        }

        Ok(LossGrad {
            loss,
            w_grads,
            f_grads,
        })
    }

    /// Session-restricted loss: labels must lie in the current session's
    /// block `t`, while the softmax runs over every existing column.
    pub fn support_loss_grad(
        &self,
        batch: &[(&[F], usize)],
        session_t: usize,
    ) -> Result<LossGrad<F>> {
        let (start, end) = *self
            .blocks
            .get(session_t)
            .ok_or_else(|| Error::Config(format!("no block for session {session_t}")))?;
        for &(_, label) in batch {
            if label < start || label >= end {
                return Err(Error::Label(format!(
                    "label {label} outside session-{session_t} block [{start}, {end})"
                )));
            }
        }
        self.loss_grad(batch)
    }

    /// Frobenius norm over the columns of block `t`.
    pub fn frobenius_block_norm(&self, t: usize) -> F {
        let (start, end) = self.blocks[t];
        self.columns[start..end]
            .iter()
            .flat_map(|c| c.iter())
            .fold(F::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }
}
