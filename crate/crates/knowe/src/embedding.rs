//! A small MLP embedding with hand-written backpropagation, trained on the
//! base session with a contrastive loss over within-coarse-class negatives
//! plus a coarse cross-entropy term.
//!
//! The two "views" of a sample are additive Gaussian jitters of its feature
//! vector. Keys come from a stop-gradient forward of the second view through
//! the same network; there is no memory queue or momentum encoder.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, norm2, softmax, Mat};
use crate::rng::RunRng;

const NORM_GUARD: f64 = 1e-12;

/// One dense layer `y = W x + b` with `W` of shape (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Mat<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn new(out_dim: usize, in_dim: usize, rng: &mut RunRng) -> Self {
        // He-style init for the ReLU trunk.
        let scale = (2.0 / in_dim as f64).sqrt();
        let w = Mat::from_fn(out_dim, in_dim, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        });
        Layer {
            w,
            b: vec![0.0; out_dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.w.matvec(x)?;
        for (yi, bi) in y.iter_mut().zip(&self.b) {
            *yi += bi;
        }
        Ok(y)
    }
}

/// Gradient for one layer.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub dw: Mat<f64>,
    pub db: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(layer: &Layer) -> Self {
        LayerGrad {
            dw: Mat::zeros(layer.w.rows, layer.w.cols),
            db: vec![0.0; layer.b.len()],
        }
    }

    fn accumulate(&mut self, d_out: &[f64], input: &[f64]) {
        for (r, &dz) in d_out.iter().enumerate() {
            for (c, &a) in input.iter().enumerate() {
                *self.dw.get_mut(r, c) += dz * a;
            }
            self.db[r] += dz;
        }
    }
}

/// Multi-layer perceptron: ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Forward cache for backprop: the input fed to each layer and each layer's
/// pre-activation output.
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().unwrap()
    }
}

impl Mlp {
    pub fn new(dims: &[usize], rng: &mut RunRng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Layer::new(w[1], w[0], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward_cache(&self, x: &[f64]) -> Result<MlpCache> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let z = layer.apply(&cur)?;
            cur = if i + 1 < self.layers.len() {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        Ok(MlpCache { inputs, pre })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cache(x)?.output().to_vec())
    }

    /// Backprop `d_out` (gradient w.r.t. the linear output) through the net,
    /// accumulating into `grads`; returns the gradient w.r.t. the input.
    pub fn backward(
        &self,
        cache: &MlpCache,
        d_out: &[f64],
        grads: &mut [LayerGrad],
    ) -> Result<Vec<f64>> {
        let n = self.layers.len();
        let mut dz = d_out.to_vec();
        for i in (0..n).rev() {
            grads[i].accumulate(&dz, &cache.inputs[i]);
            let d_in = self.layers[i].w.matvec_t(&dz)?;
            if i > 0 {
                // gate through the ReLU that produced this layer's input
                dz = d_in
                    .iter()
                    .zip(&cache.pre[i - 1])
                    .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
                    .collect();
            } else {
                return Ok(d_in);
            }
        }
        unreachable!("empty MLP");
    }

    pub fn zero_grads(&self) -> Vec<LayerGrad> {
        self.layers.iter().map(LayerGrad::zeros_like).collect()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.rows
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().unwrap().w.cols
    }
}

/// Fixed per-dimension affine input standardization, estimated once from the
/// base training split. Keeps activations at unit scale regardless of the
/// raw feature magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl InputNorm {
    pub fn fit(samples: &[Sample], dim: usize) -> Self {
        let n = samples.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, &v) in mean.iter_mut().zip(&s.x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((v, &x), m) in var.iter_mut().zip(&s.x).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let inv_std = var
            .iter()
            .map(|&v| {
                let s = v.sqrt();
                if s > 1e-12 {
                    1.0 / s
                } else {
                    1.0
                }
            })
            .collect();
        InputNorm { mean, inv_std }
    }
}

/// Trunk + projection head. `f` (the trunk output) feeds the classifier; `q`
/// (the L2-normalized projection output) feeds the contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    pub trunk: Mlp,
    pub head: Mlp,
    pub frozen: bool,
    /// Set by base training; identity until then.
    pub input_norm: Option<InputNorm>,
}

impl EmbeddingNet {
    /// `hidden` are the trunk's hidden widths; `feat_dim` is d.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        feat_dim: usize,
        proj_hidden: usize,
        proj_dim: usize,
        rng: &mut RunRng,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(feat_dim);
        let trunk = Mlp::new(&dims, rng);
        let head = Mlp::new(&[feat_dim, proj_hidden, proj_dim], rng);
        EmbeddingNet {
            trunk,
            head,
            frozen: false,
            input_norm: None,
        }
    }

    /// Apply the stored standardization (identity when unset).
    pub fn normalize_input(&self, x: &[f64]) -> Vec<f64> {
        match &self.input_norm {
            None => x.to_vec(),
            Some(n) => x
                .iter()
                .zip(&n.mean)
                .zip(&n.inv_std)
                .map(|((&v, &m), &s)| (v - m) * s)
                .collect(),
        }
    }

    /// Trunk forward with cache, input standardization applied.
    pub fn trunk_cache(&self, x: &[f64]) -> Result<MlpCache> {
        self.trunk.forward_cache(&self.normalize_input(x))
    }

    pub fn feat_dim(&self) -> usize {
        self.trunk.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    /// Trunk feature `f` and normalized projection `q`. A projection with
    /// norm below the guard is passed through unnormalized.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input dim {} != net input dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        let f = self.trunk.forward(&self.normalize_input(x))?;
        let u = self.head.forward(&f)?;
        let n = norm2(&u);
        let q = if n > NORM_GUARD {
            u.iter().map(|v| v / n).collect()
        } else {
            u
        };
        Ok((f, q))
    }

    pub fn feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.trunk.forward(&self.normalize_input(x))
    }

    /// Flat parameter vector (trunk then head, each layer W row-major then b).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for mlp in [&self.trunk, &self.head] {
            for layer in &mlp.layers {
                out.extend_from_slice(layer.w.data());
                out.extend_from_slice(&layer.b);
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        let mut off = 0;
        for mlp in [&mut self.trunk, &mut self.head] {
            for layer in &mut mlp.layers {
                let wlen = layer.w.rows * layer.w.cols;
                layer.w.data_mut().copy_from_slice(&params[off..off + wlen]);
                off += wlen;
                let blen = layer.b.len();
                layer.b.copy_from_slice(&params[off..off + blen]);
                off += blen;
            }
        }
        assert_eq!(off, params.len());
    }
}

/// One anchor for the contrastive loss: the normalized query, its positive
/// key, and its negative keys (same-coarse-class batch members).
pub struct ContrastItem<'a> {
    pub q: &'a [f64],
    pub k_pos: &'a [f64],
    pub negs: Vec<&'a [f64]>,
}

/// InfoNCE-style loss over the batch, summed over anchors, with analytic
/// gradients w.r.t. each `q`. Keys are constants (stop-gradient). An anchor
/// with no negatives contributes zero loss and gradient.
pub fn contrastive_loss(items: &[ContrastItem<'_>], tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if items.is_empty() {
        return Err(Error::Config("contrastive_loss: empty batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config("contrastive_loss: tau must be positive".into()));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(items.len());
    for item in items {
        let dim = item.q.len();
        if item.negs.is_empty() {
            grads.push(vec![0.0; dim]);
            continue;
        }
        let mut sims = Vec::with_capacity(1 + item.negs.len());
        sims.push(dot(item.q, item.k_pos) / tau);
        for k in &item.negs {
            sims.push(dot(item.q, k) / tau);
        }
        let p = softmax(&sims, 1.0)?;
        total -= p[0].max(1e-300).ln();
        // d/dq of -log softmax_0: (1/tau) * ((p0 - 1) k+ + sum_m p_m k_m)
        let mut dq = vec![0.0; dim];
        axpy((p[0] - 1.0) / tau, item.k_pos, &mut dq);
        for (m, k) in item.negs.iter().enumerate() {
            axpy(p[m + 1] / tau, k, &mut dq);
        }
        grads.push(dq);
    }
    Ok((total, grads))
}

/// SGD with momentum and weight decay:
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step(
    param: &mut [f64],
    vel: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, v), &g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Optimizer hyperparameters for one training phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Std of the additive Gaussian jitter that forms the two views.
    pub view_jitter: f64,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("lr and tau must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Everything `train_base` produces besides the mutated net.
pub struct BaseTrainOutput {
    /// Mean combined loss per epoch.
    pub loss_trace: Vec<f64>,
    /// The temporary coarse CE head (seeds the classifier's coarse columns).
    pub coarse_head: Layer,
}

pub(crate) struct NetGrads {
    pub trunk: Vec<LayerGrad>,
    pub head: Vec<LayerGrad>,
    pub coarse: LayerGrad,
}

/// Loss and full parameter gradients for one batch of paired views.
///
/// `views1` carries gradient; `views2` only produces stop-gradient keys.
/// Negatives for anchor `n` are the keys of the other batch members sharing
/// its coarse class.
pub(crate) fn base_batch_loss_grad(
    net: &EmbeddingNet,
    coarse_head: &Layer,
    views1: &[Vec<f64>],
    views2: &[Vec<f64>],
    coarse_labels: &[usize],
    tau: f64,
    use_contrastive: bool,
) -> Result<(f64, NetGrads)> {
    let n = views1.len();
    let mut trunk_caches = Vec::with_capacity(n);
    let mut head_caches = Vec::with_capacity(n);
    let mut qs = Vec::with_capacity(n);
    let mut u_norms = Vec::with_capacity(n);
    for v in views1 {
        let tc = net.trunk.forward_cache(&net.normalize_input(v))?;
        let hc = net.head.forward_cache(tc.output())?;
        let u = hc.output().to_vec();
        let un = norm2(&u);
        let q: Vec<f64> = if un > NORM_GUARD {
            u.iter().map(|x| x / un).collect()
        } else {
            u.clone()
        };
        trunk_caches.push(tc);
        head_caches.push(hc);
        qs.push(q);
        u_norms.push(un);
    }
    // Keys: stop-gradient forward of the second views.
    let mut keys = Vec::with_capacity(n);
    for v in views2 {
        let (_, k) = net.forward(v)?;
        keys.push(k);
    }

    let mut total_loss = 0.0;
    let mut trunk_grads = net.trunk.zero_grads();
    let mut head_grads = net.head.zero_grads();
    let mut coarse_grad = LayerGrad::zeros_like(coarse_head);

    // Contrastive branch.
    let mut dqs: Vec<Vec<f64>> = vec![Vec::new(); n];
    if use_contrastive {
        let items: Vec<ContrastItem<'_>> = (0..n)
            .map(|i| ContrastItem {
                q: &qs[i],
                k_pos: &keys[i],
                negs: (0..n)
                    .filter(|&m| m != i && coarse_labels[m] == coarse_labels[i])
                    .map(|m| &keys[m][..])
                    .collect(),
            })
            .collect();
        let (con_loss, con_grads) = contrastive_loss(&items, tau)?;
        total_loss += con_loss / n as f64;
        for (i, dq) in con_grads.into_iter().enumerate() {
            dqs[i] = dq.iter().map(|g| g / n as f64).collect();
        }
    }

    for i in 0..n {
        let f = trunk_caches[i].output();
        // Coarse CE branch on f.
        let z = coarse_head.apply(f)?;
        let p = softmax(&z, 1.0)?;
        total_loss -= p[coarse_labels[i]].max(1e-300).ln() / n as f64;
        let mut dz = p;
        dz[coarse_labels[i]] -= 1.0;
        for d in dz.iter_mut() {
            *d /= n as f64;
        }
        coarse_grad.accumulate(&dz, f);
        let mut df = coarse_head.w.matvec_t(&dz)?;

        // Contrastive branch: dq -> du (through normalization) -> head -> df.
        if use_contrastive && !dqs[i].is_empty() {
            let dq = &dqs[i];
            let un = u_norms[i];
            let du: Vec<f64> = if un > NORM_GUARD {
                let qdq = dot(&qs[i], dq);
                qs[i]
                    .iter()
                    .zip(dq)
                    .map(|(&qk, &dk)| (dk - qk * qdq) / un)
                    .collect()
            } else {
                dq.clone()
            };
            let df_con = net.head.backward(&head_caches[i], &du, &mut head_grads)?;
            for (a, b) in df.iter_mut().zip(&df_con) {
                *a += b;
            }
        }

        net.trunk.backward(&trunk_caches[i], &df, &mut trunk_grads)?;
    }

    Ok((
        total_loss,
        NetGrads {
            trunk: trunk_grads,
            head: head_grads,
            coarse: coarse_grad,
        },
    ))
}

/// Momentum buffers mirroring an MLP's parameters.
pub(crate) struct MlpVel {
    layers: Vec<LayerGrad>,
}

impl MlpVel {
    pub(crate) fn new(mlp: &Mlp) -> Self {
        MlpVel {
            layers: mlp.zero_grads(),
        }
    }
}

pub(crate) fn apply_mlp_sgd(
    mlp: &mut Mlp,
    vel: &mut MlpVel,
    grads: &[LayerGrad],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((layer, v), g) in mlp.layers.iter_mut().zip(&mut vel.layers).zip(grads) {
        sgd_step(
            layer.w.data_mut(),
            v.dw.data_mut(),
            g.dw.data(),
            lr,
            momentum,
            weight_decay,
        );
        sgd_step(&mut layer.b, &mut v.db, &g.db, lr, momentum, weight_decay);
    }
}

/// Train the embedding on the coarse-labeled base split. Returns the loss
/// trace and the temporary coarse head. With `net.frozen` set or zero epochs
/// the net is untouched (the coarse head is still initialized, untrained).
pub fn train_base(
    net: &mut EmbeddingNet,
    base_train: &[Sample],
    r_coarse: usize,
    opt: &OptimConfig,
    use_contrastive: bool,
    seed: u64,
) -> Result<BaseTrainOutput> {
    opt.validate()?;
    if base_train.is_empty() {
        return Err(Error::Config("train_base: empty base split".into()));
    }
    let root = RunRng::new(seed);
    let mut init_rng = root.fork("coarse-head-init");
    let mut coarse_head = Layer::new(r_coarse, net.feat_dim(), &mut init_rng);

    // Standardization is preprocessing, not a trained parameter; it is set
    // even for frozen or zero-epoch runs so evaluation sees the same scale.
    let dim = net.input_dim();
    net.input_norm = Some(InputNorm::fit(base_train, dim));

    if net.frozen {
        return Ok(BaseTrainOutput {
            loss_trace: Vec::new(),
            coarse_head,
        });
    }

    let mut shuffle_rng = root.fork("batch-shuffle");
    let mut jitter_rng = root.fork("view-jitter");
    let mut trunk_vel = MlpVel::new(&net.trunk);
    let mut head_vel = MlpVel::new(&net.head);
    let mut coarse_vel = LayerGrad::zeros_like(&coarse_head);

    let mut loss_trace = Vec::with_capacity(opt.epochs);
    let mut order: Vec<usize> = (0..base_train.len()).collect();
    for _epoch in 0..opt.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opt.batch_size) {
            let mut views1 = Vec::with_capacity(chunk.len());
            let mut views2 = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &base_train[i];
                let jitter = |rng: &mut RunRng, x: &[f64]| -> Vec<f64> {
                    x.iter()
                        .map(|&v| {
                            let z: f64 = StandardNormal.sample(rng);
                            v + z * opt.view_jitter
                        })
                        .collect()
                };
                views1.push(jitter(&mut jitter_rng, &s.x));
                views2.push(jitter(&mut jitter_rng, &s.x));
                labels.push(s.coarse);
            }
            let (loss, grads) = base_batch_loss_grad(
                net,
                &coarse_head,
                &views1,
                &views2,
                &labels,
                opt.tau,
                use_contrastive,
            )?;
            epoch_loss += loss;
            batches += 1;
            apply_mlp_sgd(
                &mut net.trunk,
                &mut trunk_vel,
                &grads.trunk,
                opt.lr,
                opt.momentum,
                opt.weight_decay,
            );
            apply_mlp_sgd(
                &mut net.head,
                &mut head_vel,
                &grads.head,
                opt.lr,
                opt.momentum,
                opt.weight_decay,
            );
            sgd_step(
                coarse_head.w.data_mut(),
                coarse_vel.dw.data_mut(),
                grads.coarse.dw.data(),
                opt.lr,
                opt.momentum,
                opt.weight_decay,
            );
            sgd_step(
                &mut coarse_head.b,
                &mut coarse_vel.db,
                &grads.coarse.db,
                opt.lr,
                opt.momentum,
                opt.weight_decay,
            );
        }
        loss_trace.push(epoch_loss / batches.max(1) as f64);
    }

    Ok(BaseTrainOutput {
        loss_trace,
        coarse_head,
    })
}

/// Coarse accuracy of the temporary head on a held-out split.
pub fn coarse_head_accuracy(
    net: &EmbeddingNet,
    coarse_head: &Layer,
    samples: &[Sample],
) -> Result<f64> {
    let mut correct = 0usize;
    for s in samples {
        let f = net.feature(&s.x)?;
        let z = coarse_head.apply(&f)?;
        let pred = (0..z.len())
            .max_by(|&a, &b| z[a].partial_cmp(&z[b]).unwrap())
            .unwrap();
        if pred == s.coarse {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// 1-nearest-neighbor fine accuracy in trunk feature space: probes are
/// classified by their nearest reference sample's fine label.
pub fn fine_1nn_accuracy(
    net: &EmbeddingNet,
    reference: &[Sample],
    probes: &[Sample],
) -> Result<f64> {
    let ref_feats: Vec<(Vec<f64>, usize)> = reference
        .iter()
        .map(|s| Ok((net.feature(&s.x)?, s.fine)))
        .collect::<Result<_>>()?;
    let mut correct = 0usize;
    for p in probes {
        let f = net.feature(&p.x)?;
        let mut best = (f64::INFINITY, 0usize);
        for (rf, fine) in &ref_feats {
            let d2: f64 = rf.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 {
                best = (d2, *fine);
            }
        }
        if best.1 == p.fine {
            correct += 1;
        }
    }
    Ok(correct as f64 / probes.len() as f64)
}
