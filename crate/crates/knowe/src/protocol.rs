//! The coarse-to-fine incremental loop: base session, then T few-shot
//! sessions, each training on its support set and evaluated on its query set,
//! under configurable ablation flags.

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierHead;
use crate::data::SessionStream;
use crate::embedding::{
    apply_mlp_sgd, sgd_step, train_base, EmbeddingNet, MlpVel, OptimConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricSeries};
use crate::rng::RunRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Knowe,
    FtBaseline,
    JointUpperBound,
}

/// The four ablation switches plus the run mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFlags {
    pub contrastive_base: bool,
    pub freeze_embedding: bool,
    pub normalize_weights: bool,
    pub freeze_classifier: bool,
    pub mode: Mode,
}

impl RunFlags {
    pub fn knowe() -> Self {
        RunFlags {
            contrastive_base: true,
            freeze_embedding: true,
            normalize_weights: true,
            freeze_classifier: true,
            mode: Mode::Knowe,
        }
    }

    pub fn ft_baseline() -> Self {
        RunFlags {
            contrastive_base: false,
            freeze_embedding: false,
            normalize_weights: false,
            freeze_classifier: false,
            mode: Mode::FtBaseline,
        }
    }

    pub fn joint_upper_bound() -> Self {
        RunFlags {
            mode: Mode::JointUpperBound,
            ..RunFlags::knowe()
        }
    }
}

/// Embedding architecture and head temperature.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub hidden: Vec<usize>,
    pub feat_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub lambda: f64,
}

impl NetSpec {
    pub fn desk() -> Self {
        NetSpec {
            hidden: vec![64, 64],
            feat_dim: 32,
            proj_hidden: 32,
            proj_dim: 32,
            lambda: 0.5,
        }
    }
}

/// The evolving model: embedding, head, and the fine-class -> column map.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: EmbeddingNet,
    pub head: ClassifierHead<f64>,
    /// Column index assigned to each fine class, once introduced.
    pub column_of_fine: Vec<Option<usize>>,
    pub flags: RunFlags,
}

/// Per-session evaluation outcome.
#[derive(Debug, Clone, Serialize)]
pub struct SessionReport {
    pub t: usize,
    /// Coarse accuracy; absent when the coarse query pool is empty.
    pub a_c: Option<f64>,
    /// Fine accuracy; absent at the base session.
    pub a_f: Option<f64>,
    /// Accuracy over the whole query set.
    pub a_t: f64,
    /// Accuracy on the classes introduced this session.
    pub now_acc: Option<f64>,
    /// True-class column ids labelling the confusion rows.
    pub confusion_rows: Vec<usize>,
    /// Counts: rows follow `confusion_rows`, columns are predicted column ids.
    pub confusion: Vec<Vec<usize>>,
    /// Frobenius norm of each existing block (0 = coarse).
    pub block_norms: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub a_bar: f64,
    pub f: Option<f64>,
    /// (session, fine forgetting) for t = 2..=T where defined.
    pub f_f: Vec<(usize, f64)>,
    /// (session, coarse forgetting) for t = 1..T where defined.
    pub f_c: Vec<(usize, f64)>,
}

pub struct ExperimentResult {
    pub model: Model,
    pub reports: Vec<SessionReport>,
    pub summary: ExperimentSummary,
    /// For each session 0..=T, for each probe input, the logits at that
    /// session's end. Empty when no probes were supplied.
    pub probe_traces: Vec<Vec<Vec<f64>>>,
}

/// Base session: train the embedding on the coarse split, seed the head's
/// coarse columns from the temporary coarse head, freeze the embedding if
/// the flags say so.
pub fn run_base_session(
    stream: &SessionStream,
    flags: RunFlags,
    net_spec: &NetSpec,
    opt: &OptimConfig,
    seed: u64,
) -> Result<Model> {
    let root = RunRng::new(seed);
    let mut net = EmbeddingNet::new(
        stream.input_dim,
        &net_spec.hidden,
        net_spec.feat_dim,
        net_spec.proj_hidden,
        net_spec.proj_dim,
        &mut root.fork("net-init"),
    );
    let out = train_base(
        &mut net,
        &stream.base_train,
        stream.hierarchy.coarse_count(),
        opt,
        flags.contrastive_base,
        crate::rng::derive_seed(seed, "base-train"),
    )?;
    net.frozen = flags.freeze_embedding;

    // Coarse columns = rows of the temporary coarse head's weight matrix.
    let coarse_columns: Vec<Vec<f64>> = (0..stream.hierarchy.coarse_count())
        .map(|r| out.coarse_head.w.row(r).to_vec())
        .collect();
    let head = ClassifierHead::new(coarse_columns, flags.normalize_weights, net_spec.lambda)?;

    Ok(Model {
        net,
        head,
        column_of_fine: vec![None; stream.hierarchy.fine_count()],
        flags,
    })
}

/// Global gradient-norm cap used when the embedding is fine-tuned during an
/// incremental session. Training the trunk through an un-normalized head can
/// diverge (logit scale and weight scale feed each other); the cap keeps such
/// runs finite. Head-only training self-limits through softmax saturation and
/// is left uncapped.
const MAX_GRAD_NORM: f64 = 10.0;

/// Phase one of an incremental session: append this session's classifier
/// columns (freezing prior blocks), apply the freeze policy, bind the new
/// fine classes to their columns, and for the joint upper bound re-draw
/// every incremental block. Exposed separately so analyses can observe the
/// head between augmentation and training.
pub fn augment_for_session(
    model: &mut Model,
    stream: &SessionStream,
    t: usize,
    seed: u64,
) -> Result<()> {
    if t == 0 || t > stream.sessions {
        return Err(Error::Config(format!("session index {t} out of range")));
    }
    let root = RunRng::new(seed);
    let flags = model.flags;

    model
        .head
        .augment(stream.c_way, None, &mut root.fork("augment"));
    if !flags.freeze_classifier {
        model.head.set_all_unfrozen();
    }
    let (start, _) = model.head.block_range(t);
    for (j, &fine) in stream.session_classes[t - 1].iter().enumerate() {
        model.column_of_fine[fine] = Some(start + j);
    }

    // Joint upper bound re-fits every incremental block from scratch on the
    // union of all supports seen so far (coarse columns stay frozen).
    let joint = flags.mode == Mode::JointUpperBound;
    if joint {
        let mut init_rng = root.fork("joint-reinit");
        let sigma = 1.0 / (model.head.dim() as f64).sqrt();
        for block in 1..=t {
            let (s, e) = model.head.block_range(block);
            for i in s..e {
                use rand_distr::Distribution;
                for v in model.head.column_mut(i).iter_mut() {
                    let z: f64 = rand_distr::StandardNormal.sample(&mut init_rng);
                    *v = z * sigma;
                }
            }
        }
        model.head.freeze_prior_blocks();
        for block in 1..=t {
            model.head.set_block_frozen(block, false);
        }
    }
    Ok(())
}

/// Phase two of an incremental session: train the unfrozen classifier
/// columns (and, when unfrozen, the embedding trunk) on the support pool.
pub fn train_session(
    model: &mut Model,
    stream: &SessionStream,
    t: usize,
    opt: &OptimConfig,
    seed: u64,
) -> Result<()> {
    if t == 0 || t > stream.sessions {
        return Err(Error::Config(format!("session index {t} out of range")));
    }
    opt.validate()?;
    let root = RunRng::new(seed);
    let flags = model.flags;
    let joint = flags.mode == Mode::JointUpperBound;

    // Training pool: this session's support, or all supports for joint mode.
    let mut pool: Vec<(Vec<f64>, usize)> = Vec::new();
    let sessions_used = if joint { 1..=t } else { t..=t };
    for s in sessions_used {
        for sample in &stream.supports[s - 1] {
            let col = model.column_of_fine[sample.fine].ok_or_else(|| {
                Error::Label(format!("fine class {} has no column", sample.fine))
            })?;
            pool.push((sample.x.clone(), col));
        }
    }

    let train_embedding = !flags.freeze_embedding && !model.net.frozen;
    // With a frozen embedding the features are constant across epochs.
    let cached_feats: Option<Vec<Vec<f64>>> = if train_embedding {
        None
    } else {
        Some(
            pool.iter()
                .map(|(x, _)| model.net.feature(x))
                .collect::<Result<_>>()?,
        )
    };

    let mut head_vel: Vec<Vec<f64>> = (0..model.head.num_columns())
        .map(|_| vec![0.0; model.head.dim()])
        .collect();
    let mut trunk_vel = MlpVel::new(&model.net.trunk);

    let mut shuffle_rng = root.fork("epoch-shuffle");
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for _epoch in 0..opt.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(opt.batch_size) {
            let mut trunk_caches = Vec::new();
            let feats: Vec<Vec<f64>> = match &cached_feats {
                Some(cache) => chunk.iter().map(|&i| cache[i].clone()).collect(),
                None => {
                    let mut fs = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let c = model.net.trunk_cache(&pool[i].0)?;
                        fs.push(c.output().to_vec());
                        trunk_caches.push(c);
                    }
                    fs
                }
            };
            let batch: Vec<(&[f64], usize)> = feats
                .iter()
                .zip(chunk.iter())
                .map(|(f, &i)| (&f[..], pool[i].1))
                .collect();
            let mut lg = if joint {
                model.head.loss_grad(&batch)?
            } else {
                model.head.support_loss_grad(&batch, t)?
            };

            let mut trunk_grads = model.net.trunk.zero_grads();
            if train_embedding {
                for (cache, df) in trunk_caches.iter().zip(&lg.f_grads) {
                    model.net.trunk.backward(cache, df, &mut trunk_grads)?;
                }
            }

            if train_embedding {
                let mut sq = 0.0;
                for (i, g) in lg.w_grads.iter().enumerate() {
                    if !model.head.is_frozen(i) {
                        sq += g.iter().map(|v| v * v).sum::<f64>();
                    }
                }
                for layer in &trunk_grads {
                    sq += layer.dw.data().iter().map(|v| v * v).sum::<f64>();
                    sq += layer.db.iter().map(|v| v * v).sum::<f64>();
                }
                let norm = sq.sqrt();
                if norm > MAX_GRAD_NORM {
                    let scale = MAX_GRAD_NORM / norm;
                    for g in &mut lg.w_grads {
                        for v in g.iter_mut() {
                            *v *= scale;
                        }
                    }
                    for layer in &mut trunk_grads {
                        for v in layer.dw.data_mut().iter_mut() {
                            *v *= scale;
                        }
                        for v in &mut layer.db {
                            *v *= scale;
                        }
                    }
                }
            }

            for i in 0..model.head.num_columns() {
                if model.head.is_frozen(i) {
                    continue;
                }
                let vel = &mut head_vel[i];
                sgd_step(
                    model.head.column_mut(i),
                    vel,
                    &lg.w_grads[i],
                    opt.lr,
                    opt.momentum,
                    opt.weight_decay,
                );
            }

            if train_embedding {
                apply_mlp_sgd(
                    &mut model.net.trunk,
                    &mut trunk_vel,
                    &trunk_grads,
                    opt.lr,
                    opt.momentum,
                    opt.weight_decay,
                );
            }
        }
    }
    Ok(())
}

/// One full incremental session: augmentation followed by support training.
pub fn run_incremental_session(
    model: &mut Model,
    stream: &SessionStream,
    t: usize,
    opt: &OptimConfig,
    seed: u64,
) -> Result<()> {
    augment_for_session(model, stream, t, seed)?;
    train_session(model, stream, t, opt, seed)
}

/// Score the query set `Q^(t)`: coarse-labeled queries are correct when the
/// predicted column is their coarse column, fine-labeled queries when it is
/// their fine column.
pub fn evaluate(model: &Model, stream: &SessionStream, t: usize) -> Result<SessionReport> {
    let queries = stream
        .queries
        .get(t)
        .ok_or_else(|| Error::Config(format!("no query set for session {t}")))?;
    if queries.is_empty() {
        return Err(Error::Config(format!("query set {t} is empty")));
    }
    let now_classes: Option<&[usize]> = if t >= 1 {
        Some(&stream.session_classes[t - 1])
    } else {
        None
    };

    let n_cols = model.head.num_columns();
    let mut rows: Vec<usize> = Vec::new();
    let mut counts: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    let (mut c_tot, mut c_ok, mut f_tot, mut f_ok, mut ok) = (0usize, 0, 0, 0, 0);
    let (mut now_tot, mut now_ok) = (0usize, 0usize);

    for q in queries {
        let f = model.net.feature(&q.x)?;
        let pred = model.head.predict(&f)?;
        let true_col = match q.fine {
            None => q.coarse,
            Some(fine) => model.column_of_fine[fine].ok_or_else(|| {
                Error::Label(format!("query fine class {fine} not yet introduced"))
            })?,
        };
        let correct = pred == true_col;
        ok += correct as usize;
        match q.fine {
            None => {
                c_tot += 1;
                c_ok += correct as usize;
            }
            Some(fine) => {
                f_tot += 1;
                f_ok += correct as usize;
                if let Some(now) = now_classes {
                    if now.contains(&fine) {
                        now_tot += 1;
                        now_ok += correct as usize;
                    }
                }
            }
        }
        counts
            .entry(true_col)
            .or_insert_with(|| vec![0; n_cols])[pred] += 1;
    }

    let mut confusion = Vec::with_capacity(counts.len());
    for (row, cnts) in counts {
        rows.push(row);
        confusion.push(cnts);
    }

    Ok(SessionReport {
        t,
        a_c: (c_tot > 0).then(|| c_ok as f64 / c_tot as f64),
        a_f: (f_tot > 0).then(|| f_ok as f64 / f_tot as f64),
        a_t: ok as f64 / queries.len() as f64,
        now_acc: (now_tot > 0).then(|| now_ok as f64 / now_tot as f64),
        confusion_rows: rows,
        confusion,
        block_norms: (0..=model.head.session_count())
            .map(|b| model.head.frobenius_block_norm(b))
            .collect(),
    })
}

/// Build the metric series from per-session reports and aggregate it.
pub fn summarize(reports: &[SessionReport], stream: &SessionStream) -> Result<ExperimentSummary> {
    let t_sessions = reports.len() - 1;
    let a_t: Vec<f64> = reports.iter().map(|r| r.a_t).collect();
    let a_bar = metrics::average_accuracy(&a_t)?;

    let mut f_f = Vec::new();
    let mut f_c = Vec::new();
    let mut f = None;
    if t_sessions >= 2 {
        let a_c: Vec<Option<f64>> = reports[..t_sessions].iter().map(|r| r.a_c).collect();
        let a_f: Vec<f64> = reports[1..]
            .iter()
            .map(|r| r.a_f.unwrap_or(0.0))
            .collect();
        let c_t: Vec<usize> = (1..=t_sessions).map(|t| t * stream.c_way).collect();
        let series = MetricSeries {
            a_t,
            a_c,
            a_f,
            c_t,
            n_f: stream.hierarchy.fine_count(),
        };
        for t in 2..=t_sessions {
            if let Ok(v) = metrics::fine_forgetting(series.a_f[t - 2], series.a_f[t - 1]) {
                f_f.push((t, v));
            }
        }
        if let Some(base) = series.a_c[0] {
            for t in 1..t_sessions {
                if let Some(ac) = series.a_c[t] {
                    if let Ok(v) = metrics::coarse_forgetting(base, ac) {
                        f_c.push((t, v));
                    }
                }
            }
        }
        f = metrics::overall_forgetting(&series).ok();
    }

    Ok(ExperimentSummary {
        a_bar,
        f,
        f_f,
        f_c,
    })
}

/// Full run: base session plus T incremental sessions, evaluating after each.
/// When `probes` is given, the logits of every probe are recorded at the end
/// of each session.
pub fn run_experiment(
    stream: &SessionStream,
    flags: RunFlags,
    net_spec: &NetSpec,
    base_opt: &OptimConfig,
    session_opt: &OptimConfig,
    seed: u64,
    probes: Option<&[Vec<f64>]>,
) -> Result<ExperimentResult> {
    let mut model = run_base_session(
        stream,
        flags,
        net_spec,
        base_opt,
        crate::rng::derive_seed(seed, "base"),
    )?;
    let record = |model: &Model| -> Result<Vec<Vec<f64>>> {
        match probes {
            None => Ok(Vec::new()),
            Some(ps) => ps
                .iter()
                .map(|p| model.head.logits(&model.net.feature(p)?))
                .collect(),
        }
    };

    let mut reports = vec![evaluate(&model, stream, 0)?];
    let mut probe_traces = vec![record(&model)?];
    for t in 1..=stream.sessions {
        run_incremental_session(
            &mut model,
            stream,
            t,
            session_opt,
            crate::rng::derive_seed(seed, &format!("session-{t}")),
        )?;
        reports.push(evaluate(&model, stream, t)?);
        probe_traces.push(record(&model)?);
    }
    let summary = summarize(&reports, stream)?;
    Ok(ExperimentResult {
        model,
        reports,
        summary,
        probe_traces,
    })
}
