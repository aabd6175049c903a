//! Label hierarchies, synthetic hierarchical-Gaussian datasets, feature-file
//! ingestion/export, and slicing into support/query session streams.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::RunRng;

/// A two-level coarse -> fine label tree. Fine ids partition `0..fine_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hierarchy {
    children: Vec<Vec<usize>>,
    coarse_of: Vec<usize>,
}

impl Hierarchy {
    /// Build from an explicit children list (one entry per coarse class).
    pub fn new(children: Vec<Vec<usize>>) -> Result<Self> {
        if children.len() < 1 {
            return Err(Error::Config("hierarchy needs at least one coarse class".into()));
        }
        let n_f: usize = children.iter().map(|c| c.len()).sum();
        let mut coarse_of = vec![usize::MAX; n_f];
        for (coarse, fines) in children.iter().enumerate() {
            if fines.is_empty() {
                return Err(Error::Config(format!(
                    "coarse class {coarse} has no fine children"
                )));
            }
            for &f in fines {
                if f >= n_f {
                    return Err(Error::Config(format!(
                        "fine id {f} out of range 0..{n_f}"
                    )));
                }
                if coarse_of[f] != usize::MAX {
                    return Err(Error::Config(format!(
                        "fine id {f} appears under two coarse classes"
                    )));
                }
                coarse_of[f] = coarse;
            }
        }
        Ok(Self { children, coarse_of })
    }

    /// Balanced tree: `r` coarse classes with `fine_per_coarse` children each,
    /// fine ids assigned contiguously.
    pub fn balanced(r: usize, fine_per_coarse: usize) -> Result<Self> {
        if r < 2 || fine_per_coarse < 2 {
            return Err(Error::Config(format!(
                "hierarchy needs >= 2 coarse classes and >= 2 fine per coarse, got ({r}, {fine_per_coarse})"
            )));
        }
        let children = (0..r)
            .map(|c| (c * fine_per_coarse..(c + 1) * fine_per_coarse).collect())
            .collect();
        Self::new(children)
    }

    pub fn coarse_count(&self) -> usize {
        self.children.len()
    }

    pub fn fine_count(&self) -> usize {
        self.coarse_of.len()
    }

    pub fn children(&self, coarse: usize) -> &[usize] {
        &self.children[coarse]
    }

    pub fn coarse_of(&self, fine: usize) -> usize {
        self.coarse_of[fine]
    }
}

/// One feature vector with its coarse and fine label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub coarse: usize,
    pub fine: usize,
}

/// Feature vectors with an attached hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub hierarchy: Hierarchy,
    pub samples: Vec<Sample>,
    pub input_dim: usize,
}

/// Parameters for the synthetic hierarchical-Gaussian generator.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub input_dim: usize,
    pub coarse_sep: f64,
    pub fine_sep: f64,
    pub noise_sigma: f64,
    pub n_per_fine: usize,
}

const CENTER_RETRY_BUDGET: usize = 10_000;

/// Generate a dataset and also return the per-fine-class centers (used by
/// nearest-center oracles in tests).
pub fn generate_synthetic_with_centers(
    h: &Hierarchy,
    params: &SynthParams,
    seed: u64,
) -> Result<(LabeledDataset, Vec<Vec<f64>>)> {
    if !(params.coarse_sep > params.fine_sep && params.fine_sep > params.noise_sigma
        && params.noise_sigma > 0.0)
    {
        return Err(Error::Config(format!(
            "need coarse_sep > fine_sep > noise_sigma > 0, got {} / {} / {}",
            params.coarse_sep, params.fine_sep, params.noise_sigma
        )));
    }
    if params.input_dim == 0 || params.n_per_fine == 0 {
        return Err(Error::Config("input_dim and n_per_fine must be positive".into()));
    }
    let root = RunRng::new(seed);
    let mut center_rng = root.fork("centers");
    let d = params.input_dim;

    // Coarse centers: rejection-sampled Gaussian with scale tied to the
    // requested separation.
    let scale = 2.0 * params.coarse_sep;
    let mut coarse_centers: Vec<Vec<f64>> = Vec::with_capacity(h.coarse_count());
    for c in 0..h.coarse_count() {
        let mut accepted = None;
        for _ in 0..CENTER_RETRY_BUDGET {
            let cand: Vec<f64> = (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut center_rng);
                    z * scale
                })
                .collect();
            let ok = coarse_centers.iter().all(|other| {
                let d2: f64 = cand
                    .iter()
                    .zip(other)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt() >= params.coarse_sep
            });
            if ok {
                accepted = Some(cand);
                break;
            }
        }
        coarse_centers.push(accepted.ok_or_else(|| {
            Error::Gen(format!(
                "could not place coarse center {c} at separation {} in dimension {d}",
                params.coarse_sep
            ))
        })?);
    }

    // Fine centers: coarse center plus a length-fine_sep offset.
    let mut fine_centers = vec![Vec::new(); h.fine_count()];
    for coarse in 0..h.coarse_count() {
        for &fine in h.children(coarse) {
            let mut offset: Vec<f64> = (0..d)
                .map(|_| StandardNormal.sample(&mut center_rng))
                .collect();
            let n: f64 = offset.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                offset[0] = 1.0;
            }
            let n = offset.iter().map(|v| v * v).sum::<f64>().sqrt();
            let center: Vec<f64> = coarse_centers[coarse]
                .iter()
                .zip(&offset)
                .map(|(c, o)| c + o / n * params.fine_sep)
                .collect();
            fine_centers[fine] = center;
        }
    }

    let mut noise_rng = root.fork("noise");
    let mut samples = Vec::with_capacity(h.fine_count() * params.n_per_fine);
    for fine in 0..h.fine_count() {
        let coarse = h.coarse_of(fine);
        for _ in 0..params.n_per_fine {
            let x: Vec<f64> = fine_centers[fine]
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    c + z * params.noise_sigma
                })
                .collect();
            samples.push(Sample { x, coarse, fine });
        }
    }

    Ok((
        LabeledDataset {
            hierarchy: h.clone(),
            samples,
            input_dim: d,
        },
        fine_centers,
    ))
}

pub fn generate_synthetic(h: &Hierarchy, params: &SynthParams, seed: u64) -> Result<LabeledDataset> {
    generate_synthetic_with_centers(h, params, seed).map(|(ds, _)| ds)
}

/// Write the dataset as `coarse_id,fine_id,f0,...,f{D-1}` CSV. Floats use
/// Rust's shortest round-trip formatting, so `load_feature_file` reproduces
/// the dataset exactly.
pub fn save_feature_file(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "coarse_id,fine_id")?;
    for i in 0..ds.input_dim {
        write!(out, ",f{i}")?;
    }
    writeln!(out)?;
    for s in &ds.samples {
        write!(out, "{},{}", s.coarse, s.fine)?;
        for v in &s.x {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Load a feature CSV, re-indexing ids densely (sorted by original id) and
/// inferring the hierarchy from the (coarse_id, fine_id) pairs present.
pub fn load_feature_file(path: &Path) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("missing header row".into()))??;
    let header_cols: Vec<&str> = header.split(',').collect();
    if header_cols.len() < 3 || header_cols[0] != "coarse_id" || header_cols[1] != "fine_id" {
        return Err(Error::Format(
            "header must be coarse_id,fine_id,f0,...".into(),
        ));
    }
    let dim = header_cols.len() - 2;

    struct Row {
        coarse: u64,
        fine: u64,
        x: Vec<f64>,
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::Format(format!(
                "row {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                dim + 2
            )));
        }
        let coarse: u64 = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("row {}: bad coarse_id", lineno + 2)))?;
        let fine: u64 = fields[1]
            .parse()
            .map_err(|_| Error::Format(format!("row {}: bad fine_id", lineno + 2)))?;
        let x = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("row {}: bad feature value", lineno + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(Row { coarse, fine, x });
    }
    if rows.is_empty() {
        return Err(Error::Empty("feature file has a header but no rows".into()));
    }

    let mut coarse_ids: Vec<u64> = rows.iter().map(|r| r.coarse).collect();
    coarse_ids.sort_unstable();
    coarse_ids.dedup();
    let mut fine_ids: Vec<u64> = rows.iter().map(|r| r.fine).collect();
    fine_ids.sort_unstable();
    fine_ids.dedup();
    let coarse_index = |id: u64| coarse_ids.binary_search(&id).unwrap();
    let fine_index = |id: u64| fine_ids.binary_search(&id).unwrap();

    // Each fine id must sit under exactly one coarse id.
    let mut parent = vec![usize::MAX; fine_ids.len()];
    for r in &rows {
        let f = fine_index(r.fine);
        let c = coarse_index(r.coarse);
        if parent[f] == usize::MAX {
            parent[f] = c;
        } else if parent[f] != c {
            return Err(Error::Format(format!(
                "fine_id {} appears under two coarse_ids",
                r.fine
            )));
        }
    }
    let mut children = vec![Vec::new(); coarse_ids.len()];
    for (f, &c) in parent.iter().enumerate() {
        children[c].push(f);
    }
    let hierarchy = Hierarchy::new(children)?;

    let samples = rows
        .into_iter()
        .map(|r| Sample {
            coarse: coarse_index(r.coarse),
            fine: fine_index(r.fine),
            x: r.x,
        })
        .collect();
    Ok(LabeledDataset {
        hierarchy,
        samples,
        input_dim: dim,
    })
}

/// A query point scored at its own granularity: `fine == None` means the
/// expected answer is the coarse class.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub x: Vec<f64>,
    pub coarse: usize,
    pub fine: Option<usize>,
}

/// The full experiment stream: base split, per-session supports, and fixed
/// query sets `Q^(0)..Q^(T)`.
#[derive(Debug, Clone)]
pub struct SessionStream {
    pub hierarchy: Hierarchy,
    pub input_dim: usize,
    pub c_way: usize,
    pub k_shot: usize,
    pub h_queries: usize,
    pub sessions: usize,
    /// Coarse-labeled training split for the base session (fine ids retained
    /// on the samples but unused by base training).
    pub base_train: Vec<Sample>,
    /// Fine classes introduced in session t (index 0 = session 1).
    pub session_classes: Vec<Vec<usize>>,
    /// Support sets, index 0 = session 1.
    pub supports: Vec<Vec<Sample>>,
    /// Query sets, index t = `Q^(t)` for t in 0..=T.
    pub queries: Vec<Vec<Query>>,
}

impl SessionStream {
    /// Session in which `fine` first appears (1-based), if any.
    pub fn first_session_of(&self, fine: usize) -> Option<usize> {
        self.session_classes
            .iter()
            .position(|g| g.contains(&fine))
            .map(|i| i + 1)
    }
}

/// Slice a dataset into the session stream: fine classes are partitioned into
/// `t_sessions` shuffled groups of `c_way`; each class reserves `k_shot`
/// support and `h_queries` query samples; everything left over becomes the
/// coarse-labeled base split.
///
/// A coarse class contributes coarse-labeled queries (drawn from its
/// not-yet-seen children's query reserves) only while none of its children
/// has appeared in a support set.
pub fn make_session_stream(
    ds: &LabeledDataset,
    c_way: usize,
    k_shot: usize,
    h_queries: usize,
    t_sessions: usize,
    seed: u64,
) -> Result<SessionStream> {
    let h = &ds.hierarchy;
    let n_f = h.fine_count();
    if c_way == 0 || k_shot == 0 || h_queries == 0 {
        return Err(Error::Config("C, K, H must be positive".into()));
    }
    if t_sessions * c_way > n_f {
        return Err(Error::Config(format!(
            "T*C = {} exceeds fine-class count {}",
            t_sessions * c_way,
            n_f
        )));
    }
    let mut by_fine: Vec<Vec<usize>> = vec![Vec::new(); n_f];
    for (i, s) in ds.samples.iter().enumerate() {
        by_fine[s.fine].push(i);
    }
    for (fine, idx) in by_fine.iter().enumerate() {
        if idx.len() < k_shot + h_queries {
            return Err(Error::Config(format!(
                "fine class {fine} has {} samples, needs >= {}",
                idx.len(),
                k_shot + h_queries
            )));
        }
    }

    let root = RunRng::new(seed);
    let mut shuffle_rng = root.fork("class-shuffle");
    let mut class_order: Vec<usize> = (0..n_f).collect();
    class_order.shuffle(&mut shuffle_rng);
    let session_classes: Vec<Vec<usize>> = (0..t_sessions)
        .map(|t| class_order[t * c_way..(t + 1) * c_way].to_vec())
        .collect();

    // Per-class sample split: K support, H query, rest base.
    let mut split_rng = root.fork("sample-split");
    let mut support_pool = vec![Vec::new(); n_f];
    let mut query_pool = vec![Vec::new(); n_f];
    let mut reserved = vec![false; ds.samples.len()];
    for fine in 0..n_f {
        let mut idx = by_fine[fine].clone();
        idx.shuffle(&mut split_rng);
        support_pool[fine] = idx[..k_shot].to_vec();
        query_pool[fine] = idx[k_shot..k_shot + h_queries].to_vec();
        for &i in &idx[..k_shot + h_queries] {
            reserved[i] = true;
        }
    }

    let supports: Vec<Vec<Sample>> = session_classes
        .iter()
        .map(|group| {
            group
                .iter()
                .flat_map(|&fine| support_pool[fine].iter().map(|&i| ds.samples[i].clone()))
                .collect()
        })
        .collect();

    // Session of first appearance per fine class (usize::MAX = never).
    let mut first_seen = vec![usize::MAX; n_f];
    for (t0, group) in session_classes.iter().enumerate() {
        for &fine in group {
            first_seen[fine] = t0 + 1;
        }
    }

    let mut queries = Vec::with_capacity(t_sessions + 1);
    for t in 0..=t_sessions {
        let mut q = Vec::new();
        // Fine-labeled portion: fixed H-sample pools of every class seen so far.
        for group in session_classes.iter().take(t) {
            for &fine in group {
                for &i in &query_pool[fine] {
                    let s = &ds.samples[i];
                    q.push(Query {
                        x: s.x.clone(),
                        coarse: s.coarse,
                        fine: Some(fine),
                    });
                }
            }
        }
        // Coarse-labeled portion: classes with no refined child yet, sampled
        // from their unseen children's query reserves.
        for coarse in 0..h.coarse_count() {
            let refined = h.children(coarse).iter().any(|&f| first_seen[f] <= t);
            if refined {
                continue;
            }
            let candidates: Vec<usize> = h
                .children(coarse)
                .iter()
                .filter(|&&f| first_seen[f] > t)
                .flat_map(|&f| query_pool[f].iter().copied())
                .collect();
            let mut pick_rng = root.fork(&format!("coarse-query-{t}-{coarse}"));
            let chosen: Vec<usize> = if candidates.len() <= h_queries {
                candidates
            } else {
                let mut c = candidates;
                c.shuffle(&mut pick_rng);
                c.truncate(h_queries);
                c
            };
            for i in chosen {
                let s = &ds.samples[i];
                q.push(Query {
                    x: s.x.clone(),
                    coarse: s.coarse,
                    fine: None,
                });
            }
        }
        queries.push(q);
    }

    let base_train: Vec<Sample> = ds
        .samples
        .iter()
        .enumerate()
        .filter(|(i, _)| !reserved[*i])
        .map(|(_, s)| s.clone())
        .collect();

    Ok(SessionStream {
        hierarchy: h.clone(),
        input_dim: ds.input_dim,
        c_way,
        k_shot,
        h_queries,
        sessions: t_sessions,
        base_train,
        session_classes,
        supports,
        queries,
    })
}
