//! Binary model persistence. Layout (all integers little-endian):
//!
//! ```text
//! magic          4 bytes  "KNWE"
//! version        u32      currently 1
//! input_dim      u32
//! feat_dim       u32
//! proj_hidden    u32
//! proj_dim       u32
//! n_hidden       u32, then hidden widths as u32 each
//! net_frozen     u8
//! n_net_params   u64, then parameters as f32 (trunk then projection head,
//!                per layer W row-major then b)
//! head_dim       u32
//! n_columns      u32
//! n_blocks       u32, then (start, end) as u32 pairs
//! normalize      u8
//! lambda         f64
//! columns        f32 * n_columns * head_dim
//! frozen mask    u8 * n_columns
//! flags          5 bytes: contrastive, freeze_emb, normalize_w, freeze_cls, mode
//! n_fine         u32, then column index per fine class as i64 (-1 = none)
//! run seed       u64
//! ```
//!
//! Parameters are stored at 32-bit precision; a loaded model evaluates
//! identically to the f32-cast original.

use std::path::Path;

use crate::classifier::ClassifierHead;
use crate::error::{Error, Result};
use crate::protocol::{Mode, Model, RunFlags};
use crate::rng::RunRng;

pub const MAGIC: [u8; 4] = *b"KNWE";
pub const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn mode_byte(mode: Mode) -> u8 {
    match mode {
        Mode::Knowe => 0,
        Mode::FtBaseline => 1,
        Mode::JointUpperBound => 2,
    }
}

fn byte_mode(b: u8) -> Result<Mode> {
    match b {
        0 => Ok(Mode::Knowe),
        1 => Ok(Mode::FtBaseline),
        2 => Ok(Mode::JointUpperBound),
        other => Err(Error::Format(format!("unknown mode byte {other}"))),
    }
}

/// Serialize a model (plus the run seed) to `path`.
pub fn save_checkpoint(path: &Path, model: &Model, seed: u64) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&MAGIC);
    w.u32(VERSION);

    let net = &model.net;
    let trunk_dims: Vec<usize> = std::iter::once(net.input_dim())
        .chain(net.trunk.layers.iter().map(|l| l.w.rows))
        .collect();
    let hidden = &trunk_dims[1..trunk_dims.len() - 1];
    w.u32(net.input_dim() as u32);
    w.u32(net.feat_dim() as u32);
    w.u32(net.head.layers[0].w.rows as u32);
    w.u32(net.head.output_dim() as u32);
    w.u32(hidden.len() as u32);
    for &h in hidden {
        w.u32(h as u32);
    }
    w.u8(net.frozen as u8);
    match &net.input_norm {
        None => w.u8(0),
        Some(norm) => {
            w.u8(1);
            for &m in &norm.mean {
                w.f32(m as f32);
            }
            for &s in &norm.inv_std {
                w.f32(s as f32);
            }
        }
    }
    let params = net.params_flat();
    w.u64(params.len() as u64);
    for p in &params {
        w.f32(*p as f32);
    }

    let head = &model.head;
    w.u32(head.dim() as u32);
    w.u32(head.num_columns() as u32);
    let n_blocks = head.session_count() + 1;
    w.u32(n_blocks as u32);
    for b in 0..n_blocks {
        let (s, e) = head.block_range(b);
        w.u32(s as u32);
        w.u32(e as u32);
    }
    w.u8(head.normalize as u8);
    w.f64(head.lambda);
    for i in 0..head.num_columns() {
        for &v in head.column(i) {
            w.f32(v as f32);
        }
    }
    for i in 0..head.num_columns() {
        w.u8(head.is_frozen(i) as u8);
    }

    let f = model.flags;
    w.u8(f.contrastive_base as u8);
    w.u8(f.freeze_embedding as u8);
    w.u8(f.normalize_weights as u8);
    w.u8(f.freeze_classifier as u8);
    w.u8(mode_byte(f.mode));

    w.u32(model.column_of_fine.len() as u32);
    for c in &model.column_of_fine {
        w.i64(c.map_or(-1, |v| v as i64));
    }
    w.u64(seed);

    crate::report::write_atomic(path, &w.buf)
}

/// Load a model and its run seed. Bad magic, version mismatch, or truncation
/// fail without producing a partial model.
pub fn load_checkpoint(path: &Path) -> Result<(Model, u64)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        data: &bytes,
        pos: 0,
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads version {VERSION}"
        )));
    }

    let input_dim = r.u32()? as usize;
    let feat_dim = r.u32()? as usize;
    let proj_hidden = r.u32()? as usize;
    let proj_dim = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(r.u32()? as usize);
    }
    let net_frozen = r.u8()? != 0;
    let input_norm = if r.u8()? != 0 {
        let mut mean = Vec::with_capacity(input_dim);
        for _ in 0..input_dim {
            mean.push(r.f32()? as f64);
        }
        let mut inv_std = Vec::with_capacity(input_dim);
        for _ in 0..input_dim {
            inv_std.push(r.f32()? as f64);
        }
        Some(crate::embedding::InputNorm { mean, inv_std })
    } else {
        None
    };
    let n_params = r.u64()? as usize;
    // shape-determined init, immediately overwritten by the stored parameters
    let mut net = crate::embedding::EmbeddingNet::new(
        input_dim,
        &hidden,
        feat_dim,
        proj_hidden,
        proj_dim,
        &mut RunRng::new(0),
    );
    let expected = net.params_flat().len();
    if n_params != expected {
        return Err(Error::Format(format!(
            "checkpoint has {n_params} net parameters, shapes imply {expected}"
        )));
    }
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(r.f32()? as f64);
    }
    net.set_params_flat(&params);
    net.frozen = net_frozen;
    net.input_norm = input_norm;

    let head_dim = r.u32()? as usize;
    let n_columns = r.u32()? as usize;
    let n_blocks = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let s = r.u32()? as usize;
        let e = r.u32()? as usize;
        blocks.push((s, e));
    }
    let normalize = r.u8()? != 0;
    let lambda = r.f64()?;
    let mut columns = Vec::with_capacity(n_columns);
    for _ in 0..n_columns {
        let mut col = Vec::with_capacity(head_dim);
        for _ in 0..head_dim {
            col.push(r.f32()? as f64);
        }
        columns.push(col);
    }
    let mut frozen = Vec::with_capacity(n_columns);
    for _ in 0..n_columns {
        frozen.push(r.u8()? != 0);
    }
    let head = ClassifierHead::from_parts(columns, frozen, blocks, normalize, lambda)?;

    let flags = RunFlags {
        contrastive_base: r.u8()? != 0,
        freeze_embedding: r.u8()? != 0,
        normalize_weights: r.u8()? != 0,
        freeze_classifier: r.u8()? != 0,
        mode: byte_mode(r.u8()?)?,
    };

    let n_fine = r.u32()? as usize;
    let mut column_of_fine = Vec::with_capacity(n_fine);
    for _ in 0..n_fine {
        let v = r.i64()?;
        column_of_fine.push(if v < 0 { None } else { Some(v as usize) });
    }
    let seed = r.u64()?;

    Ok((
        Model {
            net,
            head,
            column_of_fine,
            flags,
        },
        seed,
    ))
}

/// Cast every parameter of a model to f32 and back, mirroring what a
/// save/load round trip does to the numbers.
pub fn quantize_to_f32(model: &Model) -> Model {
    let mut m = model.clone();
    let params: Vec<f64> = m.net.params_flat().iter().map(|&p| p as f32 as f64).collect();
    m.net.set_params_flat(&params);
    if let Some(norm) = &mut m.net.input_norm {
        for v in norm.mean.iter_mut().chain(norm.inv_std.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
    for i in 0..m.head.num_columns() {
        for v in m.head.column_mut(i).iter_mut() {
            *v = *v as f32 as f64;
        }
    }
    m
}
