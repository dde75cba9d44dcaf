//! Checkpoint files.
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..4         | magic `MGCK`                              |
//! | 4..8         | format version, u32 LE                    |
//! | 8..12        | header length `h`, u32 LE                 |
//! | 12..12+h     | UTF-8 JSON header                         |
//! | 12+h..       | payload: f32 LE values                    |
//!
//! The header lists every payload tensor with its name, shape and byte
//! offset into the payload, together with the config, the step counter and
//! the digests of both weight sets. Tensors: `student/<name>`,
//! `teacher/<name>`, `adam_m/<name>`, `adam_v/<name>`, `center`, and the
//! three buffers `buffer/instance`, `buffer/neighbor`, `buffer/local_group`
//! of shape `[fill, dim]` stored oldest row first.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::buffer::FifoBuffer;
use crate::config::TrainConfig;
use crate::data::{write_file, Normalization};
use crate::error::{Error, Result};
use crate::losses::SupervisionState;
use crate::model::ModelPair;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::optim::AdamW;
use crate::train::{param_groups, Trainer};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BufferEntry {
    capacity: usize,
    dim: usize,
    fill: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: u64,
    steps_per_epoch: u64,
    normalization: Normalization,
    adam_t: u64,
    student_digest: String,
    teacher_digest: String,
    buffers: Vec<(String, BufferEntry)>,
    tensors: Vec<TensorEntry>,
}

#[derive(Default)]
struct Payload {
    entries: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl Payload {
    fn add(&mut self, name: String, shape: &[usize], data: &[f32]) {
        self.entries.push(TensorEntry { name, shape: shape.to_vec(), offset: self.bytes.len() as u64 });
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

const BUFFERS: [&str; 3] = ["instance", "neighbor", "local_group"];

fn buffers(state: &SupervisionState) -> [&FifoBuffer; 3] {
    [&state.instance_bank, &state.neighbor_bank, &state.local_group_bank]
}

/// Serializes the whole training state.
pub fn checkpoint_bytes(t: &Trainer) -> Vec<u8> {
    let mut p = Payload::default();
    for (prefix, set) in [("student", &t.pair.student), ("teacher", &t.pair.teacher)] {
        for (_, name, x) in set.iter() {
            p.add(format!("{prefix}/{name}"), x.shape(), x.data());
        }
    }
    for (prefix, moments) in [("adam_m", &t.optim.m), ("adam_v", &t.optim.v)] {
        for ((_, name, _), x) in t.pair.student.iter().zip(moments) {
            p.add(format!("{prefix}/{name}"), x.shape(), x.data());
        }
    }
    p.add("center".into(), t.state.center.shape(), t.state.center.data());
    let mut buffer_entries = Vec::new();
    for (name, b) in BUFFERS.iter().zip(buffers(&t.state)) {
        let rows: Vec<f32> = b.rows().flatten().copied().collect();
        p.add(format!("buffer/{name}"), &[b.fill(), b.dim()], &rows);
        buffer_entries.push((name.to_string(), BufferEntry { capacity: b.capacity(), dim: b.dim(), fill: b.fill() }));
    }
    let header = Header {
        config: t.cfg.clone(),
        step: t.step,
        steps_per_epoch: t.steps_per_epoch,
        normalization: t.norm,
        adam_t: t.optim.t,
        student_digest: t.pair.student.digest(),
        teacher_digest: t.pair.teacher.digest(),
        buffers: buffer_entries,
        tensors: p.entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + p.bytes.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&p.bytes);
    out
}

pub fn save_checkpoint(t: &Trainer, path: &Path) -> Result<()> {
    write_file(path, &checkpoint_bytes(t))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, msg: msg.into() }
}

struct Reader<'a> {
    payload: &'a [u8],
    base: usize,
    tensors: std::collections::HashMap<&'a str, &'a TensorEntry>,
}

impl Reader<'_> {
    fn values(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let e = self.tensors.get(name).ok_or_else(|| format_err(0, format!("checkpoint has no tensor `{name}`")))?;
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > self.payload.len() {
            return Err(format_err(
                self.base + self.payload.len(),
                format!("tensor `{name}` truncated: needs bytes up to {} of the payload, {} present", end, self.payload.len()),
            ));
        }
        let data = self.payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((e.shape.clone(), data))
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        let (shape, data) = self.values(name)?;
        Tensor::new(shape, data).map_err(|e| format_err(0, format!("tensor `{name}`: {e}")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < PREAMBLE {
        return Err(format_err(bytes.len(), "file shorter than the checkpoint preamble"));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err(0, "bad magic, expected MGCK"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format_err(4, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = PREAMBLE + hlen;
    if bytes.len() < body {
        return Err(format_err(bytes.len(), format!("header truncated: {hlen} bytes declared")));
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..body])
        .map_err(|e| format_err(PREAMBLE, format!("bad header: {e}")))?;
    let r = Reader {
        payload: &bytes[body..],
        base: body,
        tensors: header.tensors.iter().map(|e| (e.name.as_str(), e)).collect(),
    };

    let arch = header.config.architecture();
    let template = ModelPair::new(&arch, 0)?;
    let read_set = |prefix: &str, layout: &ParamSet| -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for (_, name, _) in layout.iter() {
            set.register(name, r.tensor(&format!("{prefix}/{name}"))?)?;
        }
        Ok(set)
    };
    let student = read_set("student", &template.student)?;
    let teacher = read_set("teacher", &template.teacher)?;
    let pair = ModelPair::from_params(&arch, student, teacher)?;
    for (which, set, digest) in [
        ("student", &pair.student, &header.student_digest),
        ("teacher", &pair.teacher, &header.teacher_digest),
    ] {
        if &set.digest() != digest {
            return Err(format_err(body, format!("{which} weights do not match the recorded digest")));
        }
    }

    let mut optim = AdamW::new(&pair.student, param_groups(&pair, &header.config))?;
    optim.t = header.adam_t;
    for (prefix, moments) in [("adam_m", &mut optim.m), ("adam_v", &mut optim.v)] {
        for ((_, name, p), slot) in pair.student.iter().zip(moments.iter_mut()) {
            let x = r.tensor(&format!("{prefix}/{name}"))?;
            if x.shape() != p.shape() {
                return Err(Error::Shape {
                    op: format!("{prefix}/{name}"),
                    lhs: p.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
            *slot = x;
        }
    }

    let mut state = SupervisionState::new(header.config.buffer_capacity, header.config.embed_dim, header.config.head_out_dim)?;
    let center = r.tensor("center")?;
    if center.shape() != state.center.shape() {
        return Err(Error::Shape { op: "center".into(), lhs: state.center.shape().to_vec(), rhs: center.shape().to_vec() });
    }
    state.center = center;
    let slots = [&mut state.instance_bank, &mut state.neighbor_bank, &mut state.local_group_bank];
    for (name, slot) in BUFFERS.iter().zip(slots) {
        let (capacity, dim) = (slot.capacity(), slot.dim());
        let (shape, rows) = r.values(&format!("buffer/{name}"))?;
        if shape.len() != 2 || shape[1] != dim || shape[0] > capacity {
            return Err(Error::Shape { op: format!("buffer/{name}"), lhs: vec![capacity, dim], rhs: shape });
        }
        *slot = FifoBuffer::from_rows(capacity, dim, &rows)?;
    }

    if header.steps_per_epoch == 0 {
        return Err(format_err(PREAMBLE, "steps_per_epoch is zero"));
    }
    Ok(Trainer {
        cfg: header.config,
        pair,
        state,
        optim,
        norm: header.normalization,
        step: header.step,
        steps_per_epoch: header.steps_per_epoch,
    })
}

/// Checks that the weights in `t` fit the architecture `cfg` describes;
/// the error names the first tensor whose shape differs.
pub fn check_architecture(t: &Trainer, cfg: &TrainConfig) -> Result<()> {
    let expected = ModelPair::new(&cfg.architecture(), 0)?;
    crate::model::check_layout("checkpoint", &expected.student, &t.pair.student)
}

/// A run may resume from `saved` under `requested` when only output
/// locations and checkpoint cadence differ.
pub fn check_resumable(saved: &TrainConfig, requested: &TrainConfig) -> Result<()> {
    let strip = |c: &TrainConfig| TrainConfig {
        data: String::new(),
        out_dir: String::new(),
        checkpoint_every: 0,
        ..c.clone()
    };
    let (a, b) = (strip(saved), strip(requested));
    if a == b {
        return Ok(());
    }
    let av = serde_json::to_value(&a).expect("config serializes");
    let bv = serde_json::to_value(&b).expect("config serializes");
    let differing: Vec<String> = av
        .as_object()
        .unwrap()
        .iter()
        .filter(|(k, v)| bv.get(k.as_str()) != Some(v))
        .map(|(k, _)| format!("`{k}`"))
        .collect();
    Err(Error::Config(format!(
        "checkpoint was written under a different config: {} differ",
        differing.join(", ")
    )))
}
