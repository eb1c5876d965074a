//! Binary checkpoints: magic, a length-prefixed JSON header, then every
//! tensor as little-endian f32 in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use refnet_tensor::{Adam, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::model::{ArchConfig, RefSegNet};
use crate::params::ParamSet;
use crate::train::{TrainConfig, TrainState};

pub const MAGIC: &[u8] = b"REFNET-CKPT-1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    iteration: u64,
    updates: u64,
    rng: ChaCha8Rng,
    optimizer_steps: [u64; 3],
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

const GROUPS: [&str; 3] = ["segmenter", "outer", "inner"];

fn parts(state: &TrainState) -> [(&ParamSet<f32>, &Adam<f32>); 3] {
    [
        (&state.model.params, &state.model_opt),
        (&state.outer.params, &state.outer_opt),
        (&state.inner.params, &state.inner_opt),
    ]
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload: Vec<&Tensor<f32>> = Vec::new();
    for (group, (params, opt)) in GROUPS.iter().zip(parts(state)) {
        for (kind, tensors) in [("param", params.tensors()), ("m", &opt.first_moment[..]), ("v", &opt.second_moment[..])] {
            for (name, t) in params.names().iter().zip(tensors) {
                entries.push(Entry {
                    name: format!("{group}/{kind}/{name}"),
                    shape: t.shape().to_vec(),
                });
                payload.push(t);
            }
        }
    }
    let header = Header {
        config: state.config.clone(),
        iteration: state.iteration,
        updates: state.updates,
        rng: state.rng.clone(),
        optimizer_steps: [state.model_opt.step, state.outer_opt.step, state.inner_opt.step],
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let floats: usize = payload.iter().map(|t| t.data().len()).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in payload {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| corrupt("missing REFNET-CKPT-1 magic; not a checkpoint or an unsupported version"))?;
    if rest.len() < 8 {
        return Err(corrupt("truncated header length"));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[..len]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let mut data = &rest[len..];

    let mut state = TrainState::new(header.config)?;
    let mut entries = header.tensors.iter();
    let expected: [(&str, &[String]); 3] = [
        ("segmenter", state.model.params.names()),
        ("outer", state.outer.params.names()),
        ("inner", state.inner.params.names()),
    ];
    let expected: Vec<String> = expected
        .iter()
        .flat_map(|(g, names)| {
            ["param", "m", "v"]
                .into_iter()
                .flat_map(move |k| names.iter().map(move |n| format!("{g}/{k}/{n}")))
        })
        .collect();
    if header.tensors.len() != expected.len() {
        return Err(corrupt(format!("{} tensors stored, {} expected", header.tensors.len(), expected.len())));
    }
    let mut loaded: Vec<Tensor<f32>> = Vec::with_capacity(expected.len());
    for want in &expected {
        let e = entries.next().expect("length checked");
        if &e.name != want {
            return Err(corrupt(format!("tensor {:?} where {want:?} was expected", e.name)));
        }
        let n: usize = e.shape.iter().product();
        if data.len() < 4 * n {
            return Err(corrupt(format!("truncated data for {}", e.name)));
        }
        let values = data[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        data = &data[4 * n..];
        loaded.push(Tensor::new(e.shape.clone(), values)?);
    }
    if !data.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", data.len())));
    }

    let mut it = loaded.into_iter();
    let fill = |dst: &mut [Tensor<f32>], it: &mut std::vec::IntoIter<Tensor<f32>>| -> Result<()> {
        for d in dst {
            let t = it.next().expect("count checked");
            if t.shape() != d.shape() {
                return Err(corrupt(format!("shape {:?} where {:?} was expected", t.shape(), d.shape())));
            }
            *d = t;
        }
        Ok(())
    };
    let [s0, s1, s2] = header.optimizer_steps;
    for (params, opt, step) in [
        (&mut state.model.params, &mut state.model_opt, s0),
        (&mut state.outer.params, &mut state.outer_opt, s1),
        (&mut state.inner.params, &mut state.inner_opt, s2),
    ] {
        fill(params.tensors_mut(), &mut it)?;
        fill(&mut opt.first_moment, &mut it)?;
        fill(&mut opt.second_moment, &mut it)?;
        opt.step = step;
    }
    state.iteration = header.iteration;
    state.updates = header.updates;
    state.rng = header.rng;
    Ok(state)
}

/// Writes through a temporary file so an interrupted save never replaces a
/// good checkpoint with a partial one.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Fails with both descriptors when `arch` differs from the stored one.
pub fn check_arch(state: &TrainState, arch: &ArchConfig) -> Result<()> {
    if &state.config.arch != arch {
        return Err(Error::ArchMismatch {
            checkpoint: state.config.arch.to_string(),
            config: arch.to_string(),
        });
    }
    Ok(())
}

/// The segmenter alone, for evaluation and prediction.
pub fn load_model(path: &Path) -> Result<RefSegNet<f32>> {
    Ok(load(path)?.model)
}
