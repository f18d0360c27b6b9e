//! Versioned model checkpoints.
//!
//! Layout: `b"ASTC"`, `u32` version, `u64` header length (all
//! little-endian), a UTF-8 JSON header, then the concatenated ASTT-encoded
//! tensor sections. Section offsets in the header count from the first byte
//! after the JSON.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{decode_tensor, encode_tensor, read_file, write_atomic};
use crate::error::{Error, Result};
use crate::flow::{TeacherConfig, TeacherModel};
use crate::student::{StudentConfig, StudentModel};
use crate::tensor::Tensor;
use crate::tensor::tape::is_permutation;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASTC";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub offset: u64,
    pub length: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelHeader {
    Teacher {
        config: TeacherConfig,
        permutations: Vec<Vec<usize>>,
    },
    Student {
        config: StudentConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelHeader,
    pub train_config: TrainConfig,
    pub sections: Vec<Section>,
}

fn encode(model: ModelHeader, train_config: &TrainConfig, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut sections = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let bytes = encode_tensor(t);
        sections.push(Section {
            name: name.clone(),
            offset: payload.len() as u64,
            length: bytes.len() as u64,
            shape: t.shape().to_vec(),
        });
        payload.extend_from_slice(&bytes);
    }
    let header = CheckpointHeader {
        model,
        train_config: train_config.clone(),
        sections,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

/// Parses the header and returns it with every section tensor, in order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Tensor<f32>>)> {
    if bytes.len() < PREFIX {
        return Err(format_err(bytes.len(), "truncated checkpoint prefix"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(format_err(0, "bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format_err(4, format!("unsupported checkpoint version {version}")));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(PREFIX..PREFIX.saturating_add(json_len))
        .ok_or_else(|| format_err(bytes.len(), "truncated checkpoint header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| format_err(PREFIX, format!("header: {e}")))?;
    let base = PREFIX + json_len;
    let mut tensors = Vec::with_capacity(header.sections.len());
    for s in &header.sections {
        let start = base + s.offset as usize;
        let blob = bytes
            .get(start..start + s.length as usize)
            .ok_or_else(|| format_err(bytes.len(), format!("section {} is truncated", s.name)))?;
        let t = decode_tensor(blob).map_err(|e| match e {
            Error::Format { offset, message } => format_err(start + offset, format!("section {}: {message}", s.name)),
            other => other,
        })?;
        if t.shape() != s.shape.as_slice() {
            return Err(format_err(start, format!("section {} shape disagrees with header", s.name)));
        }
        tensors.push(t);
    }
    Ok((header, tensors))
}

fn named<'a>(names: Vec<String>, tensors: Vec<&'a Tensor<f32>>) -> Vec<(String, &'a Tensor<f32>)> {
    names.into_iter().zip(tensors).collect()
}

pub fn encode_teacher(model: &TeacherModel, train_config: &TrainConfig) -> Result<Vec<u8>> {
    let header = ModelHeader::Teacher {
        config: model.config.clone(),
        permutations: model.blocks.iter().map(|b| b.perm.clone()).collect(),
    };
    encode(header, train_config, &named(model.param_names(), model.params()))
}

pub fn encode_student(model: &StudentModel, train_config: &TrainConfig) -> Result<Vec<u8>> {
    let mut names = model.param_names();
    names.extend(model.buffer_names());
    let mut tensors = model.params();
    tensors.extend(model.buffers());
    encode(ModelHeader::Student { config: model.config.clone() }, train_config, &named(names, tensors))
}

fn fill(targets: Vec<&mut Tensor<f32>>, names: &[String], sections: &[Section], tensors: Vec<Tensor<f32>>) -> Result<()> {
    if targets.len() != tensors.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} sections, model needs {}",
            tensors.len(),
            targets.len()
        )));
    }
    for (((slot, name), section), t) in targets.into_iter().zip(names).zip(sections).zip(tensors) {
        if &section.name != name || slot.shape() != t.shape() {
            return Err(Error::Contract(format!(
                "section {} {:?} does not fit parameter {name} {:?}",
                section.name,
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

pub fn decode_teacher(bytes: &[u8]) -> Result<(TeacherModel, TrainConfig)> {
    let (header, tensors) = decode_checkpoint(bytes)?;
    let ModelHeader::Teacher { config, permutations } = &header.model else {
        return Err(Error::Contract("checkpoint does not hold a teacher".into()));
    };
    let mut model = TeacherModel::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    if permutations.len() != model.blocks.len() {
        return Err(Error::Contract("permutation count does not match blocks".into()));
    }
    for (b, p) in model.blocks.iter_mut().zip(permutations) {
        if p.len() != config.channels || !is_permutation(p, config.channels) {
            return Err(Error::Contract("stored channel permutation is invalid".into()));
        }
        b.perm = p.clone();
    }
    let names = model.param_names();
    fill(model.params_mut(), &names, &header.sections, tensors)?;
    Ok((model, header.train_config))
}

pub fn decode_student(bytes: &[u8]) -> Result<(StudentModel, TrainConfig)> {
    let (header, tensors) = decode_checkpoint(bytes)?;
    let ModelHeader::Student { config } = &header.model else {
        return Err(Error::Contract("checkpoint does not hold a student".into()));
    };
    let mut model = StudentModel::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let n = model.params().len();
    if tensors.len() < n || header.sections.len() != tensors.len() {
        return Err(Error::Contract("checkpoint is missing student sections".into()));
    }
    let mut tensors = tensors;
    let buffers = tensors.split_off(n);
    let names = model.param_names();
    fill(model.params_mut(), &names, &header.sections[..n], tensors)?;
    let names = model.buffer_names();
    fill(model.buffers_mut(), &names, &header.sections[n..], buffers)?;
    Ok((model, header.train_config))
}

pub fn save_teacher(path: &Path, model: &TeacherModel, train_config: &TrainConfig) -> Result<()> {
    write_atomic(path, &encode_teacher(model, train_config)?)
}

pub fn load_teacher(path: &Path) -> Result<(TeacherModel, TrainConfig)> {
    decode_teacher(&read_file(path)?)
}

pub fn save_student(path: &Path, model: &StudentModel, train_config: &TrainConfig) -> Result<()> {
    write_atomic(path, &encode_student(model, train_config)?)
}

pub fn load_student(path: &Path) -> Result<(StudentModel, TrainConfig)> {
    decode_student(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Preset;

    fn cfg() -> TrainConfig {
        let mut c = TrainConfig::preset(Preset::Desk, 1);
        c.pos_channels = 4;
        c.teacher_hidden = 6;
        c.student_hidden = 5;
        c.student_blocks = 2;
        c
    }

    #[test]
    fn teacher_round_trip() {
        let c = cfg();
        let mut model = TeacherModel::new(c.teacher_config(6), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        model.blocks[1].gamma2 = Tensor::scalar(0.25);
        let bytes = encode_teacher(&model, &c).unwrap();
        let (back, c2) = decode_teacher(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(c2, c);
        assert_eq!(encode_teacher(&back, &c2).unwrap(), bytes);
        assert!(decode_student(&bytes).is_err());
    }

    #[test]
    fn student_round_trip_keeps_running_stats() {
        let c = cfg();
        let mut model = StudentModel::new(c.student_config(6), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for (i, b) in model.buffers_mut().into_iter().enumerate() {
            *b = b.map(|v| v + i as f32);
        }
        let bytes = encode_student(&model, &c).unwrap();
        let (back, _) = decode_student(&bytes).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let c = cfg();
        let model = TeacherModel::new(c.teacher_config(4), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let bytes = encode_teacher(&model, &c).unwrap();
        assert!(matches!(decode_teacher(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(decode_teacher(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
