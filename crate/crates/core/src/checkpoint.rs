//! Checkpoint file format.
//!
//! Layout: magic bytes `AVFM`, format version u32 LE, header length u64 LE,
//! UTF-8 JSON header (configs, shapes, censuses, rng state), then the
//! parameter arrays concatenated as little-endian 32-bit floats in header
//! order. Parameters live on the f32 lattice, so save → load reproduces
//! forward outputs bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::lora::InjectionPlan;
use crate::model::ModelState;
use crate::rng::derive_stream;
use crate::trainer::{Checkpoint, TrainConfig};

pub const MAGIC: &[u8; 4] = b"AVFM";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CensusEntry {
    backbone: usize,
    adapter: usize,
    decoder: usize,
    score_head: usize,
    trainable: usize,
    total: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    backbone_config: BackboneConfig,
    injection_plan: InjectionPlan,
    train_config: TrainConfig,
    freeze_backbone: bool,
    adapters_enabled: bool,
    iteration: usize,
    rng_seed: u64,
    rng_word_pos: String,
    census: CensusEntry,
    params: Vec<ParamEntry>,
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let census = ckpt.model.census();
    let mut params = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    ckpt.model.visit_params(&mut |_, name, t| {
        params.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    let header = Header {
        backbone_config: ckpt.model.config.clone(),
        injection_plan: ckpt.model.plan.clone(),
        train_config: ckpt.train_config.clone(),
        freeze_backbone: ckpt.model.freeze_backbone,
        adapters_enabled: ckpt.model.adapters_enabled,
        iteration: ckpt.iteration,
        rng_seed: ckpt.rng_seed,
        rng_word_pos: ckpt.rng_word_pos.to_string(),
        census: CensusEntry {
            backbone: census.backbone,
            adapter: census.adapter,
            decoder: census.decoder,
            score_head: census.score_head,
            trainable: census.trainable,
            total: census.total,
        },
        params,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&payload)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;

    if bytes.len() < 16 {
        return Err(Error::Load(format!(
            "file too short: {} bytes, need at least 16",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Load("bad magic bytes at offset 0".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Load(format!(
            "unsupported format version {} at offset 4 (expected {})",
            version, VERSION
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::Load(format!(
                "truncated header: need {} bytes at offset 16, file has {}",
                header_len,
                bytes.len().saturating_sub(16)
            ))
        })?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Load(format!("header parse error: {e}")))?;

    // rebuild the model skeleton, then fill every array in header order
    let mut init_rng = derive_stream(0, "checkpoint-skeleton", 0);
    let mut model = ModelState::init(
        header.backbone_config.clone(),
        header.injection_plan.clone(),
        header.freeze_backbone,
        &mut init_rng,
    )?;
    model.adapters_enabled = header.adapters_enabled;

    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    model.visit_params(&mut |_, name, t| expected.push((name, t.shape().to_vec())));
    if expected.len() != header.params.len() {
        return Err(Error::Load(format!(
            "parameter count mismatch: header lists {}, model has {}",
            header.params.len(),
            expected.len()
        )));
    }
    for (have, want) in expected.iter().zip(&header.params) {
        if have.0 != want.name || have.1 != want.shape {
            return Err(Error::Load(format!(
                "parameter layout mismatch at '{}': header has '{}' {:?}",
                have.0, want.name, want.shape
            )));
        }
    }

    let mut offset = header_end;
    let mut result = Ok(());
    model.visit_params_mut(&mut |_, name, t| {
        if result.is_err() {
            return;
        }
        let n = t.numel();
        let end = offset + 4 * n;
        if end > bytes.len() {
            result = Err(Error::Load(format!(
                "truncated array '{}' at offset {}: need {} bytes, {} left",
                name,
                offset,
                4 * n,
                bytes.len() - offset
            )));
            return;
        }
        let data = t.make_data_mut();
        for (i, v) in data.iter_mut().enumerate() {
            let le: [u8; 4] = bytes[offset + 4 * i..offset + 4 * i + 4]
                .try_into()
                .expect("4 bytes");
            *v = f32::from_le_bytes(le) as f64;
        }
        offset = end;
    });
    result?;
    if offset != bytes.len() {
        return Err(Error::Load(format!(
            "{} trailing bytes after arrays at offset {}",
            bytes.len() - offset,
            offset
        )));
    }

    let census = model.census();
    if census.trainable != header.census.trainable || census.total != header.census.total {
        return Err(Error::Load(format!(
            "census mismatch: header claims {} trainable / {} total, model has {} / {}",
            header.census.trainable, header.census.total, census.trainable, census.total
        )));
    }

    Ok(Checkpoint {
        model,
        train_config: header.train_config,
        iteration: header.iteration,
        rng_seed: header.rng_seed,
        rng_word_pos: header
            .rng_word_pos
            .parse()
            .map_err(|e| Error::Load(format!("bad rng position: {e}")))?,
    })
}
