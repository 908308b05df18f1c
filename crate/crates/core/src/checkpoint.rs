//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SSAE"
//! 4       4     version, u32 little-endian (currently 1)
//! 8       4     header length H, u32 little-endian
//! 12      H     UTF-8 JSON header (dims, step, config echo, tracker, rng)
//! 12+H    ...   little-endian f32 blobs
//! ```
//!
//! Blobs are the eight parameter groups in the order `w_enc, b_enc, b_pre,
//! w_dec, mlp_w1, mlp_b1, mlp_w2, mlp_b2` (matrices row-major `d x n`), then
//! the Adam first moments in the same order, then the second moments. The file
//! must end exactly after the last blob.
//!
//! Training keeps all persistent values f32-representable, so saving and
//! loading a training state is lossless.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Result, SaeError};
use crate::model::{SaeParams, GROUP_NAMES};
use crate::objective::DeadFeatureTracker;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 4] = b"SSAE";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte ChaCha seed, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal (exceeds the JSON integer range).
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub n: usize,
    pub d: usize,
    pub k_max: usize,
    pub step: u64,
    pub blob_order: Vec<String>,
    pub dtype: String,
    pub config: Option<TrainConfig>,
    pub tracker: DeadFeatureTracker,
    pub rng: RngState,
}

fn encode_rng(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn decode_rng(state: &RngState, path: &Path) -> Result<ChaCha8Rng> {
    let bad = |what: &str| SaeError::format(path, format!("invalid rng {what}"));
    if state.seed.len() != 64 {
        return Err(bad("seed"));
    }
    let mut seed = [0u8; 32];
    for (i, byte) in seed.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&state.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
    }
    let word_pos: u128 = state.word_pos.parse().map_err(|_| bad("word position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

fn blob_order() -> Vec<String> {
    ["param", "adam_m", "adam_v"]
        .iter()
        .flat_map(|prefix| GROUP_NAMES.iter().map(move |g| format!("{prefix}.{g}")))
        .collect()
}

/// Serialize a training state (with an optional config echo) to bytes.
pub fn encode_checkpoint(state: &TrainState, config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        n: state.params.n(),
        d: state.params.d(),
        k_max: state.params.k_max,
        step: state.step,
        blob_order: blob_order(),
        dtype: "f32le".into(),
        config: config.cloned(),
        tracker: state.tracker.clone(),
        rng: encode_rng(&state.rng),
    };
    let json = serde_json::to_vec(&header).map_err(|e| SaeError::Internal(format!("header encoding: {e}")))?;
    let blob_len = 3 * state.params.num_values() * 4;
    let mut bytes = Vec::with_capacity(PREFIX_LEN + json.len() + blob_len);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for set in [&state.params, &state.adam_m, &state.adam_v] {
        for group in set.groups() {
            for &v in group {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(bytes)
}

pub fn save_checkpoint(state: &TrainState, config: Option<&TrainConfig>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(state, config)?;
    let mut file = fs::File::create(path).map_err(|e| SaeError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| SaeError::io(path, e))?;
    file.sync_all().map_err(|e| SaeError::io(path, e))?;
    Ok(())
}

fn parse_prefix<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointHeader, &'a [u8])> {
    if bytes.len() < PREFIX_LEN {
        return Err(SaeError::format(path, "file shorter than the checkpoint prefix"));
    }
    if &bytes[..4] != MAGIC {
        return Err(SaeError::format(path, "bad magic (expected \"SSAE\")"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(SaeError::format(path, format!("unsupported version {version} (expected {VERSION})")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[PREFIX_LEN..];
    if body.len() < header_len {
        return Err(SaeError::format(path, "truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])
        .map_err(|e| SaeError::format(path, format!("header is not valid JSON: {e}")))?;
    Ok((header, &body[header_len..]))
}

/// Read only the JSON header.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| SaeError::io(path, e))?;
    Ok(parse_prefix(&bytes, path)?.0)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(TrainState, Option<TrainConfig>)> {
    let (header, blobs) = parse_prefix(bytes, path)?;
    if header.dtype != "f32le" {
        return Err(SaeError::format(path, format!("unsupported dtype {}", header.dtype)));
    }
    if header.blob_order != blob_order() {
        return Err(SaeError::format(path, "unexpected blob order"));
    }
    if header.n == 0 || header.d == 0 || header.k_max == 0 || header.k_max > header.d {
        return Err(SaeError::format(path, "invalid dimensions in header"));
    }
    if header.tracker.tokens_since_fire.len() != header.d {
        return Err(SaeError::format(path, "tracker length does not match d"));
    }
    let template = SaeParams::zeros(header.n, header.d, header.k_max);
    let per_set = template.num_values() * 4;
    if blobs.len() != 3 * per_set {
        return Err(SaeError::format(
            path,
            format!("expected {} blob bytes, found {}", 3 * per_set, blobs.len()),
        ));
    }
    let mut sets = [template.clone(), template.clone(), template];
    let mut chunks = blobs.chunks_exact(4);
    for set in sets.iter_mut() {
        for group in set.groups_mut() {
            for v in group.iter_mut() {
                let raw = chunks.next().expect("length checked");
                *v = f32::from_le_bytes(raw.try_into().expect("4 bytes")) as f64;
            }
        }
    }
    let [params, adam_m, adam_v] = sets;
    let state = TrainState {
        params,
        adam_m,
        adam_v,
        step: header.step,
        tracker: header.tracker,
        rng: decode_rng(&header.rng, path)?,
    };
    Ok((state, header.config))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainState, Option<TrainConfig>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| SaeError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::RngCore;

    fn state() -> (TrainState, TrainConfig) {
        let mut cfg = TrainConfig::desk();
        cfg.n = 6;
        cfg.d = 20;
        cfg.k_target = 3;
        cfg.k_max = 6;
        let mut st = TrainState::init(&cfg, Array1::zeros(6).view()).unwrap();
        st.step = 17;
        st.tracker.tokens_since_fire[3] = 999;
        st.adam_m.w_dec[[2, 1]] = 0.25;
        st.adam_v.mlp_b2 = 1e-9f32 as f64;
        st.rng.next_u64();
        (st, cfg)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (st, cfg) = state();
        let bytes = encode_checkpoint(&st, Some(&cfg)).unwrap();
        let (back, cfg_back) = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, st);
        assert_eq!(cfg_back, Some(cfg.clone()));
        assert_eq!(encode_checkpoint(&back, Some(&cfg)).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let (st, cfg) = state();
        let bytes = encode_checkpoint(&st, Some(&cfg)).unwrap();
        let p = Path::new("mem");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], p).is_err());
        assert!(decode_checkpoint(&bytes[..10], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, p).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let err = decode_checkpoint(&bad_magic, p).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        let err = decode_checkpoint(&bad_version, p).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
