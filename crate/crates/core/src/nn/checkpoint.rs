//! `DSAE1` checkpoint files: the magic bytes, a little-endian `u32` header
//! length, a JSON header and then every parameter tensor followed by every
//! buffer as little-endian `f32`, in declaration order.

use super::model::{LayerSpec, ModelParams};
use super::ModelConfig;
use crate::error::{Error, Result};
use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DSAE1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    encoder: Vec<LayerSpec>,
    decoder: Vec<LayerSpec>,
    params: Vec<usize>,
    buffers: Vec<usize>,
}

pub(crate) fn encode_checkpoint(p: &ModelParams) -> Result<Vec<u8>> {
    p.check_consistency()?;
    let header = Header {
        config: p.config.clone(),
        encoder: p.encoder.clone(),
        decoder: p.decoder.clone(),
        params: p.params.iter().map(Vec::len).collect(),
        buffers: p.buffers.iter().map(Vec::len).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n_values: usize = header.params.iter().chain(&header.buffers).sum();
    let mut out = Vec::with_capacity(9 + json.len() + 4 * n_values);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let mut len = [0u8; 4];
    LittleEndian::write_u32(&mut len, json.len() as u32);
    out.extend_from_slice(&len);
    out.extend_from_slice(&json);
    let mut buf = [0u8; 4];
    for v in p.params.iter().chain(&p.buffers).flatten() {
        LittleEndian::write_f32(&mut buf, *v as f32);
        out.extend_from_slice(&buf);
    }
    Ok(out)
}

pub(crate) fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(Error::parse(0, "missing DSAE1 magic"));
    }
    let hlen = LittleEndian::read_u32(&bytes[5..9]) as usize;
    let body = 9 + hlen;
    if bytes.len() < body {
        return Err(Error::parse(bytes.len(), "checkpoint header is truncated"));
    }
    let header: Header = serde_json::from_slice(&bytes[9..body])
        .map_err(|e| Error::parse(9 + e.column(), format!("bad checkpoint header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| Error::parse(9, format!("bad checkpoint config: {e}")))?;

    let layers = header.encoder.iter().chain(&header.decoder);
    let want_p: Vec<usize> = layers.clone().flat_map(LayerSpec::param_lens).collect();
    let want_b: Vec<usize> = layers.flat_map(LayerSpec::buffer_lens).collect();
    if want_p != header.params || want_b != header.buffers {
        return Err(Error::parse(9, "tensor shapes disagree with the layer list"));
    }
    let n_values: usize = header.params.iter().chain(&header.buffers).sum();
    let expected = body + 4 * n_values;
    if bytes.len() != expected {
        return Err(Error::parse(
            bytes.len().min(expected),
            format!("checkpoint holds {} bytes, header implies {expected}", bytes.len()),
        ));
    }

    let mut pos = body;
    let mut read = |len: usize| -> Vec<f64> {
        let v = (0..len)
            .map(|i| LittleEndian::read_f32(&bytes[pos + 4 * i..]) as f64)
            .collect();
        pos += 4 * len;
        v
    };
    let params = header.params.iter().map(|&l| read(l)).collect();
    let buffers = header.buffers.iter().map(|&l| read(l)).collect();
    Ok(ModelParams {
        config: header.config,
        encoder: header.encoder,
        decoder: header.decoder,
        params,
        buffers,
    })
}

pub fn save_checkpoint(p: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(p)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&std::fs::read(path)?)
}
