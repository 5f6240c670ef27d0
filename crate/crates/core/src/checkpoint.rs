//! Binary parameter checkpoint.
//!
//! Layout, little-endian: `"CKV1"`, u32 `d_e`, `d_u`, `d_g`, `m`, `flags`, then
//! every tensor of [`ModelParams::tensors`] in order as u32 rows, u32 cols and
//! row-major f64 data. Flag bits: 0 share keys, 1 share values, 2 tied
//! routers, 3 self-attention host.
//!
//! [`ModelParams::tensors`]: crate::attention::ModelParams::tensors

use std::path::Path;

use crate::attention::{AttentionMode, CtrModel, ModelConfig};
use crate::codec::{write_atomic, ByteReader, ByteWriter};
use crate::collective::CollectiveConfig;
use crate::error::{Error, Result};
use crate::numkit::Rng;

const MAGIC: &[u8; 4] = b"CKV1";
const SHARE_KEYS: u32 = 1;
const SHARE_VALUES: u32 = 1 << 1;
const TIE_ROUTERS: u32 = 1 << 2;
const SELF_MODE: u32 = 1 << 3;

pub fn encode(model: &CtrModel) -> Vec<u8> {
    let cc = &model.config.collective;
    let mut flags = 0;
    if cc.share_keys {
        flags |= SHARE_KEYS;
    }
    if cc.share_values {
        flags |= SHARE_VALUES;
    }
    if cc.tie_routers {
        flags |= TIE_ROUTERS;
    }
    if model.config.attention.mode == AttentionMode::SelfCausal {
        flags |= SELF_MODE;
    }
    let mut w = ByteWriter::new();
    w.bytes(MAGIC)
        .u32(cc.embed_dim as u32)
        .u32(cc.user_dim as u32)
        .u32(cc.global_dim as u32)
        .u32(cc.pool_size as u32)
        .u32(flags);
    for (_, t) in model.params.tensors() {
        w.matrix(t);
    }
    w.finish()
}

/// Rebuilds a model. Loss weights are training settings and come back as the
/// defaults.
pub fn decode(bytes: &[u8]) -> Result<CtrModel> {
    let mut r = ByteReader::new(bytes, "checkpoint");
    r.expect_magic(MAGIC)?;
    let d_e = r.u32()? as usize;
    let d_u = r.u32()? as usize;
    let d_g = r.u32()? as usize;
    let m = r.u32()? as usize;
    let flags = r.u32()?;
    if flags & !(SHARE_KEYS | SHARE_VALUES | TIE_ROUTERS | SELF_MODE) != 0 {
        return Err(Error::format(
            "checkpoint",
            format!("unknown flag bits {flags:#x}"),
        ));
    }
    let mut cc = CollectiveConfig::new(d_e, d_u, d_g, m);
    cc.share_keys = flags & SHARE_KEYS != 0;
    cc.share_values = flags & SHARE_VALUES != 0;
    cc.tie_routers = flags & TIE_ROUTERS != 0;
    let mode = if flags & SELF_MODE != 0 {
        AttentionMode::SelfCausal
    } else {
        AttentionMode::Target
    };
    let mut model = CtrModel::init(ModelConfig::new(cc, mode), &mut Rng::new(0)).map_err(|e| {
        Error::format(
            "checkpoint",
            format!("header describes an invalid model: {e}"),
        )
    })?;
    let names: Vec<String> = model.params.tensors().into_iter().map(|(n, _)| n).collect();
    for (slot, name) in model.params.tensors_mut().into_iter().zip(names) {
        let t = r.matrix()?;
        if t.shape() != slot.shape() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "tensor {name} is {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                ),
            ));
        }
        *slot = t;
    }
    r.finish()?;
    Ok(model)
}

pub fn save(model: &CtrModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<CtrModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_every_layout() {
        let mut rng = Rng::new(3);
        for (k, v, tie, mode) in [
            (true, true, false, AttentionMode::Target),
            (true, true, true, AttentionMode::SelfCausal),
            (true, false, false, AttentionMode::Target),
            (false, false, false, AttentionMode::Target),
        ] {
            let mut cc = CollectiveConfig::new(6, 2, 4, 8);
            cc.share_keys = k;
            cc.share_values = v;
            cc.tie_routers = tie;
            let model = CtrModel::init(ModelConfig::new(cc, mode), &mut rng).unwrap();
            let bytes = encode(&model);
            let back = decode(&bytes).unwrap();
            assert_eq!(back.params, model.params);
            assert_eq!(back.config.attention.mode, mode);
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let model = CtrModel::init(
            ModelConfig::new(CollectiveConfig::new(4, 1, 3, 4), AttentionMode::Target),
            &mut Rng::new(1),
        )
        .unwrap();
        let bytes = encode(&model);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes;
        bad[1] = b'X';
        assert!(decode(&bad).is_err());
    }
}
