//! Network checkpoints.
//!
//! Binary container: magic, schema version, a JSON header describing the
//! network (kind, config, head, training stage, frozen flag, parameter
//! digest, tensor shapes) and the raw little-endian f64 parameter blob in
//! visitation order. Loads rebuild the architecture from the header, fill
//! the parameters and verify the digest, so a round trip is bit-exact or it
//! fails.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bio::BioRegressor;
use super::unet::{SegHead, Unet};
use super::{param_digest, NetworkConfig, NetworkError, Params};

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BNCP";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    kind: String,
    stage: String,
    frozen: bool,
    digest: String,
    config: NetworkConfig,
    head: Option<SegHead>,
    params: Vec<ParamInfo>,
}

/// Descriptive fields read back from a checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub kind: String,
    pub stage: String,
    pub frozen: bool,
    pub digest: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NetworkError + '_ {
    move |source| NetworkError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> NetworkError {
    NetworkError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_checkpoint<P: Params>(
    path: &Path,
    net: &P,
    kind: &str,
    stage: &str,
    frozen: bool,
    config: &NetworkConfig,
    head: Option<SegHead>,
) -> Result<(), NetworkError> {
    let mut params = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    net.visit_params(&mut |name, view| {
        params.push(ParamInfo {
            name: name.to_string(),
            shape: view.shape().to_vec(),
        });
        for &v in view.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        stage: stage.to_string(),
        frozen,
        digest: param_digest(net),
        config: config.clone(),
        head,
        params,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(MAGIC).map_err(io_err(path))?;
    file.write_all(&SCHEMA_VERSION.to_le_bytes()).map_err(io_err(path))?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io_err(path))?;
    file.write_all(&header_json).map_err(io_err(path))?;
    file.write_all(&blob).map_err(io_err(path))?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(Header, Vec<u8>), NetworkError> {
    let mut file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let mut version = [0u8; 4];
    file.read_exact(&mut version).map_err(io_err(path))?;
    let version = u32::from_le_bytes(version);
    if version != SCHEMA_VERSION {
        return Err(NetworkError::UnsupportedSchema(version));
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len).map_err(io_err(path))?;
    let mut header_json = vec![0u8; u64::from_le_bytes(len) as usize];
    file.read_exact(&mut header_json).map_err(io_err(path))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| corrupt(path, format!("header: {e}")))?;
    let mut blob = Vec::new();
    file.read_to_end(&mut blob).map_err(io_err(path))?;
    Ok((header, blob))
}

fn fill_params<P: Params>(
    path: &Path,
    net: &mut P,
    header: &Header,
    blob: &[u8],
) -> Result<(), NetworkError> {
    let mut offset = 0usize;
    let mut index = 0usize;
    let mut failure: Option<String> = None;
    net.visit_params_mut(&mut |name, mut view| {
        if failure.is_some() {
            return;
        }
        let Some(info) = header.params.get(index) else {
            failure = Some("more parameters than the header lists".into());
            return;
        };
        if info.name != name || info.shape != view.shape() {
            failure = Some(format!(
                "parameter {index} mismatch: file has {} {:?}, network has {} {:?}",
                info.name,
                info.shape,
                name,
                view.shape()
            ));
            return;
        }
        let bytes = view.len() * 8;
        if offset + bytes > blob.len() {
            failure = Some("parameter blob truncated".into());
            return;
        }
        for v in view.iter_mut() {
            let mut le = [0u8; 8];
            le.copy_from_slice(&blob[offset..offset + 8]);
            *v = f64::from_le_bytes(le);
            offset += 8;
        }
        index += 1;
    });
    if let Some(reason) = failure {
        return Err(corrupt(path, reason));
    }
    if index != header.params.len() {
        return Err(corrupt(path, "fewer parameters than the header lists"));
    }
    if offset != blob.len() {
        return Err(corrupt(path, "trailing bytes after parameters"));
    }
    Ok(())
}

pub fn save_unet(path: &Path, net: &Unet, stage: &str) -> Result<(), NetworkError> {
    write_checkpoint(
        path,
        net,
        "unet",
        stage,
        net.is_frozen(),
        &net.config.clone(),
        Some(net.head),
    )
}

pub fn load_unet(path: &Path) -> Result<(Unet, CheckpointMeta), NetworkError> {
    let (header, blob) = read_checkpoint(path)?;
    if header.kind != "unet" {
        return Err(corrupt(path, format!("kind {} is not a unet", header.kind)));
    }
    let head = header.head.ok_or_else(|| corrupt(path, "missing head"))?;
    let mut net = Unet::new(&header.config, head, 0)?;
    fill_params(path, &mut net, &header, &blob)?;
    net.set_frozen(header.frozen);
    let digest = param_digest(&net);
    if digest != header.digest {
        return Err(corrupt(path, "parameter digest mismatch"));
    }
    Ok((
        net,
        CheckpointMeta {
            kind: header.kind,
            stage: header.stage,
            frozen: header.frozen,
            digest,
        },
    ))
}

pub fn save_bio(path: &Path, net: &BioRegressor, stage: &str) -> Result<(), NetworkError> {
    write_checkpoint(
        path,
        net,
        "bio",
        stage,
        net.is_frozen(),
        &net.config.clone(),
        None,
    )
}

pub fn load_bio(path: &Path) -> Result<(BioRegressor, CheckpointMeta), NetworkError> {
    let (header, blob) = read_checkpoint(path)?;
    if header.kind != "bio" {
        return Err(corrupt(path, format!("kind {} is not a bio net", header.kind)));
    }
    let mut net = BioRegressor::new(&header.config, 0)?;
    fill_params(path, &mut net, &header, &blob)?;
    net.set_frozen(header.frozen);
    let digest = param_digest(&net);
    if digest != header.digest {
        return Err(corrupt(path, "parameter digest mismatch"));
    }
    Ok((
        net,
        CheckpointMeta {
            kind: header.kind,
            stage: header.stage,
            frozen: header.frozen,
            digest,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_bio_net, build_unet};

    fn cfg(in_ch: usize, out_ch: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels: in_ch,
            out_channels: out_ch,
            base_width: 4,
            depth: 2,
            bio_head_width: 8,
        }
    }

    #[test]
    fn unet_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let net = build_unet(&cfg(1, 12), SegHead::Softmax, 11).unwrap();
        let digest = param_digest(&net);
        save_unet(&path, &net, "stage2").unwrap();
        let (loaded, meta) = load_unet(&path).unwrap();
        assert_eq!(param_digest(&loaded), digest);
        assert_eq!(meta.stage, "stage2");
        assert!(!meta.frozen);
    }

    #[test]
    fn bio_round_trip_preserves_frozen_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        let mut net = build_bio_net(&cfg(1, 1), 3).unwrap();
        let digest = net.freeze();
        save_bio(&path, &net, "stage1").unwrap();
        let (loaded, meta) = load_bio(&path).unwrap();
        assert!(loaded.is_frozen());
        assert_eq!(meta.digest, digest);
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        let net = build_bio_net(&cfg(1, 1), 3).unwrap();
        save_bio(&path, &net, "stage1").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_bio(&path),
            Err(NetworkError::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let net = build_bio_net(&cfg(1, 1), 3).unwrap();
        save_bio(&path, &net, "stage1").unwrap();
        assert!(load_unet(&path).is_err());
    }
}
