//! Float and quantized model checkpoints stored as tensor archives.
//!
//! Every checkpoint carries its model config as JSON bytes in an int8 record
//! named `__config__`. Quantized checkpoints hold int8 weights and int32
//! biases with their parameters, plus one empty int8 record per activation
//! site named `site:<name>`.

use std::path::Path;

use crate::data::{decode_archive, encode_archive, load_archive, Archive, Record, TensorData};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, NetworkGraph};
use crate::quant::{QuantParams, QuantizedBias, QuantizedNetwork, QuantizedTensor};
use crate::tensor::Tensor;

pub const CONFIG_RECORD: &str = "__config__";
pub const SITE_PREFIX: &str = "site:";

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Float(NetworkGraph),
    Quantized(QuantizedNetwork),
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        match self {
            Checkpoint::Float(n) => &n.config,
            Checkpoint::Quantized(q) => &q.config,
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Checkpoint::Quantized(_))
    }

    /// Probabilities for a batch, through whichever path the checkpoint holds.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Checkpoint::Float(n) => n.predict(x),
            Checkpoint::Quantized(q) => q.predict(x),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config().input
    }
}

fn config_record(cfg: &ModelConfig) -> Record {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let bytes: Vec<i8> = json.into_iter().map(|b| b as i8).collect();
    Record::plain(TensorData::I8(Tensor::new(&[bytes.len()], bytes).expect("rank-1 tensor")))
}

fn read_config(archive: &Archive) -> Result<ModelConfig> {
    let rec = archive
        .get(CONFIG_RECORD)
        .ok_or_else(|| Error::Config(format!("checkpoint has no {CONFIG_RECORD} record")))?;
    let TensorData::I8(t) = &rec.data else {
        return Err(Error::Config(format!("{CONFIG_RECORD} is not an int8 record")));
    };
    let bytes: Vec<u8> = t.data().iter().map(|&b| b as u8).collect();
    let cfg: ModelConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn float_archive(net: &NetworkGraph) -> Archive {
    let mut a: Archive = net
        .params
        .iter()
        .map(|(k, v)| (k.clone(), Record::plain(TensorData::F32(v.clone()))))
        .collect();
    a.insert(CONFIG_RECORD.into(), config_record(&net.config));
    a
}

pub fn quantized_archive(q: &QuantizedNetwork) -> Archive {
    let mut a = Archive::new();
    for (k, w) in &q.weights {
        a.insert(
            k.clone(),
            Record {
                data: TensorData::I8(w.data.clone()),
                qparams: Some(w.qparams),
            },
        );
    }
    for (k, b) in &q.biases {
        a.insert(
            k.clone(),
            Record {
                data: TensorData::I32(b.data.clone()),
                qparams: Some(QuantParams {
                    scale: b.scale,
                    zero_point: 0,
                }),
            },
        );
    }
    for (k, qp) in &q.sites {
        a.insert(
            format!("{SITE_PREFIX}{k}"),
            Record {
                data: TensorData::I8(Tensor::new(&[0], vec![]).expect("empty tensor")),
                qparams: Some(*qp),
            },
        );
    }
    a.insert(CONFIG_RECORD.into(), config_record(&q.config));
    a
}

fn decode_float(cfg: ModelConfig, archive: Archive) -> Result<NetworkGraph> {
    let mut net = NetworkGraph::build(&cfg)?;
    let mut params = crate::autograd::ParamSet::new();
    for (k, rec) in archive {
        if k == CONFIG_RECORD {
            continue;
        }
        match rec.data {
            TensorData::F32(t) => {
                params.insert(k, t);
            }
            other => return Err(Error::Config(format!("{k}: float checkpoint holds a {:?} record", other.kind()))),
        }
    }
    net.set_params(params)?;
    Ok(net)
}

fn decode_quantized(cfg: ModelConfig, archive: Archive) -> Result<QuantizedNetwork> {
    let mut weights = std::collections::BTreeMap::new();
    let mut biases = std::collections::BTreeMap::new();
    let mut sites = std::collections::BTreeMap::new();
    for (k, rec) in archive {
        if k == CONFIG_RECORD {
            continue;
        }
        let qp = rec
            .qparams
            .ok_or_else(|| Error::Config(format!("{k}: quantized record without scale and zero point")))?;
        qp.validate()?;
        match (k.strip_prefix(SITE_PREFIX), rec.data) {
            (Some(site), TensorData::I8(_)) => {
                sites.insert(site.to_string(), qp);
            }
            (None, TensorData::I8(data)) => {
                weights.insert(k, QuantizedTensor { data, qparams: qp });
            }
            (None, TensorData::I32(data)) => {
                if qp.zero_point != 0 {
                    return Err(Error::Config(format!("{k}: bias zero point {}", qp.zero_point)));
                }
                biases.insert(k, QuantizedBias { data, scale: qp.scale });
            }
            (_, other) => return Err(Error::Config(format!("{k}: unexpected {:?} record", other.kind()))),
        }
    }
    QuantizedNetwork::from_parts(cfg, weights, biases, sites)
}

/// Rebuilds a model from archive records, detecting the float or
/// quantized layout.
pub fn decode_checkpoint(archive: Archive) -> Result<Checkpoint> {
    let cfg = read_config(&archive)?;
    if archive.keys().any(|k| k.starts_with(SITE_PREFIX)) {
        decode_quantized(cfg, archive).map(Checkpoint::Quantized)
    } else {
        decode_float(cfg, archive).map(Checkpoint::Float)
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    encode_archive(&match ckpt {
        Checkpoint::Float(n) => float_archive(n),
        Checkpoint::Quantized(q) => quantized_archive(q),
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(load_archive(path)?)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    decode_checkpoint(decode_archive(bytes)?)
}
