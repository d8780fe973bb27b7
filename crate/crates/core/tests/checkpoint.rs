use sadnn::checkpoint::*;
use sadnn::data::{decode_archive, encode_archive, synth_seg_dataset, Record, TensorData};
use sadnn::models::{batch, ModelConfig, NetworkGraph};
use sadnn::quant::{calibrate_samples, quantize_network};
use sadnn::{Error, Tensor};

fn seg_pair() -> (NetworkGraph, sadnn::quant::QuantizedNetwork, Tensor<f32>) {
    let data = synth_seg_dataset(8, 32, 4).unwrap();
    let net = NetworkGraph::build(&ModelConfig::toy_seg()).unwrap();
    let q = quantize_network(&net, &calibrate_samples(&net, &data, 4).unwrap()).unwrap();
    let x = batch(&data.iter().take(3).collect::<Vec<_>>()).unwrap().0;
    (net, q, x)
}

#[test]
fn float_checkpoint_roundtrips() {
    let (net, _, x) = seg_pair();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.sadn");
    let ckpt = Checkpoint::Float(net.clone());
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert!(!back.is_quantized());
    assert_eq!(back, ckpt);
    assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());
}

#[test]
fn quantized_checkpoint_roundtrips() {
    let (_, q, x) = seg_pair();
    let ckpt = Checkpoint::Quantized(q.clone());
    let bytes = encode_checkpoint(&ckpt).unwrap();
    let back = checkpoint_from_bytes(&bytes).unwrap();
    assert!(back.is_quantized());
    assert_eq!(back, ckpt);
    assert_eq!(back.predict(&x).unwrap(), q.predict(&x).unwrap());
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
}

#[test]
fn quantized_checkpoint_is_about_a_quarter() {
    let (net, q, _) = seg_pair();
    let f = encode_checkpoint(&Checkpoint::Float(net)).unwrap().len();
    let i = encode_checkpoint(&Checkpoint::Quantized(q)).unwrap().len();
    assert!(i < f / 2, "{i} vs {f}");
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let (net, _, _) = seg_pair();
    let bytes = encode_checkpoint(&Checkpoint::Float(net)).unwrap();
    assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Archive(_))));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(&dir.path().join("none")), Err(Error::Io(_))));
}

#[test]
fn mismatched_config_is_rejected() {
    let (net, _, _) = seg_pair();
    let mut archive = decode_archive(&encode_checkpoint(&Checkpoint::Float(net.clone())).unwrap()).unwrap();
    let mut other = ModelConfig::toy_seg();
    other.channels = vec![4, 8];
    let json: Vec<i8> = serde_json::to_vec(&other).unwrap().into_iter().map(|b| b as i8).collect();
    archive.insert(CONFIG_RECORD.into(), Record::plain(TensorData::I8(Tensor::new(&[json.len()], json).unwrap())));
    let err = checkpoint_from_bytes(&encode_archive(&archive).unwrap()).unwrap_err();
    assert!(err.is_user_error(), "{err}");

    let mut missing = float_archive(&net);
    missing.remove(CONFIG_RECORD);
    assert!(matches!(decode_checkpoint(missing), Err(Error::Config(_))));

    let mut dropped = float_archive(&net);
    let first = dropped.keys().find(|k| *k != CONFIG_RECORD).unwrap().clone();
    dropped.remove(&first);
    assert!(decode_checkpoint(dropped).is_err());
}
