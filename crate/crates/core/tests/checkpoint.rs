use spikelm::model::{AnnParams, ModelCheckpoint, TransformerConfig, MAGIC};
use spikelm::Error;

fn ck() -> ModelCheckpoint {
    let cfg = TransformerConfig::new(2, 2, 16, 8, 11);
    AnnParams::init(&cfg, 3).to_checkpoint(&cfg, Some("abcdefghij ".into()))
}

#[test]
fn bytes_roundtrip_bit_exact() {
    let a = ck();
    let bytes = a.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    let b = ModelCheckpoint::from_bytes(&bytes).unwrap();
    assert_eq!(a, b);
    assert_eq!(b.to_bytes().unwrap(), bytes);
    assert_eq!(a.digest(|_| true), b.digest(|_| true));
}

#[test]
fn corrupt_inputs_are_format_errors() {
    let bytes = ck().to_bytes().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(ModelCheckpoint::from_bytes(&bad_magic), Err(Error::Format(_))));
    for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(ModelCheckpoint::from_bytes(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
}

#[test]
fn digest_filter_selects_tensors() {
    let a = ck();
    let mut b = a.clone();
    let name = b.tensors.keys().find(|n| n.contains("attn.w_q")).unwrap().clone();
    b.tensors.get_mut(&name).unwrap().data[0] += 1.0;
    let others = |n: &str| !n.contains("attn.w_q");
    assert_eq!(a.digest(others), b.digest(others));
    assert_ne!(a.digest(|_| true), b.digest(|_| true));
}
