mod common;

use common::{rng, tiny_dual_head, uniform};
use dhat_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointInfo};
use dhat_core::nn::{build_network, ArchSpec, Head, HeadMode, Init, Region};
use dhat_core::Error;

fn info() -> CheckpointInfo {
    CheckpointInfo {
        epoch: 4,
        stage: 3,
        config_digest: "abc".into(),
        seed: 9,
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = tiny_dual_head(4, 8, 1);
    net.set_freeze(Region::Stem, true);
    net.set_enabled(Head::Second, false);
    let p1 = dir.path().join("a.dhat");
    save_checkpoint(&net, info(), &p1).unwrap();
    let ck = load_checkpoint(&p1).unwrap();
    assert_eq!(ck.metadata.info, info());
    let restored = ck.to_network().unwrap();
    let p2 = dir.path().join("b.dhat");
    save_checkpoint(&restored, info(), &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    for ((_, a), (_, b)) in net.params().iter().zip(restored.params()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.bit_eq(&b.value));
        assert_eq!(a.frozen, b.frozen);
    }
    assert!(restored.is_frozen(Region::Stem));
    assert!(!restored.is_enabled(Head::Second));
}

#[test]
fn loaded_network_forward_is_bit_identical() {
    let net = tiny_dual_head(3, 8, 2);
    let ck = Checkpoint::decode(&Checkpoint::from_network(&net, info()).encode()).unwrap();
    let restored = ck.to_network().unwrap();
    let mut r = rng(2);
    let x = uniform(&mut r, &[6, 1, 8, 8], 0.0, 1.0);
    for mode in [HeadMode::Main, HeadMode::Second, HeadMode::Merged] {
        assert!(net.predict(&x, mode).unwrap().bit_eq(&restored.predict(&x, mode).unwrap()));
    }
}

#[test]
fn every_parameter_appears_once() {
    let net = tiny_dual_head(3, 8, 3);
    let ck = Checkpoint::from_network(&net, info());
    let mut names: Vec<_> = ck.tensors.iter().map(|t| t.0.clone()).collect();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
    assert_eq!(n, net.params().len());
}

#[test]
fn wrong_architecture_names_the_tensor() {
    let spec = ArchSpec::smallconv(3, 1, 3).with_input(1, 8);
    let single = build_network(&spec, &mut Init::seeded(1)).unwrap();
    let ck = Checkpoint::from_network(&single, info());
    let wider = ArchSpec::smallconv(3, 2, 3).with_input(1, 8);
    match ck.to_network_for(&wider) {
        Err(Error::Checkpoint(msg)) => {
            assert!(ck.tensors.iter().any(|(n, _, _)| msg.contains(&format!("tensor {n} "))), "{msg}");
            assert!(msg.contains("expects"), "{msg}");
        }
        other => panic!("expected checkpoint error, got {other:?}"),
    }
    let fewer_classes = ArchSpec::smallconv(3, 1, 2).with_input(1, 8);
    assert!(matches!(ck.to_network_for(&fewer_classes), Err(Error::Checkpoint(_))));

    let dual = tiny_dual_head(3, 8, 4);
    let dck = Checkpoint::from_network(&dual, info());
    assert!(matches!(dck.to_network_for(&wider), Err(Error::Checkpoint(_))));

    let mut extra = Checkpoint::from_network(&single, info());
    extra.tensors.push(("bogus.weight".into(), dhat_core::Tensor::zeros(&[1]), false));
    match extra.to_network() {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("bogus.weight")),
        other => panic!("expected checkpoint error, got {other:?}"),
    }
}

#[test]
fn corrupt_files_are_format_errors() {
    let net = tiny_dual_head(3, 8, 5);
    let bytes = Checkpoint::from_network(&net, info()).encode();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::decode(&bytes[..20]), Err(Error::Format(_))));
}

#[test]
fn unknown_header_keys_are_ignored() {
    let net = tiny_dual_head(3, 8, 6);
    let bytes = Checkpoint::from_network(&net, info()).encode();
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    header["future"] = serde_json::json!({"x": 1});
    header["metadata"]["note"] = serde_json::json!("hello");
    header["tensors"][0]["checksum"] = serde_json::json!(0);
    let h = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend((h.len() as u64).to_le_bytes());
    out.extend(&h);
    out.extend(&bytes[16 + hlen..]);
    let ck = Checkpoint::decode(&out).unwrap();
    assert_eq!(ck.encode(), bytes);
}

#[test]
fn non_finite_parameters_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ArchSpec::smallconv(2, 1, 3).with_input(1, 6);
    let mut net = build_network(&spec, &mut Init::seeded(1)).unwrap();
    net.visit_regions_mut(&mut |_, p| {
        if p.name == "head.fc.bias" {
            p.value.data_mut()[0] = f64::NAN as dhat_core::Real;
        }
    });
    let err = save_checkpoint(&net, info(), &dir.path().join("x.dhat")).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
    assert!(matches!(load_checkpoint(&dir.path().join("x.dhat")), Err(Error::Io { .. })));
}
