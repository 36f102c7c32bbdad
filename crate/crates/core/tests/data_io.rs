mod common;

use common::rng;
use dhat_core::data::{
    augment_batch, encode_cifar_binary, encode_idx_images, encode_idx_labels, load_cifar_binary,
    load_idx, parse_cifar_binary, parse_idx, synth_dataset, Dataset, Split, SynthSpec,
};
use dhat_core::{Error, Graph, Real, Tensor};
use rand::Rng;

fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    images.extend([0, 64, 128, 255, 10, 20, 30, 40]);
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 7];
    (images, labels)
}

#[test]
fn idx_fixture_parses() {
    let (img, lab) = idx_fixture();
    let ds = parse_idx(&img, &lab, 10).unwrap();
    assert_eq!(ds.images().shape(), &[2, 1, 2, 2]);
    assert_eq!(ds.labels(), &[3, 7]);
    assert_eq!(ds.images().data()[3], 1.0);
    assert_eq!(ds.images().data()[0], 0.0);
    assert!((ds.images().data()[1] - 64.0 / 255.0).abs() < 1e-15);
}

#[test]
fn idx_errors() {
    let (img, lab) = idx_fixture();
    let mut bad = img.clone();
    bad[3] = 1;
    assert!(matches!(parse_idx(&bad, &lab, 10), Err(Error::Format(_))));
    assert!(matches!(parse_idx(&img[..img.len() - 1], &lab, 10), Err(Error::Format(_))));
    assert!(matches!(parse_idx(&img, &lab[..9], 10), Err(Error::Format(_))));
    let mut wrong_count = lab.clone();
    wrong_count[7] = 3;
    assert!(matches!(parse_idx(&img, &wrong_count, 10), Err(Error::Format(_))));
    assert!(matches!(parse_idx(&img[..10], &lab, 10), Err(Error::Format(_))));
    assert!(parse_idx(&img, &lab, 5).is_err());
}

#[test]
fn idx_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = idx_fixture();
    let ds = parse_idx(&img, &lab, 10).unwrap();
    let enc_i = encode_idx_images(ds.images()).unwrap();
    let enc_l = encode_idx_labels(ds.labels());
    assert_eq!(enc_i, img);
    assert_eq!(enc_l, lab);
    let (pi, pl) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    std::fs::write(&pi, &enc_i).unwrap();
    std::fs::write(&pl, &enc_l).unwrap();
    assert_eq!(load_idx(&pi, &pl, 10).unwrap(), ds);
    assert!(matches!(load_idx(&dir.path().join("none"), &pl, 10), Err(Error::Io { .. })));
}

fn cifar_records(n: usize, coarse: bool, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for i in 0..n {
        if coarse {
            out.push(r.random_range(0..20));
        }
        out.push((i * 7 % if coarse { 100 } else { 10 }) as u8);
        out.extend((0..3072).map(|_| r.random::<u8>()));
    }
    out
}

#[test]
fn cifar_single_record_layout() {
    let mut rec = vec![7u8];
    rec.extend((0..3072).map(|i| if i < 1024 { 255 } else { 0 }));
    rec[1 + 5] = 51;
    let ds = parse_cifar_binary(&rec, 10).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.labels(), &[7]);
    assert_eq!(ds.images().at(&[0, 0, 0, 5]), 0.2);
    assert_eq!(ds.images().at(&[0, 0, 31, 31]), 1.0);
    assert_eq!(ds.images().at(&[0, 1, 0, 0]), 0.0);
    assert!(matches!(parse_cifar_binary(&rec[..3000], 10), Err(Error::Format(_))));
    assert!(parse_cifar_binary(&rec, 7).is_err());
}

#[test]
fn cifar_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for (classes, coarse) in [(10, false), (100, true)] {
        let bytes = cifar_records(10, coarse, classes as u64);
        let ds = parse_cifar_binary(&bytes, classes).unwrap();
        assert_eq!(ds.len(), 10);
        let re = encode_cifar_binary(&ds).unwrap();
        let again = parse_cifar_binary(&re, classes).unwrap();
        assert_eq!(again, ds);
        if !coarse {
            assert_eq!(re, bytes);
        }
        let p = dir.path().join(format!("c{classes}.bin"));
        std::fs::write(&p, &bytes).unwrap();
        let half = dir.path().join(format!("c{classes}_b.bin"));
        std::fs::write(&half, &bytes).unwrap();
        assert_eq!(load_cifar_binary(&[p, half], classes).unwrap().len(), 20);
    }
}

#[test]
fn dataset_validation() {
    let x = Tensor::full(&[2, 1, 2, 2], 0.5);
    assert!(Dataset::new(x.clone(), vec![0, 1], 2, Split::Train).is_ok());
    assert!(Dataset::new(x.clone(), vec![0, 2], 2, Split::Train).is_err());
    assert!(Dataset::new(x.clone(), vec![0], 2, Split::Train).is_err());
    assert!(Dataset::new(Tensor::full(&[2, 1, 2, 2], 1.5), vec![0, 1], 2, Split::Train).is_err());
    assert!(Dataset::new(Tensor::zeros(&[0, 1, 2, 2]), vec![], 2, Split::Train).is_err());
}

fn spec(sigma: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        num_classes: 4,
        samples_per_class: 25,
        image_size: 10,
        channels: 1,
        sigma,
        blobs: 2,
        seed,
    }
}

#[test]
fn synthetic_data_is_deterministic() {
    let a = synth_dataset(&spec(0.1, 3)).unwrap();
    let b = synth_dataset(&spec(0.1, 3)).unwrap();
    assert!(a.images().bit_eq(b.images()));
    assert_eq!(a.labels(), b.labels());
    let c = synth_dataset(&spec(0.1, 4)).unwrap();
    assert!(!a.images().bit_eq(c.images()));
    assert!(a.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(a.len(), 100);

    let clean = synth_dataset(&spec(0.0, 3)).unwrap();
    let per = 100;
    for i in 4..clean.len() {
        let (row, first) = (&clean.images().data()[i * per..(i + 1) * per], &clean.images().data()[(i % 4) * per..(i % 4 + 1) * per]);
        assert_eq!(row, first);
    }
}

#[test]
fn linear_classifier_separates_low_noise_blobs() {
    let ds = synth_dataset(&spec(0.05, 9)).unwrap();
    let n = ds.len();
    let d = 100;
    let c = 4;
    let x = ds.images().clone().reshape(&[n, d]).unwrap();
    let mut w = Tensor::zeros(&[d, c]);
    let mut b = Tensor::zeros(&[c]);
    for _ in 0..300 {
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.variable(w.clone()), g.variable(b.clone()));
        let z = g.matmul(vx, vw).unwrap();
        let z = g.add_bias(z, vb).unwrap();
        let ce = g.cross_entropy(z, ds.labels()).unwrap();
        let l = g.mean(ce).unwrap();
        g.backward(l).unwrap();
        for (t, v) in [(&mut w, vw), (&mut b, vb)] {
            let grad = g.grad(v).unwrap();
            for (p, q) in t.data_mut().iter_mut().zip(grad.data()) {
                *p -= 1.0 * q;
            }
        }
    }
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.constant(x), g.constant(w), g.constant(b));
    let z = g.matmul(vx, vw).unwrap();
    let z = g.add_bias(z, vb).unwrap();
    let pred = g.value(z).argmax_rows();
    let acc = pred.iter().zip(ds.labels()).filter(|(a, b)| a == b).count() as Real / n as Real;
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn slicing_and_epoch_order() {
    let ds = synth_dataset(&spec(0.1, 1)).unwrap();
    let (train, test) = ds.split_tail(20, Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (80, 20));
    assert_eq!(test.labels(), &ds.labels()[80..]);
    let o1 = ds.epoch_order(5, 1);
    let mut sorted = o1.clone();
    sorted.sort();
    assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    assert_eq!(o1, ds.epoch_order(5, 1));
    assert_ne!(o1, ds.epoch_order(5, 2));
    assert!(ds.subset(90, 20, Split::Val).is_err());
}

#[test]
fn augmentation_is_seeded_and_shape_preserving() {
    let ds = synth_dataset(&spec(0.1, 2)).unwrap();
    let (x, _) = ds.range(0, 8);
    let a = augment_batch(&x, 3);
    assert_eq!(a.shape(), x.shape());
    assert!(a.bit_eq(&augment_batch(&x, 3)));
    assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}
