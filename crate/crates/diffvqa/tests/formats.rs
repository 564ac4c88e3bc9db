use std::fs;

use diffvqa::checkpoint::{Checkpoint, MAGIC, VERSION};
use diffvqa::config::{TrainConfig, KEYS};
use diffvqa::dataset::{read_annotations, read_split, tree_digest, write_dataset, GenConfig, Manifest};
use diffvqa::pgm::{quantize, Gray};
use diffvqa::Error;
use diffvqa_core::model::{DiffVqaModel, ModelConfig, Vocabulary};
use diffvqa_core::optim::{Adam, AdamConfig};
use diffvqa_core::synth::{generate_pair, sample_seed};
use diffvqa_core::tensor::Tensor;

fn small_gen(count: usize, seed: u64) -> GenConfig {
    GenConfig {
        count,
        seed,
        ..GenConfig::default()
    }
}

#[test]
fn pgm_round_trip_and_header_parsing() {
    let g = Gray::from_values(3, 2, &[0.0, 0.5, 1.0, 0.25, -1.0, 2.0]);
    assert_eq!(g.pixels, [0, 128, 255, 64, 0, 255]);
    let bytes = g.encode();
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(Gray::decode(&bytes).unwrap(), g);

    let commented = b"P5 # comment\n3 # w\n2\n255\n\x01\x02\x03\x04\x05\x06";
    assert_eq!(Gray::decode(commented).unwrap().pixels, [1, 2, 3, 4, 5, 6]);
    assert!(Gray::decode(b"P2\n1 1\n255\n0").is_err());
    assert!(Gray::decode(b"P5\n2 2\n255\n\x00").is_err());
    assert!(Gray::decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    assert_eq!(quantize(f64::NAN), 0);
}

#[test]
fn pgm_maxval_is_rescaled() {
    let g = Gray::decode(b"P5\n2 1\n15\n\x0f\x00").unwrap();
    assert_eq!(g.pixels, [255, 0]);
}

#[test]
fn dataset_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_gen(20, 3);
    let m = write_dataset(dir.path(), &cfg).unwrap();
    assert_eq!(m.count("train"), Some(16));
    assert_eq!(m.count("valid"), Some(2));
    assert_eq!(m.count("test"), Some(2));
    assert_eq!(Manifest::read(dir.path()).unwrap(), m);

    let train = read_split(dir.path(), "train").unwrap();
    assert_eq!(train.len(), 16);
    for (i, r) in train.iter().enumerate() {
        let p = generate_pair(sample_seed(3, i as u64), &cfg.synth).unwrap();
        assert_eq!(r.ann.answer, p.answer);
        assert_eq!(r.ann.keyword, p.keyword);
        assert_eq!(r.change, p.change);
        assert_eq!(r.mask, p.gt_mask);
        for (a, b) in r.main.data().iter().zip(p.main.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        for (a, b) in r.reference.data().iter().zip(p.reference.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        for (a, b) in r.theta_star.to_row_major().iter().zip(p.theta_star.to_row_major()) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert!(r.ann.answer.contains(&r.ann.keyword));
    }
    // valid ids continue after train
    let valid = read_annotations(dir.path(), "valid").unwrap();
    assert_eq!(valid[0].id, "000016");
}

#[test]
fn jsonl_count_must_match_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &small_gen(10, 1)).unwrap();
    let path = dir.path().join("train.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let short: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    fs::write(&path, short).unwrap();
    assert!(matches!(read_split(dir.path(), "train"), Err(Error::Dataset(_))));
    fs::write(&path, "{not json}\n").unwrap();
    assert!(matches!(
        read_annotations(dir.path(), "train"),
        Err(Error::Annotation { line: 1, .. })
    ));
}

#[test]
fn regeneration_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_dataset(&root, &small_gen(12, 9)).unwrap();
    let first = tree_digest(&root).unwrap();
    fs::remove_dir_all(&root).unwrap();
    write_dataset(&root, &small_gen(12, 9)).unwrap();
    assert_eq!(first, tree_digest(&root).unwrap());
    // 12 samples: 3 images each, 3 jsonl, 1 manifest
    assert_eq!(first.len(), 12 * 3 + 4);

    fs::remove_dir_all(&root).unwrap();
    write_dataset(&root, &small_gen(12, 10)).unwrap();
    assert_ne!(first, tree_digest(&root).unwrap());
}

fn tiny_model() -> DiffVqaModel {
    let cfg = ModelConfig {
        image_size: 32,
        reg_channels: vec![4],
        enc_channels: vec![4, 8],
        embed_dim: 16,
        projector_heads: 2,
        text_heads: 2,
        decoder_heads: 2,
        decoder_layers: 1,
        ..ModelConfig::toy()
    };
    DiffVqaModel::new(cfg, Vocabulary::synthetic(), 4).unwrap()
}

fn checkpoint_with_moments() -> Checkpoint {
    let model = tiny_model();
    let mut adam = Adam::new(AdamConfig::default());
    let mut params: Vec<Tensor> = model.params.tensors().to_vec();
    let grads: Vec<Tensor> = params.iter().map(|t| Tensor::from_fn(t.shape(), |i| (i as f64).sin())).collect();
    adam.step(&mut params, &grads);
    Checkpoint::new(&model, &adam, 3, 0.123456789)
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.dvqk");
    let ck = checkpoint_with_moments();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    for (a, b) in back.params.tensors().iter().zip(ck.params.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let again = dir.path().join("b.dvqk");
    back.save(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    assert_eq!(back.model().unwrap().params, ck.params);

    // a fresh optimizer (no moments yet) round-trips too
    let fresh = Checkpoint::new(&tiny_model(), &Adam::new(AdamConfig::default()), 0, 0.0);
    assert_eq!(Checkpoint::from_bytes(&fresh.to_bytes().unwrap()).unwrap(), fresh);
}

#[test]
fn checkpoint_corruption_is_detected() {
    let bytes = checkpoint_with_moments().to_bytes().unwrap();

    let mut flipped = bytes.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x01;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::ChecksumMismatch { .. })));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::BadMagic)));

    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&newer),
        Err(Error::VersionMismatch { found, expected }) if found == VERSION + 1 && expected == VERSION
    ));

    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Truncated(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..40]), Err(Error::Truncated(_))));
    assert!(matches!(Checkpoint::from_bytes(&MAGIC), Err(Error::Truncated(_))));
}

#[test]
fn config_parses_documented_keys() {
    let cfg = TrainConfig::parse(
        "# comment\nepochs = 8\n warmup_epochs=1 # trailing\nlr = 1e-3\nenc_channels = 8, 16\n\nbatch_size = 4\n",
    )
    .unwrap();
    assert_eq!(cfg.epochs, 8);
    assert_eq!(cfg.adam.lr, 1e-3);
    assert_eq!(cfg.model.enc_channels, [8, 16]);
    assert_eq!(cfg.batch_size, 4);
    assert_eq!(cfg.eval_every, 1);

    let d = TrainConfig::default();
    assert_eq!((d.epochs, d.warmup_epochs), (16, 1));
    assert_eq!(TrainConfig::parse(&d.render()).unwrap(), d);
    assert!(KEYS.iter().all(|(k, _)| d.render().contains(&format!("\n{k} = "))));
}

#[test]
fn config_rejects_bad_input() {
    let line_of = |text: &str| match TrainConfig::parse(text) {
        Err(Error::Config { line, .. }) => line,
        other => panic!("expected a config error, got {other:?}"),
    };
    assert_eq!(line_of("epochs = 4\nlearning_rate = 1\n"), 2);
    assert_eq!(line_of("epochs\n"), 1);
    assert_eq!(line_of("epochs = four\n"), 1);
    assert_eq!(line_of("epochs = 4\nepochs = 5\n"), 2);
    assert!(TrainConfig::parse("epochs = 2\nwarmup_epochs = 2\n").is_err());
    assert!(TrainConfig::parse("lr = 0\n").is_err());
    assert!(TrainConfig::parse("embed_dim = 130\n").is_err());
}
