use std::fs;

use stft_core::data::{generate, read_matrix, DataSpec};
use stft_core::{Dataset, ModelConfig};

fn spec() -> DataSpec {
    let mut s = DataSpec::for_model(&ModelConfig::desk());
    s.train_per_class = 3;
    s.test_per_class = 2;
    s
}

#[test]
fn save_load_round_trip_is_exact() {
    let data = generate(&spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, data);
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&spec()).unwrap().save(a.path()).unwrap();
    generate(&spec()).unwrap().save(b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
    let mut other = spec();
    other.seed = 1;
    let c = tempfile::tempdir().unwrap();
    generate(&other).unwrap().save(c.path()).unwrap();
    assert_ne!(fs::read(a.path().join("text.bin")).unwrap(), fs::read(c.path().join("text.bin")).unwrap());
}

#[test]
fn feature_file_layout() {
    let data = generate(&spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let raw = fs::read(dir.path().join("text.bin")).unwrap();
    let (rows, width) = (data.spec.classes, data.spec.text_dim);
    assert_eq!(&raw[..8], b"STFTFEAT");
    assert_eq!(u32::from_le_bytes(raw[8..12].try_into().unwrap()) as usize, width);
    assert_eq!(u32::from_le_bytes(raw[12..16].try_into().unwrap()) as usize, rows);
    assert_eq!(raw.len(), 16 + 4 * rows * width);
    let first = f32::from_le_bytes(raw[16..20].try_into().unwrap()) as f64;
    assert_eq!(first, data.text.data()[0]);
    let (r, w, values) = read_matrix(&dir.path().join("text.bin")).unwrap();
    assert_eq!((r, w), (rows, width));
    assert_eq!(values, data.text.data());
}

#[test]
fn corrupted_files_are_rejected() {
    let data = generate(&spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let p = dir.path().join("train_audio.bin");
    let mut raw = fs::read(&p).unwrap();
    raw.truncate(raw.len() - 4);
    fs::write(&p, &raw).unwrap();
    assert!(Dataset::load(dir.path()).is_err());

    data.save(dir.path()).unwrap();
    let p = dir.path().join("text.bin");
    let mut raw = fs::read(&p).unwrap();
    raw[0] = b'X';
    fs::write(&p, &raw).unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}

#[test]
fn noiseless_classes_repeat_one_sample() {
    let mut s = spec();
    s.sigma = 0.0;
    let data = generate(&s).unwrap();
    let split = &data.test;
    let w = split.audio.numel() / split.len();
    for i in 0..split.len() {
        for j in 0..split.len() {
            let same = split.labels[i] == split.labels[j];
            let ra = &split.audio.data()[i * w..(i + 1) * w];
            let rb = &split.audio.data()[j * w..(j + 1) * w];
            assert_eq!(ra == rb, same, "{i} {j}");
        }
    }
}

#[test]
fn model_and_data_widths_must_agree() {
    let data = generate(&spec()).unwrap();
    let mut cfg = ModelConfig::desk();
    assert!(data.check_compatible(&cfg).is_ok());
    cfg.h_in = 8;
    assert!(data.check_compatible(&cfg).is_err());
}
