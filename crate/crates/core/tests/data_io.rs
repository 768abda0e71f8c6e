use std::fs;
use std::path::PathBuf;

use attrsets_core::data::{
    encode_idx_u8, load, parse_idx, read_features, shuffled_indices, write_csv, write_features, Dataset, DatasetSpec,
    Normalization, Source,
};
use attrsets_core::math::Prior;
use attrsets_core::model::{Architecture, Hypothesis};
use attrsets_core::sim::{generate_attribution_sets, sample_stream, OracleFile, SetFile, SyntheticTask};
use attrsets_core::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures")).join(name)
}

fn tabular(test_rows: usize) -> DatasetSpec {
    DatasetSpec::new(Source::Csv {
        train: fixture("tabular.csv"),
        test: None,
        header: false,
        test_rows,
    })
}

#[test]
fn tabular_fixture_splits_head_for_test() {
    let (train, test) = load(&tabular(500)).unwrap();
    assert_eq!((train.len(), test.len()), (1500, 500));
    assert_eq!(train.features.dim(), 21);
    // z-scored on the training rows
    for f in 0..21 {
        let col: Vec<f64> = train.features.rows().map(|r| r[f]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9, "feature {f}");
    }
    assert!(train.labels.iter().chain(&test.labels).all(|&y| y <= 1));
}

#[test]
fn csv_round_trip_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tabular(0);
    spec.normalization = Normalization::None;
    let (train, _) = load(&spec).unwrap();
    let path = dir.path().join("copy.csv");
    write_csv(&path, &train).unwrap();
    let spec2 = DatasetSpec {
        source: Source::Csv { train: path, test: None, header: false, test_rows: train.len() },
        ..spec.clone()
    };
    // held-out rows keep file order
    let (_, again) = load(&spec2).unwrap();
    assert_eq!(train, again);
    let fpath = dir.path().join("features.csv");
    write_features(&fpath, &train.features).unwrap();
    assert_eq!(read_features(&fpath).unwrap(), train.features);
}

#[test]
fn shuffle_is_seeded() {
    assert_eq!(shuffled_indices(500, 4), shuffled_indices(500, 4));
    assert_ne!(shuffled_indices(500, 4), shuffled_indices(500, 5));
    let mut sorted = shuffled_indices(500, 4);
    sorted.sort();
    assert_eq!(sorted, (0..500).collect::<Vec<_>>());
}

#[test]
fn csv_errors_carry_offsets_and_label_checks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "1,0.5,0.25\n0,abc,1\n").unwrap();
    let spec = DatasetSpec::new(Source::Csv { train: path.clone(), test: None, header: false, test_rows: 0 });
    match load(&spec) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, 13, "offset of the bad field"),
        other => panic!("expected a parse error, got {other:?}"),
    }
    fs::write(&path, "1,0.5\n12,0.25\n").unwrap();
    let mut spec = spec;
    spec.classes = Some(10);
    assert!(matches!(load(&spec), Err(Error::LabelRange { .. })));
}

#[test]
fn idx_archives_load_and_binarize() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<u8> = (0..6 * 4).map(|v| (v * 10) as u8).collect();
    let labels = vec![1u8, 0, 1, 7, 3, 1];
    fs::write(dir.path().join("tr-img"), encode_idx_u8(&[6, 2, 2], &images)).unwrap();
    fs::write(dir.path().join("tr-lab"), encode_idx_u8(&[6], &labels)).unwrap();
    fs::write(dir.path().join("te-img"), encode_idx_u8(&[6, 2, 2], &images)).unwrap();
    fs::write(dir.path().join("te-lab"), encode_idx_u8(&[6], &labels)).unwrap();
    let mut spec = DatasetSpec::new(Source::Idx {
        train_images: dir.path().join("tr-img"),
        train_labels: dir.path().join("tr-lab"),
        test_images: dir.path().join("te-img"),
        test_labels: dir.path().join("te-lab"),
    });
    spec.classes = Some(10);
    let (train, test) = load(&spec).unwrap();
    assert_eq!(test.labels, vec![1, 0, 1, 0, 0, 1]);
    assert_eq!(train.len(), 6);
    assert!(test.features.values().iter().all(|v| (0.0..=1.0).contains(v)));
    let parsed = parse_idx(&dir.path().join("tr-img"), &encode_idx_u8(&[6, 2, 2], &images)).unwrap();
    assert_eq!(parsed.dims, vec![6, 2, 2]);
}

#[test]
fn digit_archive_matches_known_rates() {
    let dir = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist"));
    if !dir.join("t10k-labels-idx1-ubyte").exists() {
        eprintln!("digit archive not present; skipping");
        return;
    }
    let (train, test) = load(&DatasetSpec::digits(&dir, 1)).unwrap();
    assert_eq!((train.len(), test.len()), (60_000, 10_000));
    assert!((test.positive_rate() - 0.1135).abs() < 1e-12);
    assert_eq!(train.features.dim(), 784);
}

#[test]
fn synthetic_pass_through_is_exact() {
    let task = SyntheticTask::shifted_gaussians(3, 0.5, 1.0).unwrap();
    let spec = DatasetSpec::new(Source::Synthetic { task: task.clone(), n_train: 400, n_test: 100, seed: 8 });
    let (train, _) = load(&spec).unwrap();
    let direct: Dataset = task.sample(400, 8);
    let mut a = train.labels.clone();
    let mut b = direct.labels.clone();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[test]
fn record_files_round_trip() {
    let task = SyntheticTask::shifted_gaussians(2, 0.2, 1.0).unwrap();
    let stream = sample_stream(&task, 1000, 1);
    let prior = Prior::exponential(5);
    let attribution = generate_attribution_sets(&stream, &prior, 2);
    let sets = SetFile { n: 1000, p_hat: stream.m() as f64 / 1000.0, k: 5, prior, sets: attribution.sets };
    let mut buf = Vec::new();
    sets.write(&mut buf).unwrap();
    assert_eq!(SetFile::read(buf.as_slice()).unwrap(), sets);
    let oracle = OracleFile { labels: stream.labels.clone(), true_positions: attribution.true_positions };
    let mut buf = Vec::new();
    oracle.write(&mut buf).unwrap();
    assert_eq!(OracleFile::read(buf.as_slice()).unwrap(), oracle);
}

#[test]
fn checkpoints_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let h = Hypothesis::init(Architecture::default_mlp(7), 3).unwrap();
    let path = dir.path().join("m.bin");
    h.save(&path).unwrap();
    assert_eq!(Hypothesis::load(&path).unwrap(), h);
    fs::write(&path, b"nope").unwrap();
    assert!(Hypothesis::load(&path).is_err());
}
