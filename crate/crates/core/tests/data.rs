mod common;

use std::collections::BTreeSet;

use common::*;
use deepcl::mnist::{self, batches, encode_idx_images, encode_idx_labels, normalize, parse_idx, Dataset, Idx, Split};
use deepcl::Error;

#[test]
fn fixtures_load_plain_and_gzipped() {
    let train = fixture(Split::Train);
    let test = fixture(Split::Test);
    assert_eq!((train.len(), test.len()), (64, 64));
    assert_eq!(train.signal_len(), 784);
    for ds in [&train, &test] {
        let hist = ds.label_histogram();
        assert!(hist.iter().all(|&c| (6..=7).contains(&c)), "{hist:?}");
        assert!(ds.images.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn idx_examples() {
    let bytes = encode_idx_images(&[9u8; 1568], 2, 28, 28);
    assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
    match parse_idx(&bytes).unwrap() {
        Idx::Images { count, rows, cols, pixels } => {
            assert_eq!((count, rows, cols, pixels.len()), (2, 28, 28, 1568));
        }
        other => panic!("unexpected {other:?}"),
    }
    let labels = [0u8, 0, 8, 1, 0, 0, 0, 2, 7, 3];
    assert_eq!(parse_idx(&labels).unwrap(), Idx::Labels(vec![7, 3]));
    assert_eq!(parse_idx(&encode_idx_labels(&[7, 3])).unwrap(), Idx::Labels(vec![7, 3]));

    assert!(matches!(parse_idx(&[0, 0, 0, 0, 0, 0, 0, 1, 5]), Err(Error::Format(_))));
    assert!(matches!(parse_idx(&bytes[..bytes.len() - 1]), Err(Error::Length(_))));
}

#[test]
fn mismatched_label_file_is_rejected() {
    let images = encode_idx_images(&[0u8; 784 * 3], 3, 28, 28);
    let labels = encode_idx_labels(&[1, 2]);
    assert!(Dataset::from_idx(&images, &labels, Split::Train).is_err());
    let bad_label = encode_idx_labels(&[1, 2, 10]);
    assert!(Dataset::from_idx(&images, &bad_label, Split::Train).is_err());
}

#[test]
fn normalization_endpoints_and_round_trip() {
    let pixels: Vec<u8> = (0..=255).cycle().take(784).map(|v| v as u8).collect();
    let t = normalize(&pixels, 1).unwrap();
    assert_eq!(t.shape(), &[1, 784]);
    assert_eq!(t.data()[0], 0.0);
    assert_eq!(t.data()[255], 1.0);
    for (&p, &v) in pixels.iter().zip(t.data()) {
        assert_eq!((v * 255.0).round() as u8, p);
    }
    assert!(normalize(&[0u8; 784], 1).unwrap().data().iter().all(|&v| v == 0.0));
    let mono = normalize(&(0..=255).map(|v| v as u8).chain([0u8; 528]).collect::<Vec<_>>(), 1).unwrap();
    assert!(mono.data()[..256].windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn batches_cover_each_sample_once() {
    let ds = fixture(Split::Train);
    let mut seen = Vec::new();
    let mut sizes = Vec::new();
    let mut it = batches(&ds, 10, 3).unwrap();
    while let Some(idx) = it.next_indices() {
        sizes.push(idx.len());
        seen.extend_from_slice(idx);
    }
    assert_eq!(sizes, vec![10, 10, 10, 10, 10, 10, 4]);
    seen.sort_unstable();
    assert_eq!(seen, (0..64).collect::<Vec<_>>());

    let order = |seed| batches(&ds, 10, seed).unwrap().order().to_vec();
    assert_eq!(order(3), order(3));
    assert_ne!(order(3), order(4));

    let whole: Vec<_> = batches(&ds, 64, 1).unwrap().collect();
    assert_eq!(whole.len(), 1);
    let (x, y) = &whole[0];
    assert_eq!(x.shape(), &[64, 784]);
    assert_eq!(y.iter().copied().collect::<BTreeSet<_>>().len(), 10);
    assert!(batches(&ds, 0, 1).is_err());
}

#[test]
fn batch_rows_match_dataset_rows() {
    let ds = fixture(Split::Test);
    let mut it = batches(&ds, 8, 5).unwrap();
    let order = it.order().to_vec();
    let (x, y) = it.next().unwrap();
    for (row, &i) in order[..8].iter().enumerate() {
        assert_eq!(x.row(row), ds.images.row(i));
        assert_eq!(y[row], ds.labels[i]);
    }
}

#[test]
fn full_mnist_counts_when_present() {
    let Some(dir) = full_mnist_dir() else {
        eprintln!("full MNIST not found; skipping count check");
        return;
    };
    let train = Dataset::load(&dir, Split::Train).unwrap();
    let test = Dataset::load(&dir, Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (60_000, 10_000));
    assert!(train.label_histogram().iter().all(|&c| c > 5000));
    assert_eq!(test.label_histogram().iter().sum::<usize>(), 10_000);
    assert!(mnist::is_available(&dir));
}

#[test]
fn fetch_reads_a_file_mirror() {
    let src = tempfile::tempdir().unwrap();
    for name in [mnist::TRAIN_IMAGES, mnist::TRAIN_LABELS, mnist::TEST_IMAGES, mnist::TEST_LABELS] {
        let plain = fixture_dir().join(name);
        let gz = fixture_dir().join(format!("{name}.gz"));
        let target = src.path().join(format!("{name}.gz"));
        if gz.exists() {
            std::fs::copy(gz, target).unwrap();
        } else {
            use std::io::Write;
            let mut enc = flate2::write::GzEncoder::new(std::fs::File::create(target).unwrap(), flate2::Compression::fast());
            enc.write_all(&std::fs::read(plain).unwrap()).unwrap();
            enc.finish().unwrap();
        }
    }
    let dst = tempfile::tempdir().unwrap();
    let mirror = format!("file://{}", src.path().display());
    mnist::fetch(dst.path(), &mirror).unwrap();
    assert!(mnist::is_available(dst.path()));
    assert_eq!(Dataset::load(dst.path(), Split::Train).unwrap().labels, fixture(Split::Train).labels);
}
