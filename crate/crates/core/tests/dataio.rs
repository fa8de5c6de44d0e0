use mlh_core::dataio::{
    cluster_means, split, synth_clusters, DataError, FeatureDataset, LabelMatrix, Split,
    SynthConfig,
};
use mlh_core::diff::Tensor;
use mlh_core::format::FormatError;

#[test]
fn clusters_are_nearest_mean_separable() {
    let cfg = SynthConfig::new(10, 100, 32, 0.1, 5);
    let data = synth_clusters(&cfg).unwrap();
    let means = cluster_means(10, 32, 5);
    let mut correct = 0;
    for i in 0..data.len() {
        let x = data.features.row(i);
        let best = (0..10)
            .map(|c| {
                let d: f64 = x
                    .iter()
                    .zip(means.row(c))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                (d, c)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1;
        correct += (Some(best) == data.labels.primary(i)) as usize;
    }
    let acc = correct as f64 / data.len() as f64;
    assert!(acc >= 0.99, "{acc}");
    for c in 0..10 {
        let n: f64 = means.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn generator_is_deterministic_and_means_ignore_counts() {
    let a = synth_clusters(&SynthConfig::new(4, 30, 8, 0.2, 9)).unwrap();
    let b = synth_clusters(&SynthConfig::new(4, 30, 8, 0.2, 9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(cluster_means(4, 8, 9), cluster_means(4, 8, 9));
    let small = synth_clusters(&SynthConfig::new(4, 1, 8, 0.0, 9)).unwrap();
    let big = synth_clusters(&SynthConfig::new(4, 50, 8, 0.0, 9)).unwrap();
    for c in 0..4 {
        assert_eq!(small.features.row(c), big.features.row(c * 50));
    }
    let zero = synth_clusters(&SynthConfig::new(3, 5, 4, 0.0, 1)).unwrap();
    for i in 0..15 {
        assert_eq!(zero.features.row(i), zero.features.row(i - i % 5));
    }
}

#[test]
fn multi_label_mode_adds_a_second_class() {
    let mut cfg = SynthConfig::new(5, 40, 8, 0.1, 2);
    cfg.multi_label_fraction = 0.5;
    let data = synth_clusters(&cfg).unwrap();
    let multi = (0..data.len())
        .filter(|&i| data.labels.row_classes(i).count() == 2)
        .count();
    assert!(multi > 60 && multi < 140, "{multi}");
    assert!((0..data.len()).all(|i| data.labels.row_classes(i).count() >= 1));
}

#[test]
fn split_is_disjoint_exhaustive_stratified_and_deterministic() {
    let data = synth_clusters(&SynthConfig::new(10, 75, 4, 0.1, 0)).unwrap();
    let s = split(&data, 50, 200, 0).unwrap();
    let (q, t, d) = (
        s.ids(Split::Query),
        s.ids(Split::Train),
        s.ids(Split::Database),
    );
    assert_eq!((q.len(), t.len(), d.len()), (50, 200, 500));
    let mut all: Vec<usize> = q.iter().chain(&t).chain(&d).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..750).collect::<Vec<_>>());
    for ids in [&q, &t] {
        let mut per = [0usize; 10];
        for &i in ids {
            per[s.labels.primary(i).unwrap()] += 1;
        }
        assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
    }
    assert_eq!(split(&data, 50, 200, 0).unwrap(), s);
    assert_ne!(split(&data, 50, 200, 1).unwrap(), s);

    let none = split(&data, 0, 10, 0).unwrap();
    assert!(none.ids(Split::Query).is_empty());
    assert!(matches!(
        split(&data, 700, 100, 0),
        Err(DataError::Invalid(_))
    ));
}

#[test]
fn file_round_trip_is_bit_exact() {
    let mut cfg = SynthConfig::new(11, 7, 5, 0.3, 4);
    cfg.multi_label_fraction = 0.3;
    let data = split(&synth_clusters(&cfg).unwrap(), 10, 20, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mlhf");
    data.save(&path).unwrap();
    let back = FeatureDataset::load(&path).unwrap();
    assert_eq!(back.features, data.features);
    assert_eq!(back.labels, data.labels);
    for i in 0..data.len() {
        for j in 0..5 {
            assert_eq!(
                back.features.get(i, j).to_bits(),
                data.features.get(i, j).to_bits()
            );
        }
    }
}

#[test]
fn malformed_files_report_offsets() {
    let data = synth_clusters(&SynthConfig::new(2, 3, 2, 0.1, 0)).unwrap();
    let bytes = data.to_bytes().unwrap();

    let err = FeatureDataset::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
    assert!(matches!(
        err,
        DataError::Format(FormatError::Truncated { .. })
    ));
    assert!(err.to_string().contains("truncated at offset"));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = FeatureDataset::from_bytes(&bad).unwrap_err();
    assert!(err.to_string().contains("unrecognized format"));

    // n = u32::MAX with a tiny payload
    let mut huge = bytes.clone();
    huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
    let err = FeatureDataset::from_bytes(&huge).unwrap_err();
    assert!(matches!(
        err,
        DataError::Format(FormatError::DimensionOverflow { .. } | FormatError::Truncated { .. })
    ));
}

#[test]
fn rejects_bad_inputs() {
    let feats = Tensor::from_rows(&[&[1.0, f64::NAN]]);
    assert!(FeatureDataset::new(feats, LabelMatrix::single(&[0], 2).unwrap()).is_err());
    let feats = Tensor::from_rows(&[&[1.0, 2.0]]);
    assert!(FeatureDataset::new(feats, LabelMatrix::empty(1, 2)).is_err());
    assert!(synth_clusters(&SynthConfig::new(2, 3, 2, -1.0, 0)).is_err());
}
