//! Feature datasets: the synthetic cluster generator, the `MLHF` feature file,
//! and stratified query/train/database splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::format::{write_atomic, ByteReader, ByteWriter, FormatError};
use crate::rng;

pub const FEATURES_MAGIC: &[u8; 4] = b"MLHF";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Multi-hot `n×c` label matrix, one bit per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    n: usize,
    classes: usize,
    words: usize,
    bits: Vec<u64>,
}

impl LabelMatrix {
    pub fn empty(n: usize, classes: usize) -> Self {
        let words = classes.div_ceil(64).max(1);
        LabelMatrix {
            n,
            classes,
            words,
            bits: vec![0; n * words],
        }
    }

    /// One label per row.
    pub fn single(labels: &[usize], classes: usize) -> Result<Self, DataError> {
        let mut m = Self::empty(labels.len(), classes);
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(DataError::Invalid(format!(
                    "label {l} >= {classes} classes"
                )));
            }
            m.set(i, l);
        }
        Ok(m)
    }

    pub fn set(&mut self, row: usize, class: usize) {
        self.bits[row * self.words + class / 64] |= 1 << (class % 64);
    }

    pub fn get(&self, row: usize, class: usize) -> bool {
        self.bits[row * self.words + class / 64] >> (class % 64) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn row_words(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    /// `y_iᵀ y_j > 0` across two matrices with the same class count.
    pub fn shares_label(&self, i: usize, other: &LabelMatrix, j: usize) -> bool {
        self.row_words(i)
            .iter()
            .zip(other.row_words(j))
            .any(|(a, b)| a & b != 0)
    }

    pub fn row_classes(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.classes).filter(move |&c| self.get(i, c))
    }

    /// Lowest set class of a row.
    pub fn primary(&self, i: usize) -> Option<usize> {
        self.row_classes(i).next()
    }

    /// Dense `n×c` 0/1 matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(
            self.n,
            self.classes,
            |r, c| if self.get(r, c) { 1.0 } else { 0.0 },
        )
    }

    pub fn subset(&self, ids: &[usize]) -> LabelMatrix {
        let mut m = Self::empty(ids.len(), self.classes);
        for (k, &i) in ids.iter().enumerate() {
            m.bits[k * m.words..(k + 1) * m.words].copy_from_slice(self.row_words(i));
        }
        m
    }

    /// First row without any label, if any.
    pub fn first_unlabeled(&self) -> Option<usize> {
        (0..self.n).find(|&i| self.row_words(i).iter().all(|&w| w == 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Query,
    Database,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub features: Tensor,
    pub labels: LabelMatrix,
    pub splits: Vec<Split>,
}

impl FeatureDataset {
    /// All rows start tagged [`Split::Train`].
    pub fn new(features: Tensor, labels: LabelMatrix) -> Result<Self, DataError> {
        if features.rows() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature rows but {} label rows",
                features.rows(),
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        if let Some(i) = labels.first_unlabeled() {
            return Err(DataError::Invalid(format!("row {i} has no label")));
        }
        let n = features.rows();
        Ok(FeatureDataset {
            features,
            labels,
            splits: vec![Split::Train; n],
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.labels.classes()
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Rows `ids`, all tagged [`Split::Train`].
    pub fn subset(&self, ids: &[usize]) -> FeatureDataset {
        let f = Tensor::from_fn(ids.len(), self.feature_dim(), |r, c| {
            self.features.get(ids[r], c)
        });
        FeatureDataset {
            features: f,
            labels: self.labels.subset(ids),
            splits: vec![Split::Train; ids.len()],
        }
    }

    pub fn part(&self, split: Split) -> FeatureDataset {
        self.subset(&self.ids(split))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let (n, fd, c) = (self.len(), self.feature_dim(), self.classes());
        let mut w = ByteWriter::new(FEATURES_MAGIC);
        w.dim(n)?;
        w.dim(fd)?;
        w.dim(c)?;
        for &v in self.features.data() {
            w.f64(v);
        }
        let bytes_per_row = c.div_ceil(8);
        let mut row = vec![0u8; bytes_per_row];
        for i in 0..n {
            row.iter_mut().for_each(|b| *b = 0);
            for cls in self.labels.row_classes(i) {
                row[cls / 8] |= 1 << (cls % 8);
            }
            w.bytes(&row);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = ByteReader::open(bytes, FEATURES_MAGIC, "features")?;
        let n = r.u32()? as usize;
        let fd = r.u32()? as usize;
        let c = r.u32()? as usize;
        r.checked_payload(&[n, fd], 8)?;
        let feat_at = r.offset();
        let mut data = Vec::with_capacity(n * fd);
        for _ in 0..n * fd {
            data.push(r.f64()?);
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::InvalidValue {
                offset: feat_at + 8 * k,
                detail: "non-finite feature".into(),
            }
            .into());
        }
        let bytes_per_row = c.div_ceil(8);
        r.checked_payload(&[n, bytes_per_row], 1)?;
        let mut labels = LabelMatrix::empty(n, c);
        for i in 0..n {
            let at = r.offset();
            let row = r.bytes(bytes_per_row)?;
            for cls in 0..c {
                if row[cls / 8] >> (cls % 8) & 1 == 1 {
                    labels.set(i, cls);
                }
            }
            if labels.row_classes(i).next().is_none() {
                return Err(FormatError::InvalidValue {
                    offset: at,
                    detail: format!("row {i} has no label"),
                }
                .into());
            }
            // pad bits past c must be clear
            if !c.is_multiple_of(8) && row[bytes_per_row - 1] >> (c % 8) != 0 {
                return Err(FormatError::InvalidValue {
                    offset: at + bytes_per_row - 1,
                    detail: "label bits beyond class count".into(),
                }
                .into());
            }
        }
        r.finish()?;
        let features = Tensor::from_vec(n, fd, data).expect("length checked");
        FeatureDataset::new(features, labels)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        write_atomic(path, &self.to_bytes()?).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(FormatError::from)?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
    /// Fraction of samples that also carry a second, different class.
    pub multi_label_fraction: f64,
}

impl SynthConfig {
    pub fn new(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Self {
        SynthConfig {
            classes,
            per_class,
            dim,
            spread,
            seed,
            multi_label_fraction: 0.0,
        }
    }
}

/// Class means on the unit sphere; depends only on `(classes, dim, seed)`.
pub fn cluster_means(classes: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, "synth-means");
    let mut means = Tensor::zeros(classes, dim);
    for c in 0..classes {
        let row = means.row_mut(c);
        loop {
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                row.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
    }
    means
}

/// Gaussian clusters around unit-sphere means, emitted class by class.
/// Multi-label samples sit at the midpoint of their two class means.
pub fn synth_clusters(cfg: &SynthConfig) -> Result<FeatureDataset, DataError> {
    if !(cfg.spread >= 0.0 && cfg.spread.is_finite()) {
        return Err(DataError::Invalid(format!(
            "spread {} must be >= 0",
            cfg.spread
        )));
    }
    if cfg.classes == 0 || cfg.dim == 0 {
        return Err(DataError::Invalid(
            "classes and dim must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.multi_label_fraction)
        || (cfg.multi_label_fraction > 0.0 && cfg.classes < 2)
    {
        return Err(DataError::Invalid("bad multi_label_fraction".into()));
    }
    let means = cluster_means(cfg.classes, cfg.dim, cfg.seed);
    let n = cfg.classes * cfg.per_class;
    let mut rng = rng::stream(cfg.seed, "synth-samples");
    let mut features = Tensor::zeros(n, cfg.dim);
    let mut labels = LabelMatrix::empty(n, cfg.classes);
    for i in 0..n {
        let c = i / cfg.per_class;
        labels.set(i, c);
        let second = (cfg.multi_label_fraction > 0.0
            && rng.random::<f64>() < cfg.multi_label_fraction)
            .then(|| (c + 1 + rng.random_range(0..cfg.classes - 1)) % cfg.classes);
        if let Some(s) = second {
            labels.set(i, s);
        }
        let row = features.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            let center = match second {
                Some(s) => 0.5 * (means.get(c, j) + means.get(s, j)),
                None => means.get(c, j),
            };
            let noise: f64 = rng.sample(StandardNormal);
            *v = center + cfg.spread * noise;
        }
    }
    FeatureDataset::new(features, labels)
}

/// Stratified split by primary label: classes are visited round-robin, taking
/// the next (shuffled) member of each, first for the query set and then for
/// the training set. Everything left over becomes the database.
pub fn split(
    data: &FeatureDataset,
    n_query: usize,
    n_train: usize,
    seed: u64,
) -> Result<FeatureDataset, DataError> {
    let n = data.len();
    if n_query + n_train > n {
        return Err(DataError::Invalid(format!(
            "query {n_query} + train {n_train} exceeds {n} samples"
        )));
    }
    let mut rng = rng::stream(seed, "split");
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); data.classes()];
    for i in 0..n {
        groups[data
            .labels
            .primary(i)
            .expect("validated: every row labeled")]
        .push(i);
    }
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; groups.len()];
    let mut out = data.clone();
    out.splits.iter_mut().for_each(|s| *s = Split::Database);
    for (tag, count) in [(Split::Query, n_query), (Split::Train, n_train)] {
        let mut taken = 0;
        let mut c = 0;
        while taken < count {
            if cursor[c] < groups[c].len() {
                out.splits[groups[c][cursor[c]]] = tag;
                cursor[c] += 1;
                taken += 1;
            }
            c = (c + 1) % groups.len();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_collapses_classes() {
        let d = synth_clusters(&SynthConfig::new(3, 4, 5, 0.0, 1)).unwrap();
        for i in 0..12 {
            assert_eq!(d.features.row(i), d.features.row(i - i % 4));
        }
    }

    #[test]
    fn means_ignore_sample_count() {
        let a = synth_clusters(&SynthConfig::new(4, 3, 6, 0.0, 9)).unwrap();
        let b = synth_clusters(&SynthConfig::new(4, 10, 6, 0.0, 9)).unwrap();
        for c in 0..4 {
            assert_eq!(a.features.row(c * 3), b.features.row(c * 10));
        }
        let m = cluster_means(4, 6, 9);
        for c in 0..4 {
            let n: f64 = m.row(c).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_label_rows() {
        let cfg = SynthConfig {
            multi_label_fraction: 0.5,
            ..SynthConfig::new(4, 50, 8, 0.1, 2)
        };
        let d = synth_clusters(&cfg).unwrap();
        let multi = (0..d.len())
            .filter(|&i| d.labels.row_classes(i).count() == 2)
            .count();
        assert!(multi > 60 && multi < 140, "{multi}");
        assert!((0..d.len()).all(|i| d.labels.get(i, i / 50)));
    }

    #[test]
    fn split_partitions_and_stratifies() {
        let d = synth_clusters(&SynthConfig::new(5, 20, 3, 0.1, 0)).unwrap();
        let s = split(&d, 13, 40, 7).unwrap();
        let q = s.ids(Split::Query);
        let t = s.ids(Split::Train);
        let db = s.ids(Split::Database);
        assert_eq!((q.len(), t.len(), db.len()), (13, 40, 47));
        let mut per_class = [0usize; 5];
        for &i in &q {
            per_class[s.labels.primary(i).unwrap()] += 1;
        }
        assert!(per_class.iter().max().unwrap() - per_class.iter().min().unwrap() <= 1);
        assert_eq!(split(&d, 13, 40, 7).unwrap().splits, s.splits);
        assert!(split(&d, 0, 0, 7).unwrap().ids(Split::Query).is_empty());
        assert!(split(&d, 60, 41, 7).is_err());
    }

    #[test]
    fn file_round_trip_and_errors() {
        let cfg = SynthConfig {
            multi_label_fraction: 0.3,
            ..SynthConfig::new(11, 3, 4, 0.2, 5)
        };
        let d = synth_clusters(&cfg).unwrap();
        let bytes = d.to_bytes().unwrap();
        assert_eq!(bytes.len(), 8 + 12 + 33 * 4 * 8 + 33 * 2);
        assert_eq!(FeatureDataset::from_bytes(&bytes).unwrap(), d);

        let cut = &bytes[..bytes.len() - 5];
        let err = FeatureDataset::from_bytes(cut).unwrap_err();
        assert!(err.to_string().contains("truncated at offset"), "{err}");

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"JUNK");
        let err = FeatureDataset::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("unrecognized format"), "{err}");

        let mut huge = bytes;
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        let err = FeatureDataset::from_bytes(&huge).unwrap_err();
        assert!(
            matches!(
                err,
                DataError::Format(
                    FormatError::Truncated { .. } | FormatError::DimensionOverflow { .. }
                )
            ),
            "{err}"
        );
    }

    #[test]
    fn rejects_unlabeled_rows() {
        let labels = LabelMatrix::empty(2, 3);
        assert!(FeatureDataset::new(Tensor::zeros(2, 2), labels).is_err());
    }
}
