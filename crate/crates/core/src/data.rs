//! Datasets, synthetic mixtures, and the two semi-supervised split protocols.
//!
//! Items are identified by their row position in the dataset.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::error::{GpqError, Result};
use crate::numerics::{dot, l2_normalize_in_place};

pub const DATASET_MAGIC: &[u8; 4] = b"GPQD";
pub const DATASET_VERSION: u16 = 1;

/// Raw input vectors with multi-label annotations.
///
/// Feature values are kept at `f32` precision so that the binary format
/// round-trips exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub features: Vec<Vec<f64>>,
    /// Sorted concept indices per item.
    pub labels: Vec<Vec<u32>>,
    /// Optional external names (from CSV ingestion).
    pub names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(dim: usize, num_classes: usize, features: Vec<Vec<f64>>, labels: Vec<Vec<u32>>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(GpqError::ShapeMismatch(format!(
                "{} feature rows but {} label rows",
                features.len(),
                labels.len()
            )));
        }
        if let Some(row) = features.iter().position(|f| f.len() != dim) {
            return Err(GpqError::ShapeMismatch(format!(
                "row {row} has {} values, expected {dim}",
                features[row].len()
            )));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GpqError::NonFinite("dataset features".into()));
        }
        let mut labels = labels;
        for l in labels.iter_mut() {
            l.sort_unstable();
            l.dedup();
            if let Some(&bad) = l.iter().find(|&&c| c as usize >= num_classes) {
                return Err(GpqError::IndexOutOfRange {
                    index: bad as usize,
                    limit: num_classes,
                });
            }
        }
        let features = features
            .into_iter()
            .map(|r| r.into_iter().map(|v| v as f32 as f64).collect())
            .collect();
        Ok(Self {
            dim,
            num_classes,
            features,
            labels,
            names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Primary (lowest) concept of each item, used to group items by class.
    pub fn primary_class(&self, i: usize) -> Option<u32> {
        self.labels[i].first().copied()
    }

    /// Multi-hot label row of length `num_classes`.
    pub fn label_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_classes];
        for &c in &self.labels[i] {
            row[c as usize] = 1.0;
        }
        row
    }

    pub fn rows(&self, ids: &[u64]) -> Result<Vec<Vec<f64>>> {
        ids.iter()
            .map(|&id| {
                self.features
                    .get(id as usize)
                    .cloned()
                    .ok_or(GpqError::UnknownId(id))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let label_bytes = self.num_classes.div_ceil(8);
        let mut buf = Vec::with_capacity(22 + self.len() * (4 * self.dim + label_bytes));
        buf.extend_from_slice(DATASET_MAGIC);
        binio::put_u16(&mut buf, DATASET_VERSION);
        binio::put_u64(&mut buf, self.len() as u64);
        binio::put_u32(&mut buf, binio::dim_u32(self.dim, "dim")?);
        binio::put_u32(&mut buf, binio::dim_u32(self.num_classes, "N_c")?);
        for row in &self.features {
            binio::put_f64_as_f32(&mut buf, row);
        }
        for l in &self.labels {
            let mut bitmap = vec![0u8; label_bytes];
            for &c in l {
                bitmap[c as usize / 8] |= 1 << (c % 8);
            }
            buf.extend_from_slice(&bitmap);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let n = usize::try_from(r.u64()?).map_err(|_| GpqError::Parse("item count overflow".into()))?;
        let dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let body = n
            .checked_mul(dim)
            .ok_or_else(|| GpqError::Parse("feature section overflow".into()))?;
        if body.saturating_mul(4) > r.remaining() {
            return Err(GpqError::Truncated {
                offset: (r.offset() + r.remaining()) as u64,
            });
        }
        let mut features = Vec::with_capacity(n);
        for _ in 0..n {
            features.push(r.f32_vec(dim)?);
        }
        let label_bytes = num_classes.div_ceil(8);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let bitmap = r.take(label_bytes)?;
            labels.push(
                (0..num_classes as u32)
                    .filter(|&c| bitmap[c as usize / 8] >> (c % 8) & 1 == 1)
                    .collect(),
            );
        }
        if r.remaining() != 0 {
            return Err(GpqError::Parse(format!("{} trailing bytes", r.remaining())));
        }
        Self::new(dim, num_classes, features, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Reads `id,feature...,labels` rows after a header line. Labels are
    /// semicolon-separated concept indices (possibly empty). The class count
    /// is the largest concept index plus one unless given.
    pub fn from_csv<R: Read>(reader: R, num_classes: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut names = Vec::new();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut dim = None;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| GpqError::Parse(format!("csv row {}: {e}", line + 1)))?;
            if rec.len() < 2 {
                return Err(GpqError::Parse(format!("csv row {} has no feature columns", line + 1)));
            }
            let row_dim = rec.len() - 2;
            if *dim.get_or_insert(row_dim) != row_dim {
                return Err(GpqError::ShapeMismatch(format!(
                    "csv row {} has {row_dim} features, expected {}",
                    line + 1,
                    dim.unwrap()
                )));
            }
            names.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .take(row_dim)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| GpqError::Parse(format!("csv row {}: {e}", line + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            features.push(row);
            let field = rec[rec.len() - 1].trim();
            let l = if field.is_empty() {
                Vec::new()
            } else {
                field
                    .split(';')
                    .map(|c| {
                        c.trim()
                            .parse::<u32>()
                            .map_err(|e| GpqError::Parse(format!("csv row {} labels: {e}", line + 1)))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            labels.push(l);
        }
        let dim = dim.ok_or_else(|| GpqError::EmptyDataset("csv has no rows".into()))?;
        let classes = num_classes.unwrap_or_else(|| {
            labels.iter().flatten().map(|&c| c as usize + 1).max().unwrap_or(0)
        });
        let mut ds = Self::new(dim, classes, features, labels)?;
        ds.names = Some(names);
        Ok(ds)
    }
}

/// Gaussian mixture with unit-norm class means and isotropic noise.
///
/// Items are laid out class by class. Means are redrawn until every pair
/// has cosine similarity below 0.9.
pub fn synth_gaussian_mixture(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || input_dim == 0 {
        return Err(GpqError::InvalidConfig(format!(
            "classes, per-class count and dimension must be positive (got {num_classes}, {per_class}, {input_dim})"
        )));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(GpqError::InvalidConfig(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut attempts = 0usize;
    while means.len() < num_classes {
        attempts += 1;
        if attempts > 10_000 * num_classes {
            return Err(GpqError::InvalidConfig(format!(
                "cannot place {num_classes} separated means in {input_dim} dimensions"
            )));
        }
        let mut v: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if l2_normalize_in_place(&mut v).is_err() {
            continue;
        }
        if means.iter().all(|m| dot(m, &v) < 0.9) {
            means.push(v);
        }
    }
    let noise = Normal::new(0.0, spread.max(f64::MIN_POSITIVE))
        .map_err(|e| GpqError::InvalidConfig(e.to_string()))?;
    let mut features = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let row: Vec<f64> = if spread == 0.0 {
                mean.clone()
            } else {
                mean.iter().map(|m| m + noise.sample(&mut rng)).collect()
            };
            features.push(row);
            labels.push(vec![c as u32]);
        }
    }
    Dataset::new(input_dim, num_classes, features, labels)
}

/// Item ids assigned to each role of a semi-supervised retrieval experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub protocol: u8,
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
    pub database: Vec<u64>,
    pub query: Vec<u64>,
    /// Classes available with labels (protocol 2 only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen_classes: Option<Vec<u32>>,
}

impl ProtocolSplit {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| GpqError::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| GpqError::Parse(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Item positions grouped by primary class, each group shuffled.
fn shuffled_classes(ds: &Dataset, rng: &mut ChaCha8Rng) -> Vec<Vec<u64>> {
    let mut by_class = vec![Vec::new(); ds.num_classes];
    for i in 0..ds.len() {
        if let Some(c) = ds.primary_class(i) {
            by_class[c as usize].push(i as u64);
        }
    }
    for items in by_class.iter_mut() {
        items.shuffle(rng);
    }
    by_class
}

/// Known-category split: per class, `labels_per_class` labeled training
/// items, `query_per_class` queries, and the rest in the database. Database
/// items are also the unlabeled training set.
pub fn split_protocol1(ds: &Dataset, labels_per_class: usize, query_per_class: usize, seed: u64) -> Result<ProtocolSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class = shuffled_classes(ds, &mut rng);
    let mut split = ProtocolSplit {
        protocol: 1,
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        database: Vec::new(),
        query: Vec::new(),
        seen_classes: None,
    };
    for (c, items) in by_class.iter().enumerate() {
        if items.len() < labels_per_class + query_per_class {
            return Err(GpqError::InsufficientItems(format!(
                "class {c} has {} items, needs {}",
                items.len(),
                labels_per_class + query_per_class
            )));
        }
        split.labeled.extend(&items[..labels_per_class]);
        split.query.extend(&items[labels_per_class..labels_per_class + query_per_class]);
        split.database.extend(&items[labels_per_class + query_per_class..]);
    }
    // Unlabeled items (no annotations) can only serve as database entries.
    split
        .database
        .extend((0..ds.len() as u64).filter(|&i| ds.primary_class(i as usize).is_none()));
    split.unlabeled = split.database.clone();
    Ok(split)
}

/// Unseen-category split: 75% of classes (rounded down) are seen. Each
/// class is halved into train/test parts; seen-train is labeled, queries come
/// from unseen-test, and the database is unseen-train plus seen-test.
pub fn split_protocol2(ds: &Dataset, seed: u64) -> Result<ProtocolSplit> {
    if ds.num_classes < 4 {
        return Err(GpqError::InsufficientClasses {
            needed: 4,
            got: ds.num_classes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<u32> = (0..ds.num_classes as u32).collect();
    classes.shuffle(&mut rng);
    let n_seen = ds.num_classes * 3 / 4;
    let mut seen = classes[..n_seen].to_vec();
    seen.sort_unstable();
    let by_class = shuffled_classes(ds, &mut rng);

    let mut split = ProtocolSplit {
        protocol: 2,
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        database: Vec::new(),
        query: Vec::new(),
        seen_classes: Some(seen.clone()),
    };
    let mut train25 = Vec::new();
    let mut test75 = Vec::new();
    for (c, items) in by_class.iter().enumerate() {
        let (train, test) = items.split_at(items.len() / 2);
        if seen.binary_search(&(c as u32)).is_ok() {
            split.labeled.extend(train);
            test75.extend(test);
        } else {
            train25.extend(train);
            split.query.extend(test);
        }
    }
    split.database = [train25, test75].concat();
    split.unlabeled = split.database.clone();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn zero_spread_collapses_to_means() {
        let ds = synth_gaussian_mixture(3, 5, 8, 0.0, 1).unwrap();
        for c in 0..3 {
            let rows = &ds.features[c * 5..(c + 1) * 5];
            assert!(rows.iter().all(|r| r == &rows[0]));
            assert!((dot(&rows[0], &rows[0]).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn means_are_separated_and_deterministic() {
        let ds = synth_gaussian_mixture(10, 2, 96, 0.0, 3).unwrap();
        for a in 0..10 {
            for b in 0..a {
                let s = dot(&ds.features[a * 2], &ds.features[b * 2]);
                assert!(s < 0.9);
            }
        }
        assert_eq!(ds, synth_gaussian_mixture(10, 2, 96, 0.0, 3).unwrap());
        assert_ne!(ds, synth_gaussian_mixture(10, 2, 96, 0.0, 4).unwrap());
        assert!(synth_gaussian_mixture(0, 2, 96, 0.1, 3).is_err());
    }

    #[test]
    fn binary_round_trip_with_multi_labels() {
        let ds = Dataset::new(
            3,
            11,
            vec![vec![0.1, 0.2, 0.3], vec![1.0, -2.0, 3.5]],
            vec![vec![0, 9, 10], vec![]],
        )
        .unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"GPQD");
        assert_eq!(bytes.len(), 4 + 2 + 8 + 4 + 4 + 2 * 12 + 2 * 2);
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 1]),
            Err(GpqError::Truncated { .. })
        ));
    }

    #[test]
    fn csv_ingestion() {
        let text = "id,f0,f1,labels\na,1.0,2.0,0;2\nb,-1,0.5,\n";
        let ds = Dataset::from_csv(text.as_bytes(), None).unwrap();
        assert_eq!((ds.len(), ds.dim, ds.num_classes), (2, 2, 3));
        assert_eq!(ds.labels, vec![vec![0, 2], vec![]]);
        assert_eq!(ds.names.as_deref().unwrap(), ["a", "b"]);
        assert!(Dataset::from_csv("id,f0,labels\na,x,1\n".as_bytes(), None).is_err());
        assert!(Dataset::from_csv("id,f0,f1,labels\na,1,2,0\nb,1,0\n".as_bytes(), None).is_err());
    }

    #[test]
    fn protocol1_counts_and_disjointness() {
        let ds = synth_gaussian_mixture(10, 600, 4, 0.1, 0).unwrap();
        let split = split_protocol1(&ds, 50, 100, 7).unwrap();
        assert_eq!((split.labeled.len(), split.query.len(), split.database.len()), (500, 1000, 4500));
        let q: HashSet<_> = split.query.iter().collect();
        let db: HashSet<_> = split.database.iter().collect();
        let lab: HashSet<_> = split.labeled.iter().collect();
        assert!(q.is_disjoint(&db) && lab.is_disjoint(&db) && lab.is_disjoint(&q));
        assert_eq!(split.unlabeled, split.database);
        assert_eq!(split, split_protocol1(&ds, 50, 100, 7).unwrap());
        // Same proportions as a 5000/1000/54000 split of 60000 items.
        assert_eq!(split.labeled.len() * 10, 5000);
        assert!(matches!(split_protocol1(&ds, 500, 101, 0), Err(GpqError::InsufficientItems(_))));
    }

    #[test]
    fn protocol2_structure() {
        let ds = synth_gaussian_mixture(8, 20, 4, 0.1, 0).unwrap();
        let split = split_protocol2(&ds, 5).unwrap();
        let seen = split.seen_classes.clone().unwrap();
        assert_eq!(seen.len(), 6);
        let class = |id: &u64| ds.primary_class(*id as usize).unwrap();
        let labeled_classes: HashSet<u32> = split.labeled.iter().map(class).collect();
        assert!(split.query.iter().all(|id| !labeled_classes.contains(&class(id))));
        assert_eq!(split.labeled.len(), 6 * 10);
        assert_eq!(split.query.len(), 2 * 10);
        // database = train25 ∪ test75
        let unseen_train = split.database.iter().filter(|id| !seen.contains(&class(id))).count();
        let seen_test = split.database.iter().filter(|id| seen.contains(&class(id))).count();
        assert_eq!((unseen_train, seen_test), (20, 60));
        let q: HashSet<_> = split.query.iter().collect();
        assert!(split.database.iter().all(|id| !q.contains(id)));
        let small = synth_gaussian_mixture(3, 4, 4, 0.1, 0).unwrap();
        assert!(matches!(split_protocol2(&small, 0), Err(GpqError::InsufficientClasses { .. })));
    }

    #[test]
    fn split_json_round_trip() {
        let ds = synth_gaussian_mixture(8, 10, 4, 0.1, 0).unwrap();
        let split = split_protocol2(&ds, 1).unwrap();
        assert_eq!(ProtocolSplit::from_json(&split.to_json().unwrap()).unwrap(), split);
        let p1 = split_protocol1(&ds, 2, 2, 1).unwrap();
        assert_eq!(ProtocolSplit::from_json(&p1.to_json().unwrap()).unwrap(), p1);
    }
}
