use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{arg, data, Result};
use crate::imaging::{flip_horizontal, GrayImage};
use crate::GRADES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratify: bool,
}

impl SplitSpec {
    pub fn new(ratios: [f64; 3], seed: u64, stratify: bool) -> Result<Self> {
        let s = Self { ratios, seed, stratify };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(arg(format!("split ratios must be non-negative, got {:?}", self.ratios)));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(arg(format!("split ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier part.
fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = (e + 1e-9).floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).filter(|&i| ratios[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Index partition of items with the given grades: seeded shuffle, optionally
/// per grade. Each part is returned in ascending index order.
pub fn split_indices(grades: &[u8], spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    spec.validate()?;
    if let Some(g) = grades.iter().find(|&&g| g as usize >= GRADES) {
        return Err(arg(format!("grade {g} outside 0..=4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratify {
        (0..GRADES as u8)
            .map(|g| (0..grades.len()).filter(|&i| grades[i] == g).collect())
            .collect()
    } else {
        vec![(0..grades.len()).collect()]
    };
    let mut parts: [Vec<usize>; 3] = Default::default();
    for mut group in groups {
        group.shuffle(&mut rng);
        let sizes = apportion(group.len(), &spec.ratios);
        let mut rest = group.as_slice();
        for (part, size) in parts.iter_mut().zip(sizes) {
            let (take, tail) = rest.split_at(size);
            part.extend_from_slice(take);
            rest = tail;
        }
    }
    for (i, part) in parts.iter_mut().enumerate() {
        if spec.ratios[i] > 0.0 && part.is_empty() {
            return Err(data(format!(
                "{} items cannot fill a non-empty {} split at ratios {:?}",
                grades.len(),
                Partition::ALL[i],
                spec.ratios
            )));
        }
        part.sort_unstable();
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

impl DatasetSplit {
    pub fn part(&self, p: Partition) -> &DatasetManifest {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    /// `image_id,partition` rows in manifest order of each part.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,partition\n");
        for p in Partition::ALL {
            for r in &self.part(p).records {
                s.push_str(&format!("{},{p}\n", r.image_id));
            }
        }
        s
    }
}

pub fn split_dataset(m: &DatasetManifest, s: &SplitSpec) -> Result<DatasetSplit> {
    let [train, val, test] = split_indices(&m.grades(), s)?;
    let take = |idx: Vec<usize>| DatasetManifest {
        records: idx.into_iter().map(|i| m.records[i].clone()).collect(),
    };
    Ok(DatasetSplit {
        train: take(train),
        val: take(val),
        test: take(test),
    })
}

/// A graded knee-joint crop.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    /// `<image id>_<side>`, with `_flip` appended for mirrored twins.
    pub id: String,
    pub image: GrayImage,
    pub grade: u8,
}

/// Appends a horizontally mirrored twin after every sample. Only the training
/// partition may be augmented.
pub fn augment_flips(samples: &[JointSample], role: Partition) -> Result<Vec<JointSample>> {
    if role != Partition::Train {
        return Err(arg(format!(
            "flip augmentation applies to the train split only, not {role}"
        )));
    }
    let mut out = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        out.push(s.clone());
        out.push(JointSample {
            id: format!("{}_flip", s.id),
            image: flip_horizontal(&s.image),
            grade: s.grade,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(100, &[0.6, 0.1, 0.3]), [60, 10, 30]);
        assert_eq!(apportion(10, &[0.6, 0.1, 0.3]), [6, 1, 3]);
        assert_eq!(apportion(7, &[0.7, 0.0, 0.3]), [5, 0, 2]);
        assert_eq!(apportion(3, &[0.5, 0.0, 0.5]), [2, 0, 1]);
    }

    #[test]
    fn stratified_counts() {
        let grades: Vec<u8> = (0..50).map(|i| (i % 5) as u8).collect();
        let spec = SplitSpec::new([0.6, 0.1, 0.3], 3, true).unwrap();
        let parts = split_indices(&grades, &spec).unwrap();
        for g in 0..5u8 {
            let per: Vec<usize> = parts
                .iter()
                .map(|p| p.iter().filter(|&&i| grades[i] == g).count())
                .collect();
            assert_eq!(per, vec![6, 1, 3]);
        }
    }

    #[test]
    fn tiny_data_is_infeasible() {
        let spec = SplitSpec::new([0.6, 0.1, 0.3], 0, false).unwrap();
        assert!(split_indices(&[0, 1], &spec).is_err());
        assert!(SplitSpec::new([0.6, 0.1, 0.2], 0, false).is_err());
    }
}
