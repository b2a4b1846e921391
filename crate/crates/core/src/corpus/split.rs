use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StudyRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Patient-grouped split. Validation and test receive the rounded shares of
/// `ratios`, train takes the remainder; patients are assigned whole, in
/// seeded random order.
pub fn split_dataset(records: &[StudyRecord], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (r_train, r_val, r_test) = ratios;
    if [r_train, r_val, r_test].iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::invalid("split ratios must be positive"));
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split ratios must sum to 1"));
    }
    if records.len() < 3 {
        return Err(Error::Dataset(format!(
            "need at least 3 records to split, got {}",
            records.len()
        )));
    }
    let n = records.len();
    let want_val = (r_val * n as f64).round() as usize;
    let want_test = (r_test * n as f64).round() as usize;

    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.patient_id).or_default().push(&r.study_id);
    }
    let mut patients: Vec<Vec<&str>> = groups.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);

    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for studies in patients {
        let k = studies.len();
        let bucket = if split.test.len() + k <= want_test {
            &mut split.test
        } else if split.val.len() + k <= want_val {
            &mut split.val
        } else {
            &mut split.train
        };
        bucket.extend(studies.into_iter().map(str::to_string));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn records(n: usize, patients: usize) -> Vec<StudyRecord> {
        (0..n)
            .map(|i| StudyRecord {
                study_id: format!("s{i}"),
                patient_id: format!("p{}", i % patients),
                report_text: "x.".into(),
                frontal_path: "f.png".into(),
                lateral_path: "l.png".into(),
            })
            .collect()
    }

    #[test]
    fn rounding_rule() {
        let s = split_dataset(&records(10, 10), (0.7, 0.1, 0.2), 7).unwrap();
        assert_eq!(s.sizes(), (7, 1, 2));
    }

    #[test]
    fn deterministic() {
        let r = records(40, 17);
        assert_eq!(
            split_dataset(&r, (0.7, 0.1, 0.2), 3).unwrap(),
            split_dataset(&r, (0.7, 0.1, 0.2), 3).unwrap()
        );
        assert_ne!(
            split_dataset(&r, (0.7, 0.1, 0.2), 3).unwrap(),
            split_dataset(&r, (0.7, 0.1, 0.2), 4).unwrap()
        );
    }

    #[test]
    fn errors() {
        assert!(split_dataset(&records(2, 2), (0.7, 0.1, 0.2), 0).is_err());
        assert!(split_dataset(&records(9, 9), (0.7, 0.2, 0.2), 0).is_err());
        assert!(split_dataset(&records(9, 9), (0.9, 0.0, 0.1), 0).is_err());
    }

    fn assert_partition(r: &[StudyRecord], s: &DatasetSplit) {
        let all: HashSet<&str> = r.iter().map(|x| x.study_id.as_str()).collect();
        let mut seen = HashSet::new();
        for id in s.train.iter().chain(&s.val).chain(&s.test) {
            assert!(seen.insert(id.as_str()), "{id} in two splits");
        }
        assert_eq!(seen, all);
    }

    #[test]
    fn hundred_singletons_partition() {
        let r = records(100, 100);
        let s = split_dataset(&r, (0.7, 0.1, 0.2), 11).unwrap();
        assert_partition(&r, &s);
        assert_eq!(s.sizes(), (70, 10, 20));
    }

    proptest! {
        #[test]
        fn partition_and_patient_grouping(n in 3usize..80, patients in 1usize..40, seed in any::<u64>()) {
            let r = records(n, patients.min(n));
            let s = split_dataset(&r, (0.7, 0.1, 0.2), seed).unwrap();
            assert_partition(&r, &s);
            let which = |id: &String| if s.train.contains(id) { 0 } else if s.val.contains(id) { 1 } else { 2 };
            let mut home: BTreeMap<&str, i32> = BTreeMap::new();
            for rec in &r {
                let b = which(&rec.study_id);
                prop_assert_eq!(*home.entry(&rec.patient_id).or_insert(b), b);
            }
        }
    }
}
