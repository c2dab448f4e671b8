//! Patient-level stratified train/val/test partitioning and its on-disk
//! form.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::ManifestRecord;
use crate::error::{Error, Result};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::Config(format!("unknown partition `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub map: BTreeMap<String, Partition>,
}

impl SplitAssignment {
    pub fn partition_of(&self, patient: &str) -> Option<Partition> {
        self.map.get(patient).copied()
    }

    pub fn patients(&self, part: Partition) -> impl Iterator<Item = &str> {
        self.map.iter().filter(move |(_, &p)| p == part).map(|(k, _)| k.as_str())
    }

    /// Records belonging to `part`, in input order.
    pub fn select<'a>(&self, records: &'a [ManifestRecord], part: Partition) -> Vec<&'a ManifestRecord> {
        records.iter().filter(|r| self.partition_of(&r.patient_id) == Some(part)).collect()
    }

    /// Every record's patient must be assigned.
    pub fn check_covers(&self, records: &[ManifestRecord]) -> Result<()> {
        match records.iter().find(|r| !self.map.contains_key(&r.patient_id)) {
            Some(r) => Err(Error::Split(format!("patient `{}` is not in the split file", r.patient_id))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let f = self.fractions;
        let mut s = format!("# seed={} fractions={:.2},{:.2},{:.2}\n", self.seed, f[0], f[1], f[2]);
        for (pid, part) in &self.map {
            s.push_str(pid);
            s.push('\t');
            s.push_str(part.name());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let err = |line: usize, msg: String| Error::Parse { line, msg };
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty split file".into()))?;
        let (seed, fractions) =
            parse_header(header).ok_or_else(|| err(1, "expected `# seed=<int> fractions=<f>,<f>,<f>`".into()))?;
        let mut map = BTreeMap::new();
        for (i, line) in lines {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (pid, part) = line.split_once('\t').ok_or_else(|| err(n, "expected `patient_id<TAB>split`".into()))?;
            let part: Partition = part.trim_end().parse().map_err(|_| err(n, format!("unknown split `{part}`")))?;
            if pid.is_empty() {
                return Err(err(n, "empty patient id".into()));
            }
            if map.insert(pid.to_string(), part).is_some() {
                return Err(err(n, format!("duplicate patient `{pid}`")));
            }
        }
        Ok(SplitAssignment { seed, fractions, map })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn parse_header(line: &str) -> Option<(u64, [f64; 3])> {
    let rest = line.strip_prefix('#')?.trim();
    let mut seed = None;
    let mut fractions = None;
    for field in rest.split_whitespace() {
        if let Some(v) = field.strip_prefix("seed=") {
            seed = v.parse().ok();
        } else if let Some(v) = field.strip_prefix("fractions=") {
            let parts: Vec<f64> = v.split(',').map(str::parse).collect::<Result<_, _>>().ok()?;
            fractions = <[f64; 3]>::try_from(parts).ok();
        }
    }
    Some((seed?, fractions?))
}

/// Majority label per patient (ties go to the positive class), with record
/// counts. Patients come back sorted by id.
pub fn patient_labels(records: &[ManifestRecord]) -> BTreeMap<String, (u8, usize)> {
    let mut votes: BTreeMap<String, [usize; 2]> = BTreeMap::new();
    for r in records {
        votes.entry(r.patient_id.clone()).or_default()[usize::from(r.label.min(1))] += 1;
    }
    votes.into_iter().map(|(pid, [neg, pos])| (pid, (u8::from(pos >= neg), neg + pos))).collect()
}

/// Greedy patient-level stratified split.
///
/// Patients are shuffled with `seed`, then each goes to the partition with
/// the largest remaining deficit `fraction × class_total − assigned` for its
/// majority class, counted in patients. Ties resolve to train, then val,
/// then test.
pub fn stratified_split(records: &[ManifestRecord], fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let labels = patient_labels(records);
    if labels.len() < fractions.len() {
        return Err(Error::Split(format!("{} patients cannot fill {} partitions", labels.len(), fractions.len())));
    }
    let mut patients: Vec<(&String, u8)> = labels.iter().map(|(p, (l, _))| (p, *l)).collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut class_total = [0usize; 2];
    for (_, l) in &patients {
        class_total[*l as usize] += 1;
    }
    let mut assigned = [[0usize; 3]; 2];
    let mut map = BTreeMap::new();
    for (pid, label) in patients {
        let c = label as usize;
        let deficit = |s: usize| fractions[s] * class_total[c] as f64 - assigned[c][s] as f64;
        let mut best = 0;
        for s in 1..3 {
            if deficit(s) > deficit(best) {
                best = s;
            }
        }
        assigned[c][best] += 1;
        map.insert(pid.clone(), Partition::ALL[best]);
    }
    Ok(SplitAssignment { seed, fractions, map })
}

/// Per-class patient fractions `[class][partition]`.
pub fn class_fractions(split: &SplitAssignment, records: &[ManifestRecord]) -> [[f64; 3]; 2] {
    let labels = patient_labels(records);
    let mut counts = [[0usize; 3]; 2];
    for (pid, (label, _)) in &labels {
        if let Some(p) = split.partition_of(pid) {
            counts[*label as usize][p.index()] += 1;
        }
    }
    counts.map(|row| {
        let total: usize = row.iter().sum();
        row.map(|n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn rec(pid: &str, label: u8) -> ManifestRecord {
        ManifestRecord {
            patient_id: pid.into(),
            abnormality_id: format!("{pid}_a"),
            image_path: PathBuf::from(format!("{pid}.png")),
            pathology: if label == 1 { "MALIGNANT" } else { "BENIGN" }.into(),
            label,
        }
    }

    fn counts(split: &SplitAssignment) -> [usize; 3] {
        Partition::ALL.map(|p| split.patients(p).count())
    }

    /// Hand trace of the greedy rule on 5 patients per class with deficits
    /// (3.5, 0.75, 0.75): train, train, train, val, test.
    #[test]
    fn ten_balanced_patients_split_six_two_two() {
        let records: Vec<_> = (0..10).map(|i| rec(&format!("P{i}"), (i % 2) as u8)).collect();
        let split = stratified_split(&records, DEFAULT_FRACTIONS, 0).unwrap();
        assert_eq!(counts(&split), [6, 2, 2]);
        let train_labels: Vec<u8> = split.select(&records, Partition::Train).iter().map(|r| r.label).collect();
        assert!(train_labels.contains(&0) && train_labels.contains(&1));
    }

    #[test]
    fn multi_roi_patient_stays_together() {
        let mut records: Vec<_> = (0..5).map(|_| rec("big", 1)).collect();
        records.extend((0..6).map(|i| rec(&format!("s{i}"), (i % 2) as u8)));
        let split = stratified_split(&records, DEFAULT_FRACTIONS, 9).unwrap();
        let part = split.partition_of("big").unwrap();
        let together = split.select(&records, part).iter().filter(|r| r.patient_id == "big").count();
        assert_eq!(together, 5);
    }

    #[test]
    fn too_few_patients_is_an_error() {
        let records = vec![rec("a", 0), rec("b", 1), rec("b", 1)];
        assert!(matches!(stratified_split(&records, DEFAULT_FRACTIONS, 0), Err(Error::Split(_))));
    }

    #[test]
    fn majority_label_breaks_ties_positive() {
        let records = vec![rec("p", 0), rec("p", 1), rec("q", 0), rec("q", 0), rec("q", 1)];
        let labels = patient_labels(&records);
        assert_eq!(labels["p"], (1, 2));
        assert_eq!(labels["q"], (0, 3));
    }

    #[test]
    fn same_seed_same_split() {
        let records: Vec<_> = (0..40).map(|i| rec(&format!("P{i:02}"), (i % 3 == 0) as u8)).collect();
        let a = stratified_split(&records, DEFAULT_FRACTIONS, 5).unwrap();
        let b = stratified_split(&records, DEFAULT_FRACTIONS, 5).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn split_file_round_trip() {
        let records: Vec<_> = (0..12).map(|i| rec(&format!("P{i}"), (i % 2) as u8)).collect();
        let split = stratified_split(&records, DEFAULT_FRACTIONS, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.tsv");
        split.save(&path).unwrap();
        assert_eq!(SplitAssignment::load(&path).unwrap(), split);
    }

    #[test]
    fn hand_written_file_parses() {
        let text = "# seed=42 fractions=0.70,0.15,0.15\nP1\ttrain\nP2\tval\nP3\ttest\n";
        let split = SplitAssignment::parse(text).unwrap();
        assert_eq!(split.seed, 42);
        assert_eq!(split.fractions, [0.70, 0.15, 0.15]);
        let want: BTreeMap<String, Partition> = [
            ("P1".to_string(), Partition::Train),
            ("P2".to_string(), Partition::Val),
            ("P3".to_string(), Partition::Test),
        ]
        .into();
        assert_eq!(split.map, want);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dup = "# seed=1 fractions=0.70,0.15,0.15\nP1\ttrain\nP1\tval\n";
        assert!(matches!(SplitAssignment::parse(dup), Err(Error::Parse { line: 3, .. })));
        let bad = "# seed=1 fractions=0.70,0.15,0.15\nP1 train\n";
        assert!(matches!(SplitAssignment::parse(bad), Err(Error::Parse { line: 2, .. })));
        let part = "# seed=1 fractions=0.70,0.15,0.15\nP1\ttrain\nP2\tholdout\n";
        assert!(matches!(SplitAssignment::parse(part), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(SplitAssignment::parse("P1\ttrain\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn coverage_check_flags_unknown_patients() {
        let records = vec![rec("a", 0), rec("b", 1), rec("c", 0)];
        let split = stratified_split(&records, DEFAULT_FRACTIONS, 0).unwrap();
        assert!(split.check_covers(&records).is_ok());
        assert!(matches!(split.check_covers(&[rec("zz", 1)]), Err(Error::Split(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn every_patient_lands_in_exactly_one_partition(
                sizes in proptest::collection::vec((1usize..4, 0u8..2), 3..60),
                seed in any::<u64>(),
            ) {
                let records: Vec<_> = sizes.iter().enumerate()
                    .flat_map(|(i, &(n, l))| (0..n).map(move |_| rec(&format!("P{i}"), l)))
                    .collect();
                let split = stratified_split(&records, DEFAULT_FRACTIONS, seed).unwrap();
                prop_assert_eq!(split.map.len(), sizes.len());
                prop_assert!(split.check_covers(&records).is_ok());
                let total: usize = Partition::ALL.iter().map(|&p| split.patients(p).count()).sum();
                prop_assert_eq!(total, sizes.len());
                // Patient-count deviation is bounded by one patient per class.
                let fr = class_fractions(&split, &records);
                let labels = patient_labels(&records);
                for c in 0..2 {
                    let n = labels.values().filter(|(l, _)| *l as usize == c).count();
                    if n == 0 { continue; }
                    for s in 0..3 {
                        prop_assert!((fr[c][s] - DEFAULT_FRACTIONS[s]).abs() <= 1.0 / n as f64 + 1e-12);
                    }
                }
            }
        }
    }
}
