//! In-memory dataset: decoded samples plus their schema.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::NaiveDate;

use super::{encode_record, DataError, EncodedSample, FeatureSchema, OccasionTag};

/// A decoded log. Sample order is file order, which downstream code treats
/// as meaningful (shuffles are explicit and seeded).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub samples: Vec<EncodedSample>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, samples: Vec<EncodedSample>) -> Self {
        Dataset { schema, samples }
    }

    /// Read a TSV log under the given schema. Any malformed line aborts the
    /// load with its line number; a half-read dataset is worse than none.
    pub fn load_tsv(path: &Path, schema: &FeatureSchema) -> Result<Self, DataError> {
        schema.validate()?;
        let file = std::fs::File::open(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let reader = BufReader::new(file);
        let mut samples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| DataError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.is_empty() {
                continue;
            }
            samples.push(encode_record(&line, schema, i + 1)?);
        }
        Ok(Dataset {
            schema: schema.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by calendar day, in date order.
    pub fn by_day(&self) -> BTreeMap<NaiveDate, Vec<usize>> {
        let mut map: BTreeMap<NaiveDate, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.date).or_default().push(i);
        }
        map
    }

    /// Sample indices for one occasion tag, in file order.
    pub fn by_occasion(&self, tag: OccasionTag) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.occasion == tag)
            .map(|(i, _)| i)
            .collect()
    }

    /// Count of (negatives, positives) by the purchase label.
    pub fn label_counts(&self) -> (usize, usize) {
        let pos = self.samples.iter().filter(|s| s.purchase).count();
        (self.samples.len() - pos, pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> FeatureSchema {
        FeatureSchema {
            users: 100,
            items: 50,
            categories: 10,
            brands: 8,
            positions: 11,
            time_buckets: 9,
            user_dense: 1,
            item_dense: 1,
            inter_dense: 1,
            seq_len: 4,
        }
    }

    fn write_log(lines: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.tsv");
        std::fs::write(&p, lines.join("\n")).unwrap();
        (dir, p)
    }

    #[test]
    fn loads_and_groups_by_day() {
        let (_d, p) = write_log(&[
            "2026-01-01\tNP\t1\t2\t3\t4\t0.1\t0.2\t0.3\t1\t1\t\t1\t0",
            "2026-01-02\tBP\t1\t3\t3\t4\t0.1\t0.2\t0.3\t1\t1\t2:3:4\t1\t1",
            "2026-01-01\tNP\t2\t2\t3\t4\t0.1\t0.2\t0.3\t1\t1\t\t1\t0",
        ]);
        let ds = Dataset::load_tsv(&p, &schema()).unwrap();
        assert_eq!(ds.len(), 3);
        let days = ds.by_day();
        assert_eq!(days.len(), 2);
        assert_eq!(days.values().next().unwrap(), &vec![0, 2]);
        assert_eq!(ds.label_counts(), (2, 1));
        assert_eq!(ds.by_occasion(OccasionTag::BP), vec![1]);
    }

    #[test]
    fn bad_line_reports_its_number() {
        let (_d, p) = write_log(&[
            "2026-01-01\tNP\t1\t2\t3\t4\t0.1\t0.2\t0.3\t1\t1\t\t1\t0",
            "garbage line",
        ]);
        match Dataset::load_tsv(&p, &schema()) {
            Err(DataError::FieldCount { line: 2, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nope.tsv");
        assert!(matches!(
            Dataset::load_tsv(&p, &schema()),
            Err(DataError::Io { .. })
        ));
    }
}
