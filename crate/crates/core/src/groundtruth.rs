//! Retrieval ground truth: one line per query, `query_id<TAB>id1,id2,...`.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{NipError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub relevant: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub queries: Vec<Query>,
}

impl GroundTruth {
    pub fn parse(text: &str) -> Result<Self> {
        let mut queries = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (qid, rel) = line
                .split_once('\t')
                .ok_or_else(|| NipError::parse(line_no, "expected query_id<TAB>relevant ids"))?;
            let qid = qid.trim();
            if qid.is_empty() {
                return Err(NipError::parse(line_no, "empty query id"));
            }
            let relevant: BTreeSet<String> = rel
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            if relevant.is_empty() {
                return Err(NipError::parse(
                    line_no,
                    format!("query {qid:?} has no relevant ids"),
                ));
            }
            if !seen.insert(qid.to_string()) {
                return Err(NipError::parse(line_no, format!("duplicate query {qid:?}")));
            }
            queries.push(Query {
                id: qid.to_string(),
                relevant,
            });
        }
        Ok(Self { queries })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for q in &self.queries {
            out.push_str(&q.id);
            out.push('\t');
            out.push_str(&q.relevant.iter().cloned().collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::container::write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    /// Checks that every query id and relevant id is known.
    pub fn check_ids(&self, mut known: impl FnMut(&str) -> bool) -> Result<()> {
        for q in &self.queries {
            if !known(&q.id) {
                return Err(NipError::NotFound(format!("query {:?}", q.id)));
            }
            if let Some(r) = q.relevant.iter().find(|r| !known(r)) {
                return Err(NipError::NotFound(format!(
                    "relevant id {r:?} of query {:?}",
                    q.id
                )));
            }
        }
        Ok(())
    }

    /// Ground truth for groups where every member is relevant to every
    /// member, itself included (the UKB convention).
    pub fn from_groups(groups: &[Vec<String>]) -> Self {
        let mut queries = Vec::new();
        for g in groups {
            let relevant: BTreeSet<String> = g.iter().cloned().collect();
            for id in g {
                queries.push(Query {
                    id: id.clone(),
                    relevant: relevant.clone(),
                });
            }
        }
        Self { queries }
    }
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    GroundTruth::parse(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_query() {
        let gt = GroundTruth::parse("q1\ta,b\n").unwrap();
        assert_eq!(gt.queries.len(), 1);
        assert_eq!(gt.queries[0].id, "q1");
        assert_eq!(
            gt.queries[0].relevant,
            ["a", "b"].iter().map(|s| s.to_string()).collect()
        );
    }

    #[test]
    fn empty_relevant_set_is_error() {
        match GroundTruth::parse("q0\tx\nq1\t\n") {
            Err(NipError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match GroundTruth::parse("q0\tx\n\nno tab here\n") {
            Err(NipError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicates_deduplicated() {
        let gt = GroundTruth::parse("q\ta,a,b,a\n").unwrap();
        assert_eq!(gt.queries[0].relevant.len(), 2);
    }

    #[test]
    fn ukb_style_groups_have_four_relevant() {
        let groups: Vec<Vec<String>> = (0..3)
            .map(|g| (0..4).map(|i| format!("g{g}_{i}")).collect())
            .collect();
        let text = GroundTruth::from_groups(&groups).to_text();
        let gt = GroundTruth::parse(&text).unwrap();
        assert_eq!(gt.queries.len(), 12);
        for q in &gt.queries {
            assert_eq!(q.relevant.len(), 4);
            assert!(q.relevant.contains(&q.id));
        }
    }

    #[test]
    fn unknown_ids_detected() {
        let gt = GroundTruth::parse("q\ta,b\n").unwrap();
        assert!(gt.check_ids(|id| id != "b").is_err());
        assert!(gt.check_ids(|_| true).is_ok());
    }
}
