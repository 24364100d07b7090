//! Exhaustive ranking and retrieval metrics.
//!
//! Rankings sort by ascending distance and break ties by ascending image id.
//! AP is the non-interpolated mean of precision at each relevant hit,
//! divided by the size of the relevant set.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::binary::{stride_bytes, BinaryHash, HashCodes};
use crate::container::{write_atomic, Metadata};
use crate::descriptor::{Descriptor, DescriptorSet};
use crate::error::{NipError, Result};
use crate::groundtruth::GroundTruth;

pub const AP_CONVENTION: &str = "non-interpolated; denominator = |relevant|";

/// Popcount of XOR over two packed codes of equal length.
pub fn hamming_packed(a: &[u8], b: &[u8]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    let mut dist = 0u32;
    for (x, y) in (&mut ca).zip(&mut cb) {
        let x = u64::from_le_bytes(x.try_into().unwrap());
        let y = u64::from_le_bytes(y.try_into().unwrap());
        dist += (x ^ y).count_ones();
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        dist += (x ^ y).count_ones();
    }
    dist
}

pub fn hamming(a: &BinaryHash, b: &BinaryHash) -> Result<u32> {
    if a.n_bits() != b.n_bits() {
        return Err(NipError::Dim(format!(
            "hamming between {} and {} bit codes",
            a.n_bits(),
            b.n_bits()
        )));
    }
    Ok(hamming_packed(a.packed(), b.packed()))
}

pub fn l2_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NipError::Dim(format!(
            "l2 between {} and {} dims",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

pub fn l2(a: &Descriptor, b: &Descriptor) -> Result<f64> {
    l2_values(&a.values, &b.values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankEntry {
    pub image_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankEntry>,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.image_id.as_str())
    }
}

/// Position of every id in ascending id order, used as the tie-break key.
fn id_ranks(ids: &[String]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let mut ranks = vec![0u32; ids.len()];
    for (r, i) in order.into_iter().enumerate() {
        ranks[i] = r as u32;
    }
    ranks
}

fn lookup(ids: &[String]) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return Err(NipError::Validation(format!(
                "duplicate image id {id:?} in database"
            )));
        }
    }
    Ok(map)
}

/// Packed codes of a database, stored contiguously with a fixed stride.
#[derive(Debug, Clone)]
pub struct HashIndex {
    ids: Vec<String>,
    id_rank: Vec<u32>,
    by_id: HashMap<String, usize>,
    codes: Vec<u8>,
    stride: usize,
    n_bits: usize,
}

impl HashIndex {
    pub fn new(hashes: &[BinaryHash]) -> Result<Self> {
        let n_bits = hashes
            .first()
            .ok_or_else(|| NipError::Validation("empty hash database".into()))?
            .n_bits();
        let stride = stride_bytes(n_bits);
        let mut codes = Vec::with_capacity(stride * hashes.len());
        let mut ids = Vec::with_capacity(hashes.len());
        for h in hashes {
            if h.n_bits() != n_bits {
                return Err(NipError::Dim(format!(
                    "hash {:?} has {} bits, database has {n_bits}",
                    h.image_id,
                    h.n_bits()
                )));
            }
            codes.extend_from_slice(h.packed());
            ids.push(h.image_id.clone());
        }
        Self::from_parts(ids, codes, n_bits)
    }

    /// Builds an index from already packed codes (`stride_bytes(n_bits)` per id).
    pub fn from_parts(ids: Vec<String>, codes: Vec<u8>, n_bits: usize) -> Result<Self> {
        let stride = stride_bytes(n_bits);
        if n_bits == 0 || codes.len() != stride * ids.len() {
            return Err(NipError::Dim(format!(
                "{} code bytes for {} ids of {n_bits} bits",
                codes.len(),
                ids.len()
            )));
        }
        let pad = stride * 8 - n_bits;
        if pad > 0 {
            let mask = !(0xffu8 >> pad);
            if let Some(i) = codes
                .chunks_exact(stride)
                .position(|c| c[stride - 1] & mask != 0)
            {
                return Err(NipError::Validation(format!(
                    "code {:?} has non-zero padding bits",
                    ids[i]
                )));
            }
        }
        Ok(Self {
            id_rank: id_ranks(&ids),
            by_id: lookup(&ids)?,
            ids,
            codes,
            stride,
            n_bits,
        })
    }

    pub fn from_codes(codes: &HashCodes) -> Result<Self> {
        Self::new(&codes.hashes)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn code(&self, i: usize) -> &[u8] {
        &self.codes[i * self.stride..(i + 1) * self.stride]
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.by_id.get(image_id).copied()
    }

    fn check_query(&self, query: &[u8]) -> Result<()> {
        if query.len() != self.stride {
            return Err(NipError::Dim(format!(
                "query code has {} bytes, database stride is {}",
                query.len(),
                self.stride
            )));
        }
        Ok(())
    }

    /// Hamming distance from `query` to every code, in database order.
    pub fn distances(&self, query: &[u8]) -> Result<Vec<u32>> {
        self.check_query(query)?;
        Ok(self
            .codes
            .chunks_exact(self.stride)
            .map(|c| hamming_packed(query, c))
            .collect())
    }

    /// Full ranking of the database; `exclude` drops that id from the result.
    pub fn rank_packed(
        &self,
        query_id: &str,
        query: &[u8],
        exclude: Option<&str>,
    ) -> Result<RankedList> {
        let dist = self.distances(query)?;
        let skip = exclude.and_then(|id| self.position(id));
        let mut keys: Vec<u64> = dist
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(i, &d)| ((d as u64) << 32) | self.id_rank[i] as u64)
            .collect();
        keys.sort_unstable();
        let mut by_rank = vec![0usize; self.ids.len()];
        for (i, &r) in self.id_rank.iter().enumerate() {
            by_rank[r as usize] = i;
        }
        let entries = keys
            .into_iter()
            .map(|k| {
                let i = by_rank[(k & 0xffff_ffff) as usize];
                RankEntry {
                    image_id: self.ids[i].clone(),
                    distance: (k >> 32) as f64,
                }
            })
            .collect();
        Ok(RankedList {
            query_id: query_id.to_string(),
            entries,
        })
    }

    pub fn rank(&self, query: &BinaryHash, include_self: bool) -> Result<RankedList> {
        if query.n_bits() != self.n_bits {
            return Err(NipError::Dim(format!(
                "query has {} bits, database has {}",
                query.n_bits(),
                self.n_bits
            )));
        }
        let exclude = (!include_self).then_some(query.image_id.as_str());
        self.rank_packed(&query.image_id, query.packed(), exclude)
    }
}

/// Real-valued descriptors ranked by Euclidean distance.
#[derive(Debug, Clone)]
pub struct DescriptorIndex {
    ids: Vec<String>,
    id_rank: Vec<u32>,
    by_id: HashMap<String, usize>,
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl DescriptorIndex {
    pub fn new(descriptors: &[Descriptor]) -> Result<Self> {
        let dim = descriptors
            .first()
            .ok_or_else(|| NipError::Validation("empty descriptor database".into()))?
            .dim();
        if let Some(d) = descriptors.iter().find(|d| d.dim() != dim) {
            return Err(NipError::Dim(format!(
                "descriptor {:?} has {} dims, database has {dim}",
                d.image_id,
                d.dim()
            )));
        }
        let ids: Vec<String> = descriptors.iter().map(|d| d.image_id.clone()).collect();
        Ok(Self {
            id_rank: id_ranks(&ids),
            by_id: lookup(&ids)?,
            ids,
            rows: descriptors.iter().map(|d| d.values.clone()).collect(),
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.by_id.get(image_id).copied()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rank_values(
        &self,
        query_id: &str,
        query: &[f64],
        exclude: Option<&str>,
    ) -> Result<RankedList> {
        if query.len() != self.dim {
            return Err(NipError::Dim(format!(
                "query has {} dims, database has {}",
                query.len(),
                self.dim
            )));
        }
        let skip = exclude.and_then(|id| self.position(id));
        let mut scored: Vec<(f64, u32, usize)> = Vec::with_capacity(self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            if Some(i) != skip {
                scored.push((l2_values(query, row)?, self.id_rank[i], i));
            }
        }
        scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(RankedList {
            query_id: query_id.to_string(),
            entries: scored
                .into_iter()
                .map(|(d, _, i)| RankEntry {
                    image_id: self.ids[i].clone(),
                    distance: d,
                })
                .collect(),
        })
    }

    pub fn rank(&self, query: &Descriptor, include_self: bool) -> Result<RankedList> {
        let exclude = (!include_self).then_some(query.image_id.as_str());
        self.rank_values(&query.image_id, &query.values, exclude)
    }
}

fn check_relevant(relevant: &BTreeSet<String>) -> Result<()> {
    if relevant.is_empty() {
        return Err(NipError::Metric("empty relevant set".into()));
    }
    Ok(())
}

/// Non-interpolated AP over a ranked id sequence.
pub fn average_precision<'a>(
    ranked: impl IntoIterator<Item = &'a str>,
    relevant: &BTreeSet<String>,
) -> Result<f64> {
    check_relevant(relevant)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, id) in ranked.into_iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
            if hits == relevant.len() {
                break;
            }
        }
    }
    Ok(sum / relevant.len() as f64)
}

pub fn recall_at_r<'a>(
    ranked: impl IntoIterator<Item = &'a str>,
    relevant: &BTreeSet<String>,
    r: usize,
) -> Result<f64> {
    check_relevant(relevant)?;
    if r == 0 {
        return Err(NipError::Metric("recall cut-off must be at least 1".into()));
    }
    let found = ranked
        .into_iter()
        .take(r)
        .filter(|id| relevant.contains(*id))
        .count();
    Ok(found as f64 / relevant.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitStats {
    pub means: Vec<f64>,
    /// Population standard deviation of `means`.
    pub std: f64,
}

impl BitStats {
    pub fn min(&self) -> f64 {
        self.means.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.means.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bit,mean\n");
        for (j, m) in self.means.iter().enumerate() {
            let _ = writeln!(out, "{j},{m}");
        }
        out
    }
}

pub fn bit_stats(hashes: &[BinaryHash]) -> Result<BitStats> {
    let n_bits = hashes
        .first()
        .ok_or_else(|| NipError::Validation("bit statistics need at least one hash".into()))?
        .n_bits();
    let mut counts = vec![0usize; n_bits];
    for h in hashes {
        if h.n_bits() != n_bits {
            return Err(NipError::Dim(format!(
                "hash {:?} has {} bits, expected {n_bits}",
                h.image_id,
                h.n_bits()
            )));
        }
        for (j, c) in counts.iter_mut().enumerate() {
            *c += h.get(j) as usize;
        }
    }
    let n = hashes.len() as f64;
    let means: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let mu = means.iter().sum::<f64>() / n_bits as f64;
    let std = (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n_bits as f64).sqrt();
    Ok(BitStats { means, std })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Keep the query itself in its own ranking.
    pub include_self: bool,
    pub recall_at: Vec<usize>,
    /// Report 4 x mean recall@4.
    pub ukb: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            include_self: false,
            recall_at: vec![1, 4, 10],
            ukb: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query_id: String,
    pub ap: f64,
    /// Recall at each cut-off of `EvalOptions::recall_at`, same order.
    pub recall: Vec<f64>,
    pub recall_at_4: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub queries: Vec<QueryResult>,
    pub map: f64,
    pub recall_at: Vec<(usize, f64)>,
    pub ukb_score: Option<f64>,
    pub bit_stats: Option<BitStats>,
    pub metadata: Metadata,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("query\tap");
        for (r, _) in &self.recall_at {
            let _ = write!(out, "\trecall@{r}");
        }
        out.push('\n');
        for q in &self.queries {
            let _ = write!(out, "{}\t{:.6}", q.query_id, q.ap);
            for v in &q.recall {
                let _ = write!(out, "\t{v:.6}");
            }
            out.push('\n');
        }
        let _ = write!(
            out,
            "# summary\tqueries={}\tmAP={:.6}",
            self.queries.len(),
            self.map
        );
        for (r, v) in &self.recall_at {
            let _ = write!(out, "\trecall@{r}={v:.6}");
        }
        if let Some(s) = self.ukb_score {
            let _ = write!(out, "\tukb_score={s:.6}");
        }
        out.push('\n');
        out
    }

    /// Machine-readable `key=value` lines, metadata first.
    pub fn to_kv(&self) -> String {
        let mut out = self.metadata.to_text();
        let _ = writeln!(out, "queries={}", self.queries.len());
        let _ = writeln!(out, "map={}", self.map);
        for (r, v) in &self.recall_at {
            let _ = writeln!(out, "recall@{r}={v}");
        }
        if let Some(s) = self.ukb_score {
            let _ = writeln!(out, "ukb_score={s}");
        }
        if let Some(b) = &self.bit_stats {
            let _ = writeln!(out, "bit_mean_min={}", b.min());
            let _ = writeln!(out, "bit_mean_max={}", b.max());
            let _ = writeln!(out, "bit_mean_std={}", b.std);
        }
        out
    }

    /// Writes `<stem>.tsv` and `<stem>.kv`, plus `<stem>.bits.csv` for hash runs.
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let with_ext = |ext: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(ext);
            std::path::PathBuf::from(s)
        };
        if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        write_atomic(&with_ext(".tsv"), self.to_tsv().as_bytes())?;
        write_atomic(&with_ext(".kv"), self.to_kv().as_bytes())?;
        if let Some(b) = &self.bit_stats {
            write_atomic(&with_ext(".bits.csv"), b.to_csv().as_bytes())?;
        }
        Ok(())
    }
}

fn score_queries(
    gt: &GroundTruth,
    opts: &EvalOptions,
    contains: impl Fn(&str) -> bool,
    rank: impl Fn(&str) -> Result<RankedList> + Sync,
) -> Result<EvalReport> {
    if gt.queries.is_empty() {
        return Err(NipError::Metric("ground truth has no queries".into()));
    }
    if let Some(&r) = opts.recall_at.iter().find(|&&r| r == 0) {
        return Err(NipError::Metric(format!(
            "recall cut-off {r} must be at least 1"
        )));
    }
    for q in &gt.queries {
        if !contains(&q.id) {
            return Err(NipError::NotFound(format!(
                "query {:?} is not in the database",
                q.id
            )));
        }
    }
    gt.check_ids(&contains)?;
    let queries: Vec<QueryResult> = gt
        .queries
        .par_iter()
        .map(|q| {
            let mut relevant = q.relevant.clone();
            if !opts.include_self {
                relevant.remove(&q.id);
            }
            if relevant.is_empty() {
                return Err(NipError::Metric(format!(
                    "query {:?} has no relevant items besides itself",
                    q.id
                )));
            }
            let ranked = rank(&q.id)?;
            let recall = opts
                .recall_at
                .iter()
                .map(|&r| recall_at_r(ranked.ids(), &relevant, r))
                .collect::<Result<Vec<_>>>()?;
            Ok(QueryResult {
                query_id: q.id.clone(),
                ap: average_precision(ranked.ids(), &relevant)?,
                recall,
                recall_at_4: recall_at_r(ranked.ids(), &relevant, 4)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = queries.len() as f64;
    let map = queries.iter().map(|q| q.ap).sum::<f64>() / n;
    let recall_at = opts
        .recall_at
        .iter()
        .enumerate()
        .map(|(k, &r)| (r, queries.iter().map(|q| q.recall[k]).sum::<f64>() / n))
        .collect();
    let ukb_score = opts
        .ukb
        .then(|| 4.0 * queries.iter().map(|q| q.recall_at_4).sum::<f64>() / n);
    let mut metadata = Metadata::new();
    metadata.set("ap", AP_CONVENTION).set(
        "self_match",
        if opts.include_self {
            "included"
        } else {
            "excluded"
        },
    );
    Ok(EvalReport {
        queries,
        map,
        recall_at,
        ukb_score,
        bit_stats: None,
        metadata,
    })
}

/// Hamming-ranked evaluation; every query is taken from the database itself.
pub fn evaluate_hashes(
    codes: &[BinaryHash],
    gt: &GroundTruth,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let index = HashIndex::new(codes)?;
    let mut report = score_queries(
        gt,
        opts,
        |id| index.position(id).is_some(),
        |qid| {
            let i = index.position(qid).expect("checked");
            let exclude = (!opts.include_self).then_some(qid);
            index.rank_packed(qid, index.code(i), exclude)
        },
    )?;
    report
        .metadata
        .set("metric", "hamming")
        .set("n_bits", index.n_bits());
    report.bit_stats = Some(bit_stats(codes)?);
    Ok(report)
}

/// L2-ranked evaluation over real-valued descriptors.
pub fn evaluate_descriptors(
    set: &DescriptorSet,
    gt: &GroundTruth,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let index = DescriptorIndex::new(&set.descriptors)?;
    let mut report = score_queries(
        gt,
        opts,
        |id| index.position(id).is_some(),
        |qid| {
            let i = index.position(qid).expect("checked");
            let exclude = (!opts.include_self).then_some(qid);
            index.rank_values(qid, index.row(i), exclude)
        },
    )?;
    report.metadata.set("metric", "l2").set("dim", index.dim());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bits(id: &str, s: &str) -> BinaryHash {
        BinaryHash::from_bits(id, s.chars().map(|c| c == '1'))
    }

    fn rel(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming(&bits("a", "1010"), &bits("b", "0110")).unwrap(), 2);
        let x = bits("x", "1101001110100101110");
        let not_x = BinaryHash::from_bits("y", x.to_bools().into_iter().map(|b| !b));
        assert_eq!(hamming(&x, &x).unwrap(), 0);
        assert_eq!(hamming(&x, &not_x).unwrap(), 19);
        assert!(matches!(
            hamming(&x, &bits("z", "1")),
            Err(NipError::Dim(_))
        ));
    }

    #[test]
    fn popcount_matches_bit_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n_bits in [1usize, 7, 8, 63, 64, 65, 130, 256] {
            for _ in 0..50 {
                let a = BinaryHash::from_bits("a", (0..n_bits).map(|_| rng.random::<bool>()));
                let b = BinaryHash::from_bits("b", (0..n_bits).map(|_| rng.random::<bool>()));
                let naive = (0..n_bits).filter(|&j| a.get(j) != b.get(j)).count() as u32;
                assert_eq!(hamming(&a, &b).unwrap(), naive);
            }
        }
    }

    #[test]
    fn l2_examples() {
        let a = Descriptor::from_values("a", vec![0.0, 0.0]).unwrap();
        let b = Descriptor::from_values("b", vec![3.0, 4.0]).unwrap();
        assert_eq!(l2(&a, &b).unwrap(), 5.0);
        assert_eq!(l2(&b, &a).unwrap(), 5.0);
        assert_eq!(l2(&a, &a).unwrap(), 0.0);
        assert!(matches!(
            l2_values(&[1.0], &[1.0, 2.0]),
            Err(NipError::Dim(_))
        ));
    }

    #[test]
    fn ranking_tie_break_and_self_exclusion() {
        let db = vec![
            bits("c", "1100"),
            bits("b", "1100"),
            bits("q", "0000"),
            bits("a", "1000"),
        ];
        let index = HashIndex::new(&db).unwrap();
        let q = bits("q", "0000");
        let r = index.rank(&q, false).unwrap();
        let ids: Vec<&str> = r.ids().collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        let d: Vec<f64> = r.entries.iter().map(|e| e.distance).collect();
        assert_eq!(d, vec![1.0, 2.0, 2.0]);
        let with_self: Vec<String> = index
            .rank(&q, true)
            .unwrap()
            .ids()
            .map(String::from)
            .collect();
        assert_eq!(with_self, vec!["q", "a", "b", "c"]);

        let single = HashIndex::new(&[bits("only", "1111")]).unwrap();
        assert_eq!(single.rank(&q, false).unwrap().entries[0].image_id, "only");
    }

    #[test]
    fn descriptor_ranking_orders_by_l2_then_id() {
        let mk = |id: &str, v: Vec<f64>| Descriptor::from_values(id, v).unwrap();
        let db = vec![
            mk("z", vec![1.0, 0.0]),
            mk("y", vec![0.0, 1.0]),
            mk("x", vec![3.0, 3.0]),
        ];
        let index = DescriptorIndex::new(&db).unwrap();
        let r = index.rank(&mk("q", vec![0.0, 0.0]), false).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec!["y", "z", "x"]);
    }

    #[test]
    fn index_rejects_bad_input() {
        assert!(HashIndex::new(&[]).is_err());
        assert!(matches!(
            HashIndex::new(&[bits("a", "10"), bits("b", "101")]),
            Err(NipError::Dim(_))
        ));
        assert!(HashIndex::new(&[bits("a", "10"), bits("a", "11")]).is_err());
        assert!(HashIndex::from_parts(vec!["a".into()], vec![0b1000_0000], 7).is_err());
        let index = HashIndex::new(&[bits("a", "10")]).unwrap();
        assert!(matches!(
            index.rank(&bits("q", "101"), false),
            Err(NipError::Dim(_))
        ));
    }

    #[test]
    fn ap_examples() {
        let r = rel(&["a", "c"]);
        let ap = average_precision(["a", "b", "c"], &r).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(["a", "c", "b"], &r).unwrap(), 1.0);
        assert_eq!(average_precision(["b", "d"], &r).unwrap(), 0.0);
        assert!(matches!(
            average_precision(["a"], &BTreeSet::new()),
            Err(NipError::Metric(_))
        ));
    }

    #[test]
    fn recall_examples() {
        let r = rel(&["a", "b", "c", "d"]);
        assert_eq!(recall_at_r(["a", "x", "y", "z", "b"], &r, 4).unwrap(), 0.25);
        assert_eq!(recall_at_r(["d", "c", "b", "a"], &r, 4).unwrap(), 1.0);
        assert!(recall_at_r(["a"], &r, 0).is_err());
        assert!(recall_at_r(["a"], &BTreeSet::new(), 1).is_err());
    }

    #[test]
    fn bit_stats_examples() {
        let zeros = vec![bits("a", "0000"), bits("b", "0000")];
        let s = bit_stats(&zeros).unwrap();
        assert_eq!(s.means, vec![0.0; 4]);
        assert_eq!(s.std, 0.0);
        let pair = vec![bits("a", "1010"), bits("b", "0101")];
        assert_eq!(bit_stats(&pair).unwrap().means, vec![0.5; 4]);
        let skew = vec![bits("a", "10"), bits("b", "10")];
        assert_eq!(bit_stats(&skew).unwrap().std, 0.5);
        assert_eq!(
            bit_stats(&pair).unwrap().to_csv(),
            "bit,mean\n0,0.5\n1,0.5\n2,0.5\n3,0.5\n"
        );
    }

    fn groups(n: usize, k: usize) -> Vec<Vec<String>> {
        (0..n)
            .map(|g| (0..k).map(|i| format!("g{g}_{i}")).collect())
            .collect()
    }

    #[test]
    fn perfect_groups_score_four() {
        let g = groups(5, 4);
        let mut hashes = Vec::new();
        for (gi, members) in g.iter().enumerate() {
            for id in members {
                hashes.push(BinaryHash::from_bits(id.clone(), (0..8).map(|j| j == gi)));
            }
        }
        let gt = GroundTruth::from_groups(&g);
        let opts = EvalOptions {
            include_self: true,
            recall_at: vec![4],
            ukb: true,
        };
        let report = evaluate_hashes(&hashes, &gt, &opts).unwrap();
        assert_eq!(report.map, 1.0);
        assert_eq!(report.ukb_score, Some(4.0));
        let excl = evaluate_hashes(&hashes, &gt, &EvalOptions::default()).unwrap();
        assert_eq!(excl.map, 1.0);
        assert_eq!(excl.metadata.get("self_match"), Some("excluded"));
        assert!(report.to_tsv().contains("ukb_score=4.000000"));
        assert!(report.to_kv().contains("map=1\n"));
    }

    #[test]
    fn eval_rejects_unknown_ids() {
        let hashes = vec![bits("a", "10"), bits("b", "01")];
        let gt = GroundTruth::parse("a\tb,zz\n").unwrap();
        assert!(matches!(
            evaluate_hashes(&hashes, &gt, &EvalOptions::default()),
            Err(NipError::NotFound(_))
        ));
        let gt = GroundTruth::parse("q\ta\n").unwrap();
        assert!(matches!(
            evaluate_hashes(&hashes, &gt, &EvalOptions::default()),
            Err(NipError::NotFound(_))
        ));
        let gt = GroundTruth::parse("a\ta\n").unwrap();
        assert!(matches!(
            evaluate_hashes(&hashes, &gt, &EvalOptions::default()),
            Err(NipError::Metric(_))
        ));
    }

    #[test]
    fn random_ranking_map_is_near_chance() {
        // E[AP] for r relevant among N under a uniform shuffle
        let (n, r) = (50usize, 5usize);
        let relevant: BTreeSet<String> = (0..r).map(|i| i.to_string()).collect();
        let mut ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 1000;
        let aps: Vec<f64> = (0..trials)
            .map(|_| {
                ids.shuffle(&mut rng);
                average_precision(ids.iter().map(String::as_str), &relevant).unwrap()
            })
            .collect();
        let mean = aps.iter().sum::<f64>() / trials as f64;
        let var = aps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        // exact expectation: (1/r) sum_k sum_{j<=k} P(both relevant) ... via harmonic form
        let expected: f64 = (1..=n)
            .map(|k| {
                let p_rel = r as f64 / n as f64;
                let others = (k - 1) as f64 * (r - 1) as f64 / (n - 1) as f64;
                p_rel * (1.0 + others) / k as f64
            })
            .sum::<f64>()
            / r as f64;
        assert!(
            (mean - expected).abs() < 3.0 * (var / trials as f64).sqrt(),
            "{mean} vs {expected}"
        );
        assert!((expected - r as f64 / n as f64).abs() < 0.1);
    }

    proptest! {
        #[test]
        fn ap_ignores_order_after_last_hit(perm in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(), tail_seed in 0u64..1000) {
            let relevant: BTreeSet<String> = (0..3).map(|i| i.to_string()).collect();
            let ids: Vec<String> = perm.iter().map(|i| i.to_string()).collect();
            let last = ids.iter().rposition(|id| relevant.contains(id)).unwrap();
            let mut shuffled = ids.clone();
            shuffled[last + 1..].shuffle(&mut ChaCha8Rng::seed_from_u64(tail_seed));
            let a = average_precision(ids.iter().map(String::as_str), &relevant).unwrap();
            let b = average_precision(shuffled.iter().map(String::as_str), &relevant).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn rankings_are_total_orders(codes in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 10), 1..40)) {
            let hashes: Vec<BinaryHash> = codes.iter().enumerate().map(|(i, c)| BinaryHash::from_bits(format!("{:03}", 40 - i), c.clone())).collect();
            let index = HashIndex::new(&hashes).unwrap();
            let r = index.rank(&hashes[0], true).unwrap();
            prop_assert_eq!(r.entries.len(), hashes.len());
            for w in r.entries.windows(2) {
                prop_assert!(w[0].distance < w[1].distance || (w[0].distance == w[1].distance && w[0].image_id < w[1].image_id));
            }
        }
    }
}
