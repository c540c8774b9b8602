//! Grouped identity-similarity evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face::{cosine, FaceEmbedder};
use crate::preprocess::Image;

/// Cosine similarity of the two faces, or `None` when either has no face.
pub fn id_similarity(reference: &Image, generated: &Image, embedder: &dyn FaceEmbedder) -> Result<Option<f64>> {
    let (Some(a), Some(b)) = (embedder.embed(reference)?, embedder.embed(generated)?) else {
        return Ok(None);
    };
    Ok(Some(cosine(&a, &b)?))
}

/// One entry of `pairs.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub reference_path: String,
    pub generated_path: String,
    pub group: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub reference_id: String,
    pub generated_id: String,
    pub group: String,
    /// `None` when no face was found in either image.
    pub similarity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    /// Pairs with a similarity.
    pub count: usize,
    /// Pairs without one.
    pub missing: usize,
    /// `None` when the group has no scored pair.
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Sorted by group, then reference, then generated id.
    pub pairs: Vec<ScoredPair>,
    /// Keyed and ordered by group label.
    pub groups: BTreeMap<String, GroupSummary>,
    pub all: GroupSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub embedder: String,
    pub timestamp: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub record: EvalRecord,
    pub metadata: ReportMetadata,
}

/// Order-independent mean: values are summed in sorted order.
fn summarize<'a>(values: impl Iterator<Item = &'a Option<f64>>) -> GroupSummary {
    let mut scored = Vec::new();
    let mut missing = 0;
    for v in values {
        match v {
            Some(s) => scored.push(*s),
            None => missing += 1,
        }
    }
    scored.sort_by(f64::total_cmp);
    let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    GroupSummary { count: scored.len(), missing, mean }
}

pub fn evaluate_set(pairs: &[ScoredPair]) -> Result<EvalRecord> {
    if let Some(p) = pairs.iter().find(|p| p.similarity.is_some_and(|s| !(-1.0..=1.0).contains(&s))) {
        return Err(Error::invalid(format!("similarity {:?} outside [-1, 1]", p.similarity)));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| {
        (&a.group, &a.reference_id, &a.generated_id)
            .cmp(&(&b.group, &b.reference_id, &b.generated_id))
            .then(a.similarity.unwrap_or(f64::NAN).total_cmp(&b.similarity.unwrap_or(f64::NAN)))
    });
    let mut by_group: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for p in &sorted {
        by_group.entry(p.group.clone()).or_default().push(p.similarity);
    }
    let groups = by_group.iter().map(|(g, v)| (g.clone(), summarize(v.iter()))).collect();
    let all = summarize(sorted.iter().map(|p| &p.similarity));
    Ok(EvalRecord { pairs: sorted, groups, all })
}

/// Reads `pairs.json`; relative paths resolve against the file's directory.
pub fn read_pairs(path: &Path) -> Result<Vec<PairSpec>> {
    let text = std::fs::read_to_string(path)?;
    let pairs: Vec<PairSpec> = serde_json::from_str(&text)?;
    if pairs.is_empty() {
        return Err(Error::invalid("pairs file lists no pairs"));
    }
    Ok(pairs)
}

/// Scores every pair; unreadable or faceless images count as missing.
pub fn score_pairs(pairs: &[PairSpec], base: &Path, embedder: &dyn FaceEmbedder) -> Result<Vec<ScoredPair>> {
    pairs
        .iter()
        .map(|p| {
            let load = |s: &str| Image::load(&base.join(s)).ok();
            let similarity = match (load(&p.reference_path), load(&p.generated_path)) {
                (Some(r), Some(g)) => id_similarity(&r, &g, embedder)?,
                _ => None,
            };
            Ok(ScoredPair {
                reference_id: p.reference_path.clone(),
                generated_id: p.generated_path.clone(),
                group: p.group.clone(),
                similarity,
            })
        })
        .collect()
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face::ToyFaceEmbedder;
    use crate::tensor::Matrix;
    use proptest::prelude::*;

    fn pair(r: &str, g: &str, s: Option<f64>) -> ScoredPair {
        ScoredPair { reference_id: r.into(), generated_id: format!("{r}-gen"), group: g.into(), similarity: s }
    }

    #[test]
    fn self_similarity_and_orthogonal_case() {
        let e = ToyFaceEmbedder::new(16, 4, 8, 3).unwrap();
        let img = Image::from_fn(16, 16, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f32 / 10.0);
        assert!((id_similarity(&img, &img, &e).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(id_similarity(&img, &Image::filled(16, 16, 3, 0.5), &e).unwrap(), None);
        // identity weights: faces bright in disjoint cells embed orthogonally
        let w = Matrix::identity(12);
        let e = ToyFaceEmbedder::from_weights(2, 2, w, 0).unwrap();
        let a = Image::from_fn(2, 2, 3, |x, y, _| if x == 0 && y == 0 { 0.9 } else { 0.5 });
        let b = Image::from_fn(2, 2, 3, |x, y, _| if x == 1 && y == 1 { 0.1 } else { 0.5 });
        assert_eq!(id_similarity(&a, &b, &e).unwrap(), Some(0.0));
    }

    #[test]
    fn hand_dot_product() {
        let w = Matrix::from_vec(12, 2, (0..24).map(|i| ((i * 5) % 7) as f64 / 7.0 - 0.4).collect()).unwrap();
        let e = ToyFaceEmbedder::from_weights(2, 2, w.clone(), 0).unwrap();
        let a = Image::from_fn(2, 2, 3, |x, y, c| (x + 2 * y + c) as f32 / 6.0);
        let b = Image::from_fn(2, 2, 3, |x, y, c| ((3 - x - y) * (c + 1)) as f32 / 9.0);
        let embed = |img: &Image| -> [f64; 2] {
            let mut out = [0.0; 2];
            for (k, o) in out.iter_mut().enumerate() {
                let mut s = 0.0;
                for i in 0..12 {
                    s += (f64::from(img.data()[i]) - 0.5) * w[(i, k)];
                }
                *o = s.tanh();
            }
            out
        };
        let (ea, eb) = (embed(&a), embed(&b));
        let expect = (ea[0] * eb[0] + ea[1] * eb[1]) / ((ea[0].powi(2) + ea[1].powi(2)).sqrt() * (eb[0].powi(2) + eb[1].powi(2)).sqrt());
        assert!((id_similarity(&a, &b, &e).unwrap().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn single_pair_and_two_groups() {
        let r = evaluate_set(&[pair("a", "g", Some(0.4))]).unwrap();
        assert_eq!(r.all.mean, Some(0.4));
        assert_eq!(r.groups["g"].mean, Some(0.4));
        let r = evaluate_set(&[pair("a", "x", Some(0.2)), pair("b", "y", Some(0.6))]).unwrap();
        assert!((r.all.mean.unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn twelve_pair_fixture() {
        let sims = [
            ("Black", [0.61, 0.70, 0.79]),
            ("Brown", [0.55, 0.65, 0.72]),
            ("White", [0.80, 0.68, 0.74]),
            ("Yellow", [0.66, 0.71, 0.59]),
        ];
        let mut pairs = Vec::new();
        for (g, vals) in sims {
            for (i, v) in vals.iter().enumerate() {
                pairs.push(pair(&format!("{g}{i}"), g, Some(*v)));
            }
        }
        let r = evaluate_set(&pairs).unwrap();
        let expect = [("Black", 0.70), ("Brown", 0.64), ("White", 0.74), ("Yellow", 0.6533333333333333)];
        for (g, m) in expect {
            assert!((r.groups[g].mean.unwrap() - m).abs() < 1e-12, "{g}");
            assert_eq!(r.groups[g].count, 3);
        }
        assert!((r.all.mean.unwrap() - 8.2 / 12.0).abs() < 1e-12);
        assert_eq!(r.groups.keys().collect::<Vec<_>>(), vec!["Black", "Brown", "White", "Yellow"]);
    }

    #[test]
    fn missing_pairs_are_excluded_and_empty_groups_absent() {
        let r = evaluate_set(&[pair("a", "x", Some(0.5)), pair("b", "x", None), pair("c", "y", None)]).unwrap();
        assert_eq!(r.groups["x"], GroupSummary { count: 1, missing: 1, mean: Some(0.5) });
        assert_eq!(r.groups["y"], GroupSummary { count: 0, missing: 1, mean: None });
        assert_eq!(r.all, GroupSummary { count: 1, missing: 2, mean: Some(0.5) });
        assert!(evaluate_set(&[pair("a", "x", Some(1.5))]).is_err());
    }

    #[test]
    fn report_round_trip_is_byte_identical() {
        let rec = evaluate_set(&[pair("a", "x", Some(0.1234567890123)), pair("b", "y", None)]).unwrap();
        let report = EvalReport {
            record: rec,
            metadata: ReportMetadata { embedder: "toy".into(), timestamp: 1, config_hash: "ab".into() },
        };
        let text = report.to_json().unwrap();
        let back = EvalReport::from_json(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.to_json().unwrap(), text);
    }

    proptest! {
        #[test]
        fn permutation_invariant(vals in prop::collection::vec((0usize..3, -1.0f64..1.0, any::<bool>()), 1..20), seed in any::<u64>()) {
            let pairs: Vec<ScoredPair> = vals
                .iter()
                .enumerate()
                .map(|(i, (g, s, keep))| pair(&format!("r{i}"), &format!("g{g}"), keep.then_some(*s)))
                .collect();
            let mut shuffled = pairs.clone();
            let n = shuffled.len();
            let mut x = seed;
            for i in (1..n).rev() {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (x >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(evaluate_set(&pairs).unwrap(), evaluate_set(&shuffled).unwrap());
        }

        #[test]
        fn similarity_symmetric_and_bounded(seed in 0u64..200) {
            let e = ToyFaceEmbedder::new(8, 4, 6, 9).unwrap();
            let mk = |k: u64| Image::from_fn(8, 8, 3, move |x, y, c| (((x as u64 * 31 + y as u64 * 17 + c as u64 * 7 + k * 13) % 23) as f32) / 22.0);
            let (a, b) = (mk(seed), mk(seed + 1));
            let s1 = id_similarity(&a, &b, &e).unwrap().unwrap();
            let s2 = id_similarity(&b, &a, &e).unwrap().unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s1));
        }
    }
}
