//! Rubric scoring, annotator aggregation, ranking, and pair extraction.
//!
//! Each response is rated on eight weighted categories with three levels
//! (Positive 5, Neutral 2, Negative 0). Weighted scores of all annotators are
//! averaged, responses are ranked by that mean, and the top two are paired
//! against the bottom two to produce reward-model training pairs.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Clarity,
    Accuracy,
    Completeness,
    Safety,
    Courtesy,
    Comfortableness,
    Conciseness,
    Context,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Clarity,
        Category::Accuracy,
        Category::Completeness,
        Category::Safety,
        Category::Courtesy,
        Category::Comfortableness,
        Category::Conciseness,
        Category::Context,
    ];

    pub fn weight(self) -> u32 {
        match self {
            Category::Clarity | Category::Accuracy | Category::Completeness => 6,
            Category::Safety | Category::Courtesy | Category::Comfortableness => 3,
            Category::Conciseness | Category::Context => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Clarity => "Clarity",
            Category::Accuracy => "Accuracy",
            Category::Completeness => "Completeness",
            Category::Safety => "Safety",
            Category::Courtesy => "Courtesy",
            Category::Comfortableness => "Comfortableness",
            Category::Conciseness => "Conciseness",
            Category::Context => "Context",
        }
    }

    pub fn parse(name: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Positive,
    Neutral,
    Negative,
}

impl Level {
    pub fn score(self) -> u32 {
        match self {
            Level::Positive => 5,
            Level::Neutral => 2,
            Level::Negative => 0,
        }
    }
}

/// Sum of category weights (29).
pub const WEIGHT_SUM: u32 = 29;
/// Highest attainable weighted score, 5 x 29.
pub const MAX_SCORE: u32 = 145;

/// Category levels of one record. Deserialization rejects unknown categories
/// and repeated keys; missing categories are caught by [`Levels::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Levels(BTreeMap<Category, Level>);

impl Levels {
    pub fn uniform(level: Level) -> Self {
        Self(Category::ALL.iter().map(|&c| (c, level)).collect())
    }

    pub fn get(&self, c: Category) -> Option<Level> {
        self.0.get(&c).copied()
    }

    pub fn set(&mut self, c: Category, level: Level) {
        self.0.insert(c, level);
    }

    pub fn remove(&mut self, c: Category) {
        self.0.remove(&c);
    }

    pub fn validate(&self) -> Result<()> {
        let missing: Vec<&str> = Category::ALL
            .iter()
            .filter(|c| !self.0.contains_key(c))
            .map(|c| c.name())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Schema(format!("missing categories: {}", missing.join(", "))));
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for Levels {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct LevelsVisitor;
        impl<'de> Visitor<'de> for LevelsVisitor {
            type Value = Levels;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from rubric category to level")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Levels, A::Error> {
                use serde::de::Error as _;
                let mut out = BTreeMap::new();
                while let Some(key) = map.next_key::<String>()? {
                    let cat = Category::parse(&key)
                        .ok_or_else(|| A::Error::custom(format!("unknown category `{key}`")))?;
                    let level: Level = map.next_value()?;
                    if out.insert(cat, level).is_some() {
                        return Err(A::Error::custom(format!("category `{key}` given twice")));
                    }
                }
                Ok(Levels(out))
            }
        }
        d.deserialize_map(LevelsVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub prompt_id: String,
    pub response_id: u32,
    pub annotator: String,
    pub levels: Levels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedScore {
    pub score: f64,
    pub percentage: f64,
}

impl WeightedScore {
    fn from_score(score: f64) -> Self {
        Self {
            score,
            percentage: score / MAX_SCORE as f64 * 100.0,
        }
    }
}

/// Rubric total of one record and its share of the 145-point maximum.
pub fn weighted_score(record: &AnnotationRecord) -> Result<WeightedScore> {
    levels_score(&record.levels)
}

pub fn levels_score(levels: &Levels) -> Result<WeightedScore> {
    levels.validate()?;
    let total: u32 = Category::ALL
        .iter()
        .map(|&c| c.weight() * levels.get(c).expect("validated").score())
        .sum();
    Ok(WeightedScore::from_score(total as f64))
}

/// Percentage to one decimal place, e.g. `87.6%`.
pub fn format_percent(percentage: f64) -> String {
    format!("{percentage:.1}%")
}

/// Mean weighted score over the annotators of a single response.
pub fn aggregate_annotators(records: &[AnnotationRecord]) -> Result<WeightedScore> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("aggregation needs at least one annotation"))?;
    if records
        .iter()
        .any(|r| r.prompt_id != first.prompt_id || r.response_id != first.response_id)
    {
        return Err(Error::invalid("records belong to different responses"));
    }
    let mut total = 0.0;
    for r in records {
        total += weighted_score(r)?.score;
    }
    Ok(WeightedScore::from_score(total / records.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedResponseSet {
    pub prompt_id: String,
    /// Response ids, best first.
    pub order: Vec<u32>,
    /// `scores[i]` belongs to `order[i]`.
    pub scores: Vec<f64>,
}

impl RankedResponseSet {
    pub fn validate(&self) -> Result<()> {
        if self.order.len() != self.scores.len() || self.order.len() < 2 {
            return Err(Error::Schema(format!(
                "ranking for {} needs matching order/scores of length >= 2",
                self.prompt_id
            )));
        }
        for w in self.order.iter().zip(&self.scores).collect::<Vec<_>>().windows(2) {
            let ((ia, sa), (ib, sb)) = (w[0], w[1]);
            if sa < sb || (sa == sb && ia > ib) {
                return Err(Error::Schema(format!(
                    "ranking for {} is not sorted by score then id",
                    self.prompt_id
                )));
            }
        }
        Ok(())
    }

    pub fn score_of(&self, response_id: u32) -> Option<f64> {
        self.order
            .iter()
            .position(|&r| r == response_id)
            .map(|i| self.scores[i])
    }
}

/// Sorts responses by score descending; equal scores keep lower ids first.
pub fn rank_responses(prompt_id: &str, scored: &[(u32, f64)]) -> Result<RankedResponseSet> {
    if scored.len() < 2 {
        return Err(Error::invalid(format!(
            "ranking needs at least 2 responses, got {}",
            scored.len()
        )));
    }
    if let Some((id, s)) = scored.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s} for response {id}")));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(RankedResponseSet {
        prompt_id: prompt_id.to_string(),
        order: sorted.iter().map(|p| p.0).collect(),
        scores: sorted.iter().map(|p| p.1).collect(),
    })
}

/// Groups records by response, aggregates each, and ranks the prompt's set.
pub fn rank_annotations(prompt_id: &str, records: &[AnnotationRecord]) -> Result<RankedResponseSet> {
    let mut by_response: BTreeMap<u32, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.prompt_id == prompt_id) {
        by_response.entry(r.response_id).or_default().push(r.clone());
    }
    let scored = by_response
        .iter()
        .map(|(&id, recs)| Ok((id, aggregate_annotators(recs)?.score)))
        .collect::<Result<Vec<_>>>()?;
    rank_responses(prompt_id, &scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    Human,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub chosen_id: u32,
    pub rejected_id: u32,
    pub source: PairSource,
}

/// Pairs each of the top two responses with each of the bottom two.
/// Pairs whose scores tie are dropped.
pub fn extract_pairs(ranking: &RankedResponseSet, source: PairSource) -> Result<Vec<PreferencePair>> {
    let k = ranking.order.len();
    if k < 4 || ranking.scores.len() != k {
        return Err(Error::invalid(format!(
            "pair extraction needs at least 4 ranked responses, got {k}"
        )));
    }
    let mut pairs = Vec::with_capacity(4);
    for top in 0..2 {
        for bottom in k - 2..k {
            if ranking.scores[top] > ranking.scores[bottom] {
                pairs.push(PreferencePair {
                    prompt_id: ranking.prompt_id.clone(),
                    chosen_id: ranking.order[top],
                    rejected_id: ranking.order[bottom],
                    source,
                });
            }
        }
    }
    Ok(pairs)
}

/// Synthetic annotator: maps a quality in `[0, 1]` to a level per category,
/// optionally jittered by seeded uniform noise of the given amplitude.
pub fn oracle_annotate(
    prompt_id: &str,
    response_id: u32,
    annotator: &str,
    quality: f64,
    noise: f64,
    seed: u64,
) -> AnnotationRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels = Levels::default();
    for c in Category::ALL {
        let jitter = if noise > 0.0 {
            rng.random_range(-noise..=noise)
        } else {
            0.0
        };
        let q = quality + jitter;
        let level = if q >= 2.0 / 3.0 {
            Level::Positive
        } else if q >= 1.0 / 3.0 {
            Level::Neutral
        } else {
            Level::Negative
        };
        levels.set(c, level);
    }
    AnnotationRecord {
        prompt_id: prompt_id.to_string(),
        response_id,
        annotator: annotator.to_string(),
        levels,
        timestamp: None,
    }
}
