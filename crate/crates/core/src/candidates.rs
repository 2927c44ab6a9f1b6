use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub passage_id: String,
    pub score: f64,
    /// 1-based position in the list.
    pub rank: usize,
    pub label: u32,
    /// Rank in the retriever run this candidate came from, if it was retrieved.
    #[serde(default)]
    pub retriever_rank: Option<usize>,
}

/// One query's ordered candidates: retriever output, or a training list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub query_id: String,
    pub items: Vec<Candidate>,
}

impl CandidateList {
    /// Builds a list from `(passage_id, score)` pairs already in rank order.
    pub fn from_ranked(query_id: impl Into<String>, ranked: Vec<(String, f64)>) -> Self {
        let items = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (passage_id, score))| Candidate {
                passage_id,
                score,
                rank: i + 1,
                label: 0,
                retriever_rank: Some(i + 1),
            })
            .collect();
        Self {
            query_id: query_id.into(),
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn passage_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|c| c.passage_id.as_str())
    }

    pub fn ranked(&self) -> Vec<(String, f64)> {
        self.items
            .iter()
            .map(|c| (c.passage_id.clone(), c.score))
            .collect()
    }
}

/// Orders `(id, score)` pairs by descending score, ties by ascending id, and keeps the first `k`.
pub fn top_k<'a, I>(scored: I, k: usize) -> Vec<(String, f64)>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut all: Vec<(&str, f64)> = scored.into_iter().collect();
    let cmp = |a: &(&str, f64), b: &(&str, f64)| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0));
    if all.len() > k {
        all.select_nth_unstable_by(k, cmp);
        all.truncate(k);
    }
    all.sort_unstable_by(cmp);
    all.into_iter().map(|(id, s)| (id.to_string(), s)).collect()
}
