//! Edit distance, character error rates and permutation-min multi-speaker scoring.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

/// Minimal edit script counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

/// Levenshtein distance from `reference` to `hypothesis`. Among minimal
/// scripts, the backtrace prefers substitutions, then deletions, then insertions.
pub fn edit_distance<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut counts = EditCounts {
        distance: d[n][m],
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]) {
            if reference[i - 1] != hypothesis[j - 1] {
                counts.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// `distance / max(1, |ref|)`; the flag is set for an empty reference.
pub fn cer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> (f64, bool) {
    let d = edit_distance(hypothesis, reference).distance;
    (d as f64 / reference.len().max(1) as f64, reference.is_empty())
}

/// Scoring of one mixture. References are in energy order (index 0 is the
/// higher-energy speaker), so `per_reference_cer[0]` is the high-energy CER.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// CER of the hypothesis assigned to each reference.
    pub per_reference_cer: Vec<f64>,
    pub per_reference_errors: Vec<EditCounts>,
    pub reference_lengths: Vec<usize>,
    pub average_cer: f64,
    /// `permutation[v]`: hypothesis index scored against reference `v`.
    pub permutation: Vec<usize>,
    pub empty_reference: bool,
}

impl ScoreReport {
    pub fn high_energy_cer(&self) -> f64 {
        self.per_reference_cer[0]
    }

    pub fn low_energy_cer(&self) -> f64 {
        *self.per_reference_cer.last().unwrap()
    }
}

/// Chooses the hypothesis-to-reference pairing with the least total edit
/// distance (lexicographically first among ties). A single hypothesis is
/// duplicated against every reference.
pub fn score_multi<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> ScoreReport {
    let s = references.len();
    assert!(s > 0, "at least one reference");
    assert!(
        hypotheses.len() == 1 || hypotheses.len() == s,
        "hypothesis count must be 1 or match the references"
    );
    let hyp = |k: usize| if hypotheses.len() == 1 { &hypotheses[0] } else { &hypotheses[k] };
    let errs: Vec<Vec<EditCounts>> = (0..s)
        .map(|v| (0..s).map(|k| edit_distance(hyp(k), &references[v])).collect())
        .collect();
    let mut best: Option<(Vec<usize>, usize)> = None;
    for perm in (0..s).permutations(s) {
        let total = perm.iter().enumerate().map(|(v, &k)| errs[v][k].distance).sum();
        if best.as_ref().is_none_or(|(_, b)| total < *b) {
            best = Some((perm, total));
        }
    }
    let (permutation, _) = best.expect("at least one permutation");
    let per_reference_errors: Vec<EditCounts> = permutation.iter().enumerate().map(|(v, &k)| errs[v][k]).collect();
    let per_reference_cer: Vec<f64> = per_reference_errors
        .iter()
        .zip(references)
        .map(|(e, r)| e.distance as f64 / r.len().max(1) as f64)
        .collect();
    ScoreReport {
        average_cer: per_reference_cer.iter().sum::<f64>() / s as f64,
        per_reference_cer,
        per_reference_errors,
        reference_lengths: references.iter().map(Vec::len).collect(),
        permutation,
        empty_reference: references.iter().any(Vec::is_empty),
    }
}

/// Corpus-level CERs: total errors over total reference characters, per
/// energy rank, and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub utterances: usize,
    pub per_rank_cer: Vec<f64>,
    pub per_rank_errors: Vec<EditCounts>,
    pub per_rank_chars: Vec<usize>,
    pub average_cer: f64,
}

pub fn corpus_score(reports: &[ScoreReport]) -> CorpusScore {
    let s = reports.first().map_or(0, |r| r.per_reference_cer.len());
    let mut errors = vec![EditCounts::default(); s];
    let mut chars = vec![0usize; s];
    for r in reports {
        for v in 0..s {
            let e = r.per_reference_errors[v];
            errors[v].distance += e.distance;
            errors[v].substitutions += e.substitutions;
            errors[v].deletions += e.deletions;
            errors[v].insertions += e.insertions;
            chars[v] += r.reference_lengths[v];
        }
    }
    let per_rank_cer: Vec<f64> = errors
        .iter()
        .zip(&chars)
        .map(|(e, &c)| e.distance as f64 / c.max(1) as f64)
        .collect();
    CorpusScore {
        utterances: reports.len(),
        average_cer: if s == 0 { 0.0 } else { per_rank_cer.iter().sum::<f64>() / s as f64 },
        per_rank_cer,
        per_rank_errors: errors,
        per_rank_chars: chars,
    }
}

/// Plain-text table in the layout `Model | High E. spk. | Low E. spk. | Avg.`, CER in percent.
pub fn format_table(rows: &[(String, CorpusScore)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "{:<width$}  {:>12}  {:>12}  {:>6}\n",
        "Model", "High E. spk.", "Low E. spk.", "Avg."
    );
    out.push_str(&format!("{}\n", "-".repeat(width + 38)));
    for (name, s) in rows {
        let high = s.per_rank_cer.first().copied().unwrap_or(0.0) * 100.0;
        let low = s.per_rank_cer.last().copied().unwrap_or(0.0) * 100.0;
        out.push_str(&format!(
            "{name:<width$}  {high:>12.1}  {low:>12.1}  {:>6.1}\n",
            s.average_cer * 100.0
        ));
    }
    out
}
