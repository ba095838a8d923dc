//! Intent accuracy, entity-level slot F1 and overall (sentence) accuracy.

use serde::{Deserialize, Serialize};

use crate::data::parse_tag;

/// A labelled span `[start, end]` (inclusive token indices).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Chunk {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

/// Maximal `B-X (I-X)*` runs. An `I-X` that does not continue a chunk of
/// type `X` starts nothing and ends any open chunk.
pub fn chunks<S: AsRef<str>>(tags: &[S]) -> Vec<Chunk> {
    let mut out = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let parsed = parse_tag(tag.as_ref());
        let continues = matches!(
            (&open, parsed),
            (Some((label, _)), Some(('I', ty))) if label == ty
        );
        if continues {
            continue;
        }
        if let Some((label, start)) = open.take() {
            out.push(Chunk {
                label,
                start,
                end: i - 1,
            });
        }
        if let Some(('B', ty)) = parsed {
            open = Some((ty.to_string(), i));
        }
    }
    if let Some((label, start)) = open {
        out.push(Chunk {
            label,
            start,
            end: tags.len() - 1,
        });
    }
    out
}

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub intent_acc: f64,
    pub slot_f1: f64,
    pub overall_acc: f64,
}

impl Metrics {
    /// Same values rounded to two decimals, as printed by the CLI.
    pub fn rounded(&self) -> Metrics {
        let r = |x: f64| (x * 100.0).round() / 100.0;
        Metrics {
            intent_acc: r(self.intent_acc),
            slot_f1: r(self.slot_f1),
            overall_acc: r(self.overall_acc),
        }
    }
}

/// Gold or predicted labels of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub intent: String,
    pub slots: Vec<String>,
}

/// Accumulates corpus-level counts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricCounts {
    pub utterances: usize,
    pub intent_correct: usize,
    pub overall_correct: usize,
    pub sequence_correct: usize,
    pub chunks_correct: usize,
    pub chunks_predicted: usize,
    pub chunks_gold: usize,
}

impl MetricCounts {
    pub fn add(&mut self, gold: &Labels, pred: &Labels) {
        let intent_ok = gold.intent == pred.intent;
        let seq_ok = gold.slots == pred.slots;
        let gold_chunks = chunks(&gold.slots);
        let pred_chunks = chunks(&pred.slots);
        self.utterances += 1;
        self.intent_correct += intent_ok as usize;
        self.sequence_correct += seq_ok as usize;
        self.overall_correct += (intent_ok && seq_ok) as usize;
        self.chunks_gold += gold_chunks.len();
        self.chunks_predicted += pred_chunks.len();
        self.chunks_correct += pred_chunks
            .iter()
            .filter(|c| gold_chunks.contains(c))
            .count();
    }

    pub fn merge(&mut self, other: &MetricCounts) {
        self.utterances += other.utterances;
        self.intent_correct += other.intent_correct;
        self.overall_correct += other.overall_correct;
        self.sequence_correct += other.sequence_correct;
        self.chunks_correct += other.chunks_correct;
        self.chunks_predicted += other.chunks_predicted;
        self.chunks_gold += other.chunks_gold;
    }

    /// Micro F1 over chunks as a fraction; 1 when neither side has chunks.
    pub fn slot_f1(&self) -> f64 {
        let denom = self.chunks_predicted + self.chunks_gold;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.chunks_correct as f64 / denom as f64
        }
    }

    pub fn sequence_acc(&self) -> f64 {
        ratio(self.sequence_correct, self.utterances)
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            intent_acc: 100.0 * ratio(self.intent_correct, self.utterances),
            slot_f1: 100.0 * self.slot_f1(),
            overall_acc: 100.0 * ratio(self.overall_correct, self.utterances),
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn score(gold: &[Labels], pred: &[Labels]) -> MetricCounts {
    let mut counts = MetricCounts::default();
    for (g, p) in gold.iter().zip(pred) {
        counts.add(g, p);
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn chunk(label: &str, start: usize, end: usize) -> Chunk {
        Chunk {
            label: label.into(),
            start,
            end,
        }
    }

    #[test]
    fn chunk_extraction() {
        assert_eq!(
            chunks(&tags("O B-song I-song O B-artist")),
            vec![chunk("song", 1, 2), chunk("artist", 4, 4)]
        );
        assert_eq!(
            chunks(&tags("B-a B-a I-a I-b")),
            vec![chunk("a", 0, 0), chunk("a", 1, 2)]
        );
        assert!(chunks(&tags("I-a I-a O")).is_empty());
        assert!(chunks::<String>(&[]).is_empty());
    }

    #[test]
    fn identical_predictions_score_perfectly() {
        let g = vec![Labels {
            intent: "x".into(),
            slots: tags("B-a I-a O"),
        }];
        assert_eq!(
            score(&g, &g).metrics(),
            Metrics {
                intent_acc: 100.0,
                slot_f1: 100.0,
                overall_acc: 100.0
            }
        );
    }

    #[test]
    fn one_spurious_chunk() {
        // gold {(song,1,2)}, predicted {(song,1,2),(artist,3,3)}
        let gold = Labels {
            intent: "x".into(),
            slots: tags("O B-song I-song O"),
        };
        let pred = Labels {
            intent: "x".into(),
            slots: tags("O B-song I-song B-artist"),
        };
        let c = score(&[gold], &[pred]);
        assert_eq!(
            (c.chunks_correct, c.chunks_predicted, c.chunks_gold),
            (1, 2, 1)
        );
        assert!((c.slot_f1() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn wrong_slot_tag_breaks_overall_only() {
        let gold = Labels {
            intent: "x".into(),
            slots: tags("B-a O"),
        };
        let pred = Labels {
            intent: "x".into(),
            slots: tags("B-a B-b"),
        };
        let m = score(&[gold], &[pred]).metrics();
        assert_eq!(m.intent_acc, 100.0);
        assert_eq!(m.overall_acc, 0.0);
    }

    #[test]
    fn rounding_to_two_decimals() {
        let m = Metrics {
            intent_acc: 66.666666,
            slot_f1: 12.345,
            overall_acc: 100.0,
        }
        .rounded();
        assert_eq!(m.intent_acc, 66.67);
        assert_eq!(m.overall_acc, 100.0);
    }
}
