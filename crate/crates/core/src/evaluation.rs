//! Entity-level precision, recall and F1 under BIO2 with exact span matching.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::{EntityType, Tag};

/// A typed entity over tokens `start..end` (end exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub kind: EntityType,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(kind: EntityType, start: usize, end: usize) -> Self {
        debug_assert!(start < end);
        EntitySpan { kind, start, end }
    }
}

/// How an `I-X` without a matching predecessor is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpanMode {
    /// Start a new span at the orphan `I-X` (conlleval behaviour).
    #[default]
    Lenient,
    /// Drop orphan `I-X` tokens.
    Strict,
}

/// Maximal `B-X I-X*` runs, in order of their start.
pub fn extract_spans(tags: &[Tag], mode: SpanMode) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(EntityType, usize)> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            Tag::O => {
                if let Some((k, s)) = open.take() {
                    spans.push(EntitySpan::new(k, s, i));
                }
            }
            Tag::B(k) => {
                if let Some((pk, s)) = open.take() {
                    spans.push(EntitySpan::new(pk, s, i));
                }
                open = Some((k, i));
            }
            Tag::I(k) => match open {
                Some((pk, _)) if pk == k => {}
                _ => {
                    if let Some((pk, s)) = open.take() {
                        spans.push(EntitySpan::new(pk, s, i));
                    }
                    if mode == SpanMode::Lenient {
                        open = Some((k, i));
                    }
                }
            },
        }
    }
    if let Some((k, s)) = open {
        spans.push(EntitySpan::new(k, s, tags.len()));
    }
    spans
}

/// Parse tag strings and extract spans; unknown tags are an error.
pub fn extract_spans_str<S: AsRef<str>>(tags: &[S], mode: SpanMode) -> Result<Vec<EntitySpan>> {
    let parsed = tags.iter().map(|t| t.as_ref().parse()).collect::<Result<Vec<Tag>>>()?;
    Ok(extract_spans(&parsed, mode))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    /// `2c / (g + p)`, the harmonic mean of precision and recall.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.correct, self.gold + self.predicted)
    }

    fn add(&mut self, other: Counts) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.correct += other.correct;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub overall: Counts,
    /// Indexed by [`EntityType::index`].
    pub per_type: [Counts; 4],
}

impl EvalReport {
    pub fn precision(&self) -> f64 {
        self.overall.precision()
    }

    pub fn recall(&self) -> f64 {
        self.overall.recall()
    }

    pub fn f1(&self) -> f64 {
        self.overall.f1()
    }

    pub fn category(&self, kind: EntityType) -> &Counts {
        &self.per_type[kind.index()]
    }

    /// Fold one sentence into the running counts.
    pub fn add_sentence(&mut self, gold: &[Tag], predicted: &[Tag], mode: SpanMode) -> Result<()> {
        if gold.len() != predicted.len() {
            return Err(Error::Contract(format!(
                "gold has {} tags but prediction has {}",
                gold.len(),
                predicted.len()
            )));
        }
        let g = extract_spans(gold, mode);
        let p = extract_spans(predicted, mode);
        let gset: HashSet<EntitySpan> = g.iter().copied().collect();
        for kind in EntityType::ALL {
            let c = Counts {
                gold: g.iter().filter(|s| s.kind == kind).count(),
                predicted: p.iter().filter(|s| s.kind == kind).count(),
                correct: p.iter().filter(|s| s.kind == kind && gset.contains(s)).count(),
            };
            self.per_type[kind.index()].add(c);
            self.overall.add(c);
        }
        Ok(())
    }

    /// Aligned human-readable table.
    pub fn to_table(&self, per_category: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>9} {:>9} {:>9} {:>6} {:>6} {:>7}", "", "precision", "recall", "f1", "gold", "pred", "correct");
        let mut row = |name: &str, c: &Counts| {
            let _ = writeln!(
                out,
                "{:<10} {:>9.2} {:>9.2} {:>9.2} {:>6} {:>6} {:>7}",
                name,
                100.0 * c.precision(),
                100.0 * c.recall(),
                100.0 * c.f1(),
                c.gold,
                c.predicted,
                c.correct
            );
        };
        row("overall", &self.overall);
        if per_category {
            for kind in EntityType::ALL {
                row(kind.as_str(), &self.per_type[kind.index()]);
            }
        }
        out
    }

    /// `category,precision,recall,f1,gold,predicted,correct` rows: overall
    /// first, then one per entity type.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,precision,recall,f1,gold,predicted,correct\n");
        let mut row = |name: &str, c: &Counts| {
            let _ = writeln!(
                out,
                "{name},{:.6},{:.6},{:.6},{},{},{}",
                c.precision(),
                c.recall(),
                c.f1(),
                c.gold,
                c.predicted,
                c.correct
            );
        };
        row("overall", &self.overall);
        for kind in EntityType::ALL {
            row(kind.as_str(), &self.per_type[kind.index()]);
        }
        out
    }
}

/// Micro-averaged exact-match scores over aligned sentences.
pub fn prf1<G, P>(gold: &[G], predicted: &[P], mode: SpanMode) -> Result<EvalReport>
where
    G: AsRef<[Tag]>,
    P: AsRef<[Tag]>,
{
    if gold.len() != predicted.len() {
        return Err(Error::Contract(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            predicted.len()
        )));
    }
    let mut report = EvalReport::default();
    for (g, p) in gold.iter().zip(predicted) {
        report.add_sentence(g.as_ref(), p.as_ref(), mode)?;
    }
    Ok(report)
}

/// Fraction of tokens whose tag matches; a debugging aid only.
pub fn token_accuracy<G: AsRef<[Tag]>, P: AsRef<[Tag]>>(gold: &[G], predicted: &[P]) -> f64 {
    let mut hit = 0;
    let mut total = 0;
    for (g, p) in gold.iter().zip(predicted) {
        for (a, b) in g.as_ref().iter().zip(p.as_ref()) {
            total += 1;
            hit += usize::from(a == b);
        }
    }
    ratio(hit, total)
}
