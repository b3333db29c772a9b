use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::record::TensorRecord;
use crate::error::{Error, Result};
use crate::scope::ScopeFilter;

/// What to do when the three copies of a tensor disagree on shape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapePolicy {
    /// Any mismatch aborts alignment.
    #[default]
    Strict,
    /// Align the common leading sub-block; the anchor keeps its extra rows
    /// and columns unchanged.
    AnchorOverlap,
}

/// What to do with in-scope tensors of rank other than 1 or 2.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighRankPolicy {
    #[default]
    Reject,
    PassThrough,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignPolicy {
    pub shape: ShapePolicy,
    pub high_rank: HighRankPolicy,
}

/// Base, multilingual and anchor copies of one backbone parameter.
#[derive(Debug, Clone)]
pub struct AlignedTriple<'a> {
    pub name: String,
    pub base: Cow<'a, TensorRecord>,
    pub ml: Cow<'a, TensorRecord>,
    pub mm: Cow<'a, TensorRecord>,
    /// Full anchor shape when the triple covers only a leading sub-block.
    pub anchor_shape: Option<Vec<usize>>,
}

impl AlignedTriple<'_> {
    pub fn shape(&self) -> &[usize] {
        self.base.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassThroughReason {
    /// Only the anchor has this key (vision encoder, projector, ...).
    AnchorOnly,
    MissingFromBase,
    MissingFromMultilingual,
    OutOfScope,
    UnsupportedRank,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassThrough {
    pub name: String,
    pub reason: PassThroughReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeMismatchEntry {
    pub name: String,
    pub base: Vec<usize>,
    pub ml: Vec<usize>,
    pub anchor: Vec<usize>,
    /// Shape of the aligned leading block.
    pub aligned: Vec<usize>,
}

/// Bookkeeping for every key that did not become a plain triple.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub aligned: usize,
    pub passthrough: Vec<PassThrough>,
    /// Keys in base or multilingual that the anchor lacks. They cannot appear
    /// in the output, which is built on the anchor's key set.
    pub missing_from_anchor: Vec<String>,
    pub shape_mismatches: Vec<ShapeMismatchEntry>,
}

impl AlignmentReport {
    pub fn count(&self, reason: PassThroughReason) -> usize {
        self.passthrough.iter().filter(|p| p.reason == reason).count()
    }
}

/// Pairs up the three checkpoints over the anchor's key set.
///
/// Every anchor key ends up either in exactly one returned triple or in the
/// report's pass-through list.
pub fn align_triple<'a>(
    base: &'a Checkpoint,
    ml: &'a Checkpoint,
    anchor: &'a Checkpoint,
    scope: &ScopeFilter,
    policy: AlignPolicy,
) -> Result<(Vec<AlignedTriple<'a>>, AlignmentReport)> {
    let mut triples = Vec::new();
    let mut report = AlignmentReport::default();
    let mut pass = |name: &str, reason| {
        report.passthrough.push(PassThrough {
            name: name.to_string(),
            reason,
        })
    };
    let mut mismatches = Vec::new();

    for mm in anchor.iter() {
        let name = mm.name();
        let (b, m) = match (base.get(name), ml.get(name)) {
            (None, None) => {
                pass(name, PassThroughReason::AnchorOnly);
                continue;
            }
            (None, Some(_)) => {
                pass(name, PassThroughReason::MissingFromBase);
                continue;
            }
            (Some(_), None) => {
                pass(name, PassThroughReason::MissingFromMultilingual);
                continue;
            }
            (Some(b), Some(m)) => (b, m),
        };
        if !scope.admits(name) {
            pass(name, PassThroughReason::OutOfScope);
            continue;
        }
        let rank = mm.rank();
        if !(1..=2).contains(&rank) {
            match policy.high_rank {
                HighRankPolicy::Reject => {
                    return Err(Error::UnsupportedRank {
                        name: name.to_string(),
                        rank,
                    })
                }
                HighRankPolicy::PassThrough => {
                    pass(name, PassThroughReason::UnsupportedRank);
                    continue;
                }
            }
        }

        if b.shape() == mm.shape() && m.shape() == mm.shape() {
            triples.push(AlignedTriple {
                name: name.to_string(),
                base: Cow::Borrowed(b),
                ml: Cow::Borrowed(m),
                mm: Cow::Borrowed(mm),
                anchor_shape: None,
            });
            continue;
        }

        let mismatch = || Error::ShapeMismatch {
            name: name.to_string(),
            base: b.shape().to_vec(),
            ml: m.shape().to_vec(),
            anchor: mm.shape().to_vec(),
        };
        if policy.shape == ShapePolicy::Strict || b.rank() != rank || m.rank() != rank {
            return Err(mismatch());
        }
        let overlap: Vec<usize> = (0..rank)
            .map(|i| b.shape()[i].min(m.shape()[i]).min(mm.shape()[i]))
            .collect();
        mismatches.push(ShapeMismatchEntry {
            name: name.to_string(),
            base: b.shape().to_vec(),
            ml: m.shape().to_vec(),
            anchor: mm.shape().to_vec(),
            aligned: overlap.clone(),
        });
        let crop = |r: &'a TensorRecord| -> Cow<'a, TensorRecord> {
            if r.shape() == overlap.as_slice() {
                Cow::Borrowed(r)
            } else {
                Cow::Owned(r.leading_block(&overlap))
            }
        };
        triples.push(AlignedTriple {
            name: name.to_string(),
            base: crop(b),
            ml: crop(m),
            mm: crop(mm),
            anchor_shape: (overlap.as_slice() != mm.shape()).then(|| mm.shape().to_vec()),
        });
    }

    report.missing_from_anchor = base
        .names()
        .chain(ml.names())
        .filter(|n| !anchor.contains(n))
        .map(str::to_string)
        .collect();
    report.missing_from_anchor.sort();
    report.missing_from_anchor.dedup();
    report.shape_mismatches = mismatches;
    report.aligned = triples.len();
    Ok((triples, report))
}
