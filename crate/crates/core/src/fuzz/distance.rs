//! Branch distance over recorded comparison operands.

use crate::lang::Rel;
use crate::vm::{ComparisonRecord, Dir};
use crate::Word;

/// Distance of operands `x`, `k` from satisfying `x rel k`.
///
/// Strict and non-strict orderings share one formula, so `x < k` at `x == k`
/// scores 0 like `x <= k` does.
pub fn rel_distance(rel: Rel, x: Word, k: Word) -> Word {
    match rel {
        Rel::Eq => {
            if x >= k {
                x - k
            } else {
                k - x
            }
        }
        Rel::Ne => Word::one(),
        Rel::Le | Rel::Lt => x.saturating_sub(k),
        Rel::Ge | Rel::Gt => k.saturating_sub(x),
    }
}

/// Distance of `record` from taking the `missed` direction of its site.
pub fn distance(record: &ComparisonRecord, missed: Dir) -> Word {
    let rel = match missed {
        Dir::Then => record.rel,
        Dir::Else => record.rel.negate(),
    };
    rel_distance(rel, record.x, record.k)
}
