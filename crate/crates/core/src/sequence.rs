//! Invocation ordering by global read/write dependencies, and sequence
//! prolongation.

use std::collections::BTreeMap;

use crate::fuzz::TestCase;
use crate::lang::{AccessTable, Contract};
use crate::vm::FunctionCall;

/// Order priority per function name.
pub type OrderPriority = BTreeMap<String, u64>;

/// One instantiation of the ordered sequence with concrete inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceVariant {
    pub calls: Vec<FunctionCall>,
}

/// OP_i sums, over every other function j and every pair of accesses
/// (k in i, p in j) to the same global, 1 when i writes and j reads.
pub fn order_priority(accesses: &AccessTable) -> OrderPriority {
    let mut writes: BTreeMap<&str, BTreeMap<&str, u64>> = BTreeMap::new();
    let mut reads: BTreeMap<&str, BTreeMap<&str, u64>> = BTreeMap::new();
    for (f, list) in accesses {
        for a in list {
            let table = if a.op.bit() == 0 {
                &mut writes
            } else {
                &mut reads
            };
            *table.entry(f).or_default().entry(&a.var).or_default() += 1;
        }
    }
    let empty = BTreeMap::new();
    accesses
        .keys()
        .map(|i| {
            let wi = writes.get(i.as_str()).unwrap_or(&empty);
            let op = accesses
                .keys()
                .filter(|j| *j != i)
                .map(|j| {
                    let rj = reads.get(j.as_str()).unwrap_or(&empty);
                    wi.iter()
                        .map(|(var, n)| n * rj.get(var).copied().unwrap_or(0))
                        .sum::<u64>()
                })
                .sum();
            (i.clone(), op)
        })
        .collect()
}

/// Function names sorted by order priority, highest first. Ties keep
/// declaration order.
pub fn build_sequence(contract: &Contract) -> Vec<String> {
    let op = order_priority(&contract.accesses);
    let mut names: Vec<&str> = contract.functions.iter().map(|f| f.name.as_str()).collect();
    names.sort_by_key(|n| std::cmp::Reverse(op.get(*n).copied().unwrap_or(0)));
    names.into_iter().map(String::from).collect()
}

fn param_count(v: &SequenceVariant) -> usize {
    v.calls.iter().map(|c| c.args.len()).sum()
}

fn differing_params(a: &SequenceVariant, b: &SequenceVariant) -> usize {
    a.calls
        .iter()
        .zip(&b.calls)
        .map(|(x, y)| x.args.iter().zip(&y.args).filter(|(p, q)| p != q).count())
        .sum()
}

/// Index pairs `(i, j)`, `i < j`, whose variants differ in enough
/// parameters: one when the sequence takes at most two parameters in total,
/// two otherwise.
pub fn select_pairs(variants: &[SequenceVariant]) -> Vec<(usize, usize)> {
    let Some(first) = variants.first() else {
        return Vec::new();
    };
    let need = if param_count(first) <= 2 { 1 } else { 2 };
    let mut pairs = Vec::new();
    for i in 0..variants.len() {
        for j in i + 1..variants.len() {
            if differing_params(&variants[i], &variants[j]) >= need {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// `si` followed by `sj`, run without resetting state in between.
pub fn prolong(si: &SequenceVariant, sj: &SequenceVariant) -> TestCase {
    let calls = si.calls.iter().chain(&sj.calls).cloned().collect();
    TestCase::from_calls(calls)
}
