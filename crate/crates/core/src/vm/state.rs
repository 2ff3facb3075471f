use std::collections::BTreeMap;

use crate::lang::ast::Type;
use crate::lang::Program;
use crate::Word;

/// Address of the contract under test.
pub fn contract_address() -> Word {
    Word::from(0xc0ffee_u64)
}

/// Caller pool. Index 0 is the attacker contract whose fallback can re-enter
/// the contract; the others are plain accounts.
pub fn callers() -> [Word; 3] {
    [
        Word::from(0xa77ac_u64),
        Word::from(0x1001_u64),
        Word::from(0x1002_u64),
    ]
}

pub fn attacker() -> Word {
    callers()[0]
}

/// One ether in base units.
pub fn ether() -> Word {
    Word::exp10(18)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldState {
    /// One word per global; mapping globals keep their entries in `maps`.
    pub storage: Vec<Word>,
    pub maps: Vec<BTreeMap<Word, Word>>,
    pub balances: BTreeMap<Word, Word>,
    pub contract_balance: Word,
}

impl WorldState {
    /// Deployment state: globals at their initializers, every caller funded
    /// with 1000 ether and the contract pre-funded with `endowment`.
    pub fn genesis(program: &Program, endowment: Word) -> Self {
        let storage = program
            .globals
            .iter()
            .map(|g| {
                if g.ty == Type::Map {
                    Word::zero()
                } else {
                    g.init
                }
            })
            .collect();
        let maps = program.globals.iter().map(|_| BTreeMap::new()).collect();
        let balances = callers()
            .into_iter()
            .map(|a| (a, ether() * Word::from(1000)))
            .collect();
        WorldState {
            storage,
            maps,
            balances,
            contract_balance: endowment,
        }
    }

    pub fn balance_of(&self, addr: Word) -> Word {
        self.balances.get(&addr).copied().unwrap_or_default()
    }

    pub fn map_get(&self, slot: usize, key: Word) -> Word {
        self.maps[slot].get(&key).copied().unwrap_or_default()
    }

    pub fn map_set(&mut self, slot: usize, key: Word, value: Word) {
        if value.is_zero() {
            self.maps[slot].remove(&key);
        } else {
            self.maps[slot].insert(key, value);
        }
    }

    /// Sum of every account balance plus the contract balance, or `None`
    /// if it does not fit a word.
    pub fn total_value(&self) -> Option<Word> {
        self.balances
            .values()
            .try_fold(self.contract_balance, |acc, v| acc.checked_add(*v))
    }

    pub fn credit(&mut self, addr: Word, amount: Word) {
        let entry = self.balances.entry(addr).or_default();
        *entry = entry.overflowing_add(amount).0;
    }
}
