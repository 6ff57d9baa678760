//! Instrumented operation counters.
//!
//! Kernels route their contractions and softmaxes through this module so
//! that, inside [`measure`], every op records the flops it performs (2 per
//! multiply-add, filed under the tensor it produces) and the words it
//! touches (one per element of every operand and result, filed under the
//! tensor's name). Outside a measurement scope recording is a no-op.

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::{contract, masked_softmax, Equation, Tensor};
use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub flops: BTreeMap<String, u64>,
    pub words: BTreeMap<String, u64>,
}

impl OpCounts {
    pub fn add_flops(&mut self, name: &str, n: u64) {
        *self.flops.entry(name.to_string()).or_default() += n;
    }

    pub fn add_words(&mut self, name: &str, n: u64) {
        *self.words.entry(name.to_string()).or_default() += n;
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.values().sum()
    }

    pub fn total_words(&self) -> u64 {
        self.words.values().sum()
    }

    pub fn words_of(&self, name: &str) -> u64 {
        self.words.get(name).copied().unwrap_or(0)
    }

    pub fn flops_of(&self, name: &str) -> u64 {
        self.flops.get(name).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &OpCounts) {
        for (k, v) in &other.flops {
            self.add_flops(k, *v);
        }
        for (k, v) in &other.words {
            self.add_words(k, *v);
        }
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<OpCounts>> = const { RefCell::new(None) };
}

/// Runs `f` and returns what it recorded. Nested scopes also credit the
/// enclosing scope.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpCounts) {
    let outer = ACTIVE.with(|a| a.borrow_mut().replace(OpCounts::default()));
    let result = f();
    let counted = ACTIVE.with(|a| a.borrow_mut().take()).unwrap_or_default();
    let restored = outer.map(|mut o| {
        o.merge(&counted);
        o
    });
    ACTIVE.with(|a| *a.borrow_mut() = restored);
    (result, counted)
}

pub fn is_active() -> bool {
    ACTIVE.with(|a| a.borrow().is_some())
}

pub(crate) fn record(f: impl FnOnce(&mut OpCounts)) {
    ACTIVE.with(|a| {
        if let Some(counts) = a.borrow_mut().as_mut() {
            f(counts);
        }
    });
}

/// [`contract`] that records `names = [lhs, rhs, out]`.
pub fn contract_named(a: &Tensor, b: &Tensor, sig: &str, names: [&str; 3]) -> Result<Tensor> {
    let sig = Equation::parse(sig)?;
    let out = contract(a, b, &sig)?;
    if is_active() {
        let flops = sig.flops(a.shape(), b.shape())?;
        record(|c| {
            c.add_flops(names[2], flops);
            c.add_words(names[0], a.len() as u64);
            c.add_words(names[1], b.len() as u64);
            c.add_words(names[2], out.len() as u64);
        });
    }
    Ok(out)
}

/// [`masked_softmax`] that records `names = [logits, mask, weights]`.
/// Softmax contributes no flops.
pub fn softmax_named(logits: &Tensor, mask: Option<&Tensor>, names: [&str; 3]) -> Result<Tensor> {
    let out = masked_softmax(logits, mask)?;
    record(|c| {
        c.add_words(names[0], logits.len() as u64);
        if let Some(mask) = mask {
            c.add_words(names[1], mask.len() as u64);
        }
        c.add_words(names[2], out.len() as u64);
    });
    Ok(out)
}
