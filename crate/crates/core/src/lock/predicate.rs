use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::types::Value;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Endpoint {
    pub value: Value,
    pub inclusive: bool,
}

/// Interval over field values; a missing endpoint is unbounded.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Interval {
    #[cfg_attr(feature = "serde", serde(default))]
    pub lo: Option<Endpoint>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub hi: Option<Endpoint>,
}

impl Interval {
    pub fn exactly(v: impl Into<Value>) -> Self {
        let v = v.into();
        Interval {
            lo: Some(Endpoint { value: v.clone(), inclusive: true }),
            hi: Some(Endpoint { value: v, inclusive: true }),
        }
    }

    pub fn less_than(v: impl Into<Value>) -> Self {
        Interval { lo: None, hi: Some(Endpoint { value: v.into(), inclusive: false }) }
    }

    pub fn at_least(v: impl Into<Value>) -> Self {
        Interval { lo: Some(Endpoint { value: v.into(), inclusive: true }), hi: None }
    }

    pub fn between(lo: impl Into<Value>, hi: impl Into<Value>) -> Self {
        Interval {
            lo: Some(Endpoint { value: lo.into(), inclusive: true }),
            hi: Some(Endpoint { value: hi.into(), inclusive: true }),
        }
    }

    pub fn unbounded() -> Self {
        Interval { lo: None, hi: None }
    }

    pub fn contains(&self, v: &Value) -> bool {
        let above = match &self.lo {
            None => true,
            Some(e) => match v.cmp(&e.value) {
                Ordering::Greater => true,
                Ordering::Equal => e.inclusive,
                Ordering::Less => false,
            },
        };
        let below = match &self.hi {
            None => true,
            Some(e) => match v.cmp(&e.value) {
                Ordering::Less => true,
                Ordering::Equal => e.inclusive,
                Ordering::Greater => false,
            },
        };
        above && below
    }

    /// Whether the interval admits at least one value (on a dense order).
    pub fn is_well_ordered(&self) -> bool {
        match (&self.lo, &self.hi) {
            (Some(lo), Some(hi)) => match lo.value.cmp(&hi.value) {
                Ordering::Less => true,
                Ordering::Equal => lo.inclusive && hi.inclusive,
                Ordering::Greater => false,
            },
            _ => true,
        }
    }

    pub fn intersects(&self, other: &Interval) -> bool {
        let lo = tighter(&self.lo, &other.lo, Ordering::Greater);
        let hi = tighter(&self.hi, &other.hi, Ordering::Less);
        Interval { lo, hi }.is_well_ordered()
    }
}

/// Picks the more restrictive of two endpoints; `prefer` is the ordering that
/// makes a bound tighter (`Greater` for lower bounds, `Less` for upper).
fn tighter(a: &Option<Endpoint>, b: &Option<Endpoint>, prefer: Ordering) -> Option<Endpoint> {
    match (a, b) {
        (None, x) | (x, None) => x.clone(),
        (Some(a), Some(b)) => match a.value.cmp(&b.value) {
            o if o == prefer => Some(a.clone()),
            Ordering::Equal => Some(Endpoint { value: a.value.clone(), inclusive: a.inclusive && b.inclusive }),
            _ => Some(b.clone()),
        },
    }
}

/// Conjunction of per-field interval constraints.
pub type Conjunct = BTreeMap<String, Interval>;

/// A predicate over one table in disjunctive normal form.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Predicate {
    pub table: String,
    pub disjuncts: Vec<Conjunct>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PredicateError {
    #[error("predicate has no disjuncts")]
    Empty,
    #[error("disjunct {0} is an empty conjunction")]
    EmptyConjunct(usize),
    #[error("interval on field {field:?} in disjunct {disjunct} has lo > hi")]
    Inverted { disjunct: usize, field: String },
}

impl Predicate {
    pub fn new(table: impl Into<String>, disjuncts: Vec<Conjunct>) -> Self {
        Predicate { table: table.into(), disjuncts }
    }

    /// Single-conjunct predicate from `(field, interval)` pairs.
    pub fn all<I, K>(table: impl Into<String>, constraints: I) -> Self
    where
        I: IntoIterator<Item = (K, Interval)>,
        K: Into<String>,
    {
        let conj = constraints.into_iter().map(|(k, i)| (k.into(), i)).collect();
        Predicate::new(table, alloc::vec![conj])
    }

    /// The predicate satisfied by exactly this row (every field pinned).
    pub fn point(table: impl Into<String>, row: &Value) -> Self {
        let conj: Conjunct = match row {
            Value::Record(fields) => fields.iter().map(|(k, v)| (k.clone(), Interval::exactly(v.clone()))).collect(),
            other => [(String::from("value"), Interval::exactly(other.clone()))].into(),
        };
        Predicate::new(table, alloc::vec![conj])
    }

    pub fn validate(&self) -> Result<(), PredicateError> {
        if self.disjuncts.is_empty() {
            return Err(PredicateError::Empty);
        }
        for (i, conj) in self.disjuncts.iter().enumerate() {
            if conj.is_empty() {
                return Err(PredicateError::EmptyConjunct(i));
            }
            for (field, iv) in conj {
                if !iv.is_well_ordered() {
                    return Err(PredicateError::Inverted { disjunct: i, field: field.clone() });
                }
            }
        }
        Ok(())
    }

    /// Whether `row` satisfies the predicate. Non-record values expose a
    /// single field named `value`; a missing field never matches.
    pub fn matches(&self, row: &Value) -> bool {
        self.disjuncts.iter().any(|conj| {
            conj.iter().all(|(field, iv)| {
                let v = match row {
                    Value::Record(_) => row.field(field),
                    other if field == "value" => Some(other),
                    _ => None,
                };
                v.is_some_and(|v| iv.contains(v))
            })
        })
    }

    /// Whether some row could satisfy both predicates. Fields constrained by
    /// only one side are unconstrained on the other.
    pub fn mutually_satisfiable(&self, other: &Predicate) -> bool {
        if self.table != other.table {
            return false;
        }
        self.disjuncts.iter().any(|a| {
            other.disjuncts.iter().any(|b| {
                a.iter().all(|(field, ia)| b.get(field).is_none_or(|ib| ia.intersects(ib)))
            })
        })
    }
}
