//! Multigranularity locking.
//!
//! Lockable resources form a hierarchy (database, area, file, record) with an
//! optional second parent for records reached through an index. A transaction
//! announces finer-grained locks with intention modes on every ancestor, so a
//! coarse S or X lock and a fine lock underneath it conflict on the ancestor.
//! Predicate locks cover rows by value rather than identity and close the
//! phantom gap that record locks leave open.

mod predicate;
mod table;
mod trace;

pub use predicate::{Conjunct, Endpoint, Interval, Predicate, PredicateError};
pub use table::{cycle_in, simple_cycles, LockError, LockOutcome, LockTable, Policy, ResourceId, Target, Woken};
pub use trace::{two_phase_check, LockEvent, LockEventKind};

use core::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LockMode {
    IS,
    IX,
    S,
    SIX,
    X,
}

impl LockMode {
    pub const ALL: [LockMode; 5] = [LockMode::IS, LockMode::IX, LockMode::S, LockMode::SIX, LockMode::X];

    fn index(self) -> usize {
        self as usize
    }

    /// Least mode that grants at least the rights of both `self` and `other`.
    pub fn join(self, other: LockMode) -> LockMode {
        use LockMode::*;
        match (self, other) {
            (a, b) if a == b => a,
            (X, _) | (_, X) => X,
            (SIX, _) | (_, SIX) => SIX,
            (S, IX) | (IX, S) => SIX,
            (S, IS) | (IS, S) => S,
            (IX, IS) | (IS, IX) => IX,
            _ => unreachable!("all pairs covered"),
        }
    }

    /// Whether holding `self` already grants everything `other` asks for.
    pub fn covers(self, other: LockMode) -> bool {
        self.join(other) == self
    }

    /// Modes a parent must hold before this mode may be requested on a child.
    pub fn parent_allows(self, parent: LockMode) -> bool {
        use LockMode::*;
        match self {
            IS | S => true,
            IX | SIX | X => matches!(parent, IX | SIX | X),
        }
    }
}

impl fmt::Display for LockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

// Rows and columns ordered IS, IX, S, SIX, X.
const COMPAT: [[bool; 5]; 5] = [
    [true, true, true, true, false],
    [true, true, false, false, false],
    [true, false, true, false, false],
    [true, false, false, false, false],
    [false, false, false, false, false],
];

pub fn compatible(a: LockMode, b: LockMode) -> bool {
    COMPAT[a.index()][b.index()]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Duration {
    Short,
    Long,
}

/// Degrees of consistency 0 through 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Degree {
    D0,
    D1,
    D2,
    D3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
}

/// The lock a transaction at `degree` takes before performing `access`.
pub fn lock_plan_for(degree: Degree, access: Access) -> Option<(LockMode, Duration)> {
    use Duration::*;
    match (degree, access) {
        (Degree::D0, Access::Write) => Some((LockMode::X, Short)),
        (_, Access::Write) => Some((LockMode::X, Long)),
        (Degree::D0 | Degree::D1, Access::Read) => None,
        (Degree::D2, Access::Read) => Some((LockMode::S, Short)),
        (Degree::D3, Access::Read) => Some((LockMode::S, Long)),
    }
}

#[cfg(test)]
mod tests {
    use super::LockMode::*;
    use super::*;

    #[test]
    fn stated_entries() {
        assert!(compatible(S, S));
        assert!(!compatible(IS, X));
        assert!(!compatible(IX, S));
        assert!(!compatible(IX, X));
        assert!(compatible(IX, IX));
        for m in LockMode::ALL {
            assert!(!compatible(X, m));
        }
        for m in [IS, IX, S, SIX] {
            assert!(compatible(IS, m));
        }
        assert!(compatible(SIX, IS));
        for m in [IX, S, SIX, X] {
            assert!(!compatible(SIX, m));
        }
    }

    #[test]
    fn symmetric_and_six_decomposes() {
        for a in LockMode::ALL {
            for b in LockMode::ALL {
                assert_eq!(compatible(a, b), compatible(b, a), "{a} {b}");
            }
            // SIX behaves as S and IX held together
            assert_eq!(compatible(SIX, a), compatible(S, a) && compatible(IX, a));
        }
    }

    #[test]
    fn join_is_least_upper_bound() {
        assert_eq!(S.join(IX), SIX);
        assert_eq!(IS.join(S), S);
        assert_eq!(SIX.join(X), X);
        for a in LockMode::ALL {
            for b in LockMode::ALL {
                let j = a.join(b);
                assert!(j.covers(a) && j.covers(b));
                // anything incompatible with a or b is incompatible with the join
                for m in LockMode::ALL {
                    if !compatible(a, m) || !compatible(b, m) {
                        assert!(!compatible(j, m));
                    }
                }
            }
        }
    }

    #[test]
    fn degree_plans() {
        assert_eq!(lock_plan_for(Degree::D3, Access::Read), Some((S, Duration::Long)));
        assert_eq!(lock_plan_for(Degree::D2, Access::Read), Some((S, Duration::Short)));
        assert_eq!(lock_plan_for(Degree::D1, Access::Read), None);
        assert_eq!(lock_plan_for(Degree::D0, Access::Read), None);
        assert_eq!(lock_plan_for(Degree::D0, Access::Write), Some((X, Duration::Short)));
        for d in [Degree::D1, Degree::D2, Degree::D3] {
            assert_eq!(lock_plan_for(d, Access::Write), Some((X, Duration::Long)));
        }
    }
}
