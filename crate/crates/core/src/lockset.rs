//! Sets of locksets held at each context, and guardedness queries.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::absint::{
    AbsState, AbsVal, Analysis, Base, CallString, Cell, Context, Engine, Evaluator, Itv,
    ThreadId, ThreadSummary, TRYLOCK_RESULT,
};
use crate::frontend::{CfgSet, EdgeLabel, Expr, Program, StmtKind};
use crate::thread_system::ThreadTable;

/// Locksets kept per context before collapsing.
pub const MAX_LOCKSETS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Mutex,
    RwlockRead,
    RwlockWrite,
}

impl Flavor {
    fn excludes(self, o: Flavor) -> bool {
        matches!(
            (self, o),
            (Flavor::Mutex, Flavor::Mutex)
                | (Flavor::RwlockWrite, Flavor::RwlockWrite)
                | (Flavor::RwlockWrite, Flavor::RwlockRead)
                | (Flavor::RwlockRead, Flavor::RwlockWrite)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct LockId {
    /// `None` when the lock expression could not be resolved.
    pub base: Option<Base>,
    pub offset: Itv,
    pub flavor: Flavor,
    /// Resolved to exactly one lock object; only exact locks count for
    /// must reasoning.
    pub exact: bool,
}

impl LockId {
    pub fn must_exclude(&self, o: &LockId) -> bool {
        self.exact
            && o.exact
            && self.base.is_some()
            && self.base == o.base
            && self.offset.is_singleton()
            && self.offset == o.offset
            && self.flavor.excludes(o.flavor)
    }

    pub fn may_exclude(&self, o: &LockId) -> bool {
        match (&self.base, &o.base) {
            (Some(a), Some(b)) => {
                a == b && self.offset.overlaps(&o.offset) && self.flavor.excludes(o.flavor)
            }
            _ => !(self.flavor == Flavor::RwlockRead && o.flavor == Flavor::RwlockRead),
        }
    }

    fn same_object(&self, o: &LockId) -> bool {
        self.base == o.base && self.offset == o.offset
    }
}

impl fmt::Display for LockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.base {
            Some(b) if self.offset == Itv::single(0) => write!(f, "{b}")?,
            Some(b) => write!(f, "{b}+{}", self.offset)?,
            None => write!(f, "?")?,
        }
        match self.flavor {
            Flavor::Mutex => Ok(()),
            Flavor::RwlockRead => write!(f, ":read"),
            Flavor::RwlockWrite => write!(f, ":write"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Lockset {
    pub locks: BTreeSet<LockId>,
    /// Trylock result cells not yet tested, with whether the lock was taken.
    pending: BTreeMap<Cell, bool>,
}

impl Lockset {
    pub fn new(locks: impl IntoIterator<Item = LockId>) -> Lockset {
        Lockset {
            locks: locks.into_iter().collect(),
            pending: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct LsState {
    pub sets: BTreeSet<Lockset>,
    pub overflowed: bool,
}

impl LsState {
    fn entry() -> LsState {
        LsState {
            sets: BTreeSet::from([Lockset::default()]),
            overflowed: false,
        }
    }

    fn capped(mut self) -> LsState {
        if self.sets.len() <= MAX_LOCKSETS {
            return self;
        }
        let mut all = self.sets.iter().map(|l| &l.locks);
        let first = all.next().cloned().unwrap_or_default();
        let (union, inter) = all.fold((first.clone(), first), |(u, i), l| {
            (&u | l, &i & l)
        });
        self.sets = BTreeSet::from([Lockset::new(union), Lockset::new(inter)]);
        self.overflowed = true;
        self
    }

    fn map(&self, f: impl Fn(&Lockset) -> Vec<Lockset>) -> LsState {
        LsState {
            sets: self.sets.iter().flat_map(f).collect(),
            overflowed: self.overflowed,
        }
        .capped()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LocksetSummary {
    pub per_context: BTreeMap<Context, LsState>,
    /// Contexts whose lock expression did not resolve to any object.
    pub failures: BTreeSet<Context>,
    pub exits: BTreeMap<ThreadId, LsState>,
}

impl LocksetSummary {
    /// Lock sets held at `ctx`; empty when the context is unknown.
    pub fn locksets(&self, ctx: &Context) -> Vec<&BTreeSet<LockId>> {
        self.per_context
            .get(ctx)
            .map(|s| s.sets.iter().map(|l| &l.locks).collect())
            .unwrap_or_default()
    }

    /// Every pair of paths to `c1` and `c2` holds a common excluding lock.
    pub fn must_guarded(&self, c1: &Context, c2: &Context) -> bool {
        let (a, b) = (self.locksets(c1), self.locksets(c2));
        if a.is_empty() || b.is_empty() {
            return false;
        }
        a.iter().all(|l1| {
            b.iter()
                .all(|l2| l1.iter().any(|x| l2.iter().any(|y| x.must_exclude(y))))
        })
    }

    /// No lock may be held at any lock acquisition, join or thread exit.
    pub fn flat(&self, cfgs: &CfgSet) -> bool {
        let free = |s: &LsState| {
            !s.overflowed && s.sets.iter().all(|l| l.locks.is_empty() && l.pending.is_empty())
        };
        self.failures.is_empty()
            && self.exits.values().all(free)
            && self.per_context.iter().all(|(c, s)| {
                !matches!(
                    cfgs.stmt(c.stmt).kind,
                    StmtKind::Lock(_) | StmtKind::RdLock(_) | StmtKind::WrLock(_) | StmtKind::Join(_)
                ) || free(s)
            })
    }

    /// Some pair of paths to `c1` and `c2` holds a common excluding lock.
    pub fn may_guarded(&self, c1: &Context, c2: &Context) -> bool {
        let (a, b) = (self.locksets(c1), self.locksets(c2));
        a.iter().any(|l1| {
            b.iter()
                .any(|l2| l1.iter().any(|x| l2.iter().any(|y| x.may_exclude(y))))
        })
    }
}

struct LockAnalysis<'a> {
    p: &'a Program,
    cfgs: &'a CfgSet,
    summary: &'a ThreadSummary,
    multi: bool,
    failures: RefCell<BTreeSet<Context>>,
}

impl<'a> LockAnalysis<'a> {
    fn resolve(&self, ctx: &Context, s: &AbsState, e: &Expr, flavor: Flavor) -> Vec<LockId> {
        let v = Evaluator::at(self.p, self.cfgs, ctx).eval(s, e);
        if v.pts.is_empty() {
            self.failures.borrow_mut().insert(ctx.clone());
            return vec![LockId {
                base: None,
                offset: Itv::TOP,
                flavor,
                exact: false,
            }];
        }
        let single = v.pts.len() == 1;
        v.pts
            .into_iter()
            .map(|(base, offset)| {
                let per_instance = self.multi
                    && matches!(base, Base::Local { .. } | Base::Formal { .. });
                LockId {
                    exact: single && offset.is_singleton() && !base.is_weak() && !per_instance,
                    base: Some(base),
                    offset,
                    flavor,
                }
            })
            .collect()
    }

    fn release(l: &Lockset, cands: &[LockId], flavors: &[Flavor]) -> Lockset {
        let mut out = l.clone();
        let definite = cands.len() == 1 && cands[0].base.is_some() && cands[0].offset.is_singleton();
        out.locks = l
            .locks
            .iter()
            .filter_map(|h| {
                if !flavors.contains(&h.flavor) {
                    return Some(h.clone());
                }
                if definite {
                    return (!h.same_object(&cands[0])).then(|| h.clone());
                }
                let hit = cands.iter().any(|c| match (&c.base, &h.base) {
                    (Some(a), Some(b)) => a == b && c.offset.overlaps(&h.offset),
                    _ => true,
                });
                Some(LockId {
                    exact: h.exact && !hit,
                    ..h.clone()
                })
            })
            .collect();
        out
    }

    /// Forget trylock results stored in cells `lv` may overwrite.
    fn clobber(&self, ctx: &Context, s: &AbsState, lv: &Expr, st: &LsState) -> LsState {
        let ev = Evaluator::at(self.p, self.cfgs, ctx);
        let targets = ev.targets(s, lv);
        st.map(|l| {
            let mut l = l.clone();
            l.pending
                .retain(|(b, o), _| !targets.get(b).is_some_and(|off| off.contains(*o)));
            vec![l]
        })
    }

    fn unique_cell(&self, ctx: &Context, s: &AbsState, lv: &Expr) -> Option<Cell> {
        let t = Evaluator::at(self.p, self.cfgs, ctx).targets(s, lv);
        match t.into_iter().collect::<Vec<_>>().as_slice() {
            [(b, o)] if o.is_singleton() && !b.is_weak() => Some((b.clone(), o.lo)),
            _ => None,
        }
    }
}

impl<'a> Analysis for LockAnalysis<'a> {
    type State = LsState;

    fn bottom(&self) -> LsState {
        LsState::default()
    }

    fn is_bottom(&self, s: &LsState) -> bool {
        s.sets.is_empty()
    }

    fn join(&self, a: &LsState, b: &LsState) -> LsState {
        LsState {
            sets: &a.sets | &b.sets,
            overflowed: a.overflowed || b.overflowed,
        }
        .capped()
    }

    fn transfer(&self, ctx: &Context, label: &EdgeLabel, st: &LsState) -> LsState {
        let abs = self.summary.state(ctx);
        if st.sets.is_empty() || !abs.reachable {
            return self.bottom();
        }
        let id = match label {
            EdgeLabel::Guard { cond, polarity, .. } => {
                if !self.summary.edge_feasible(ctx, Some(*polarity)) {
                    return self.bottom();
                }
                let ev = Evaluator::at(self.p, self.cfgs, ctx);
                return st.map(|l| {
                    let consistent = l.pending.iter().all(|(cell, taken)| {
                        let mut s = abs.clone();
                        let v = if *taken {
                            Itv::single(0)
                        } else {
                            Itv::new(1, TRYLOCK_RESULT.hi).unwrap()
                        };
                        s.env.insert(cell.clone(), AbsVal::int(v));
                        ev.refine(&s, cond, *polarity).reachable
                    });
                    if consistent {
                        vec![l.clone()]
                    } else {
                        vec![]
                    }
                });
            }
            EdgeLabel::Stmt(id) => *id,
        };
        let acquire = |e: &Expr, flavor| {
            let ids = self.resolve(ctx, &abs, e, flavor);
            st.map(|l| {
                let mut l = l.clone();
                l.locks.extend(ids.iter().cloned());
                vec![l]
            })
        };
        let release = |e: &Expr, flavors: &[Flavor]| {
            let ids = self.resolve(ctx, &abs, e, flavors[0]);
            st.map(|l| vec![Self::release(l, &ids, flavors)])
        };
        match &self.cfgs.stmt(id).kind {
            StmtKind::Lock(e) => acquire(e, Flavor::Mutex),
            StmtKind::RdLock(e) => acquire(e, Flavor::RwlockRead),
            StmtKind::WrLock(e) => acquire(e, Flavor::RwlockWrite),
            StmtKind::Unlock(e) => release(e, &[Flavor::Mutex]),
            StmtKind::RwUnlock(e) => release(e, &[Flavor::RwlockRead, Flavor::RwlockWrite]),
            StmtKind::TryLock { lock, result } => {
                let ids = self.resolve(ctx, &abs, lock, Flavor::Mutex);
                let cell = self.unique_cell(ctx, &abs, result);
                let st = self.clobber(ctx, &abs, result, st);
                st.map(|l| {
                    let mut taken = l.clone();
                    taken.locks.extend(ids.iter().cloned());
                    let mut failed = l.clone();
                    if let Some(c) = &cell {
                        taken.pending.insert(c.clone(), true);
                        failed.pending.insert(c.clone(), false);
                    }
                    vec![taken, failed]
                })
            }
            StmtKind::Assign(lv, _)
            | StmtKind::Alloc { result: lv, .. }
            | StmtKind::Create { handle: lv, .. } => self.clobber(ctx, &abs, lv, st),
            _ => st.clone(),
        }
    }

    fn call_entry(
        &self,
        ctx: &Context,
        _callee_cs: &CallString,
        _callee: &str,
        _args: &[Expr],
        s: &LsState,
    ) -> LsState {
        if self.summary.reachable(ctx) {
            s.clone()
        } else {
            self.bottom()
        }
    }

    fn call_return(
        &self,
        ctx: &Context,
        callee_cs: &CallString,
        callee: &str,
        result: Option<&Expr>,
        _pre: &LsState,
        exit: &LsState,
    ) -> LsState {
        let dropped = exit.map(|l| {
            let mut l = l.clone();
            l.pending.retain(|(b, _), _| match b {
                Base::Local { func, cs, .. } | Base::Formal { func, cs, .. } => {
                    !(func == callee && cs == callee_cs)
                }
                _ => true,
            });
            vec![l]
        });
        match result {
            Some(lv) => self.clobber(ctx, &self.summary.state(ctx), lv, &dropped),
            None => dropped,
        }
    }
}

/// Locksets of every thread class, analysed independently.
pub fn compute_locksets(p: &Program, cfgs: &CfgSet, table: &ThreadTable) -> LocksetSummary {
    let per_class: Vec<_> = table
        .summaries
        .par_iter()
        .map(|(t, summary)| {
            let analysis = LockAnalysis {
                p,
                cfgs,
                summary,
                multi: table.is_multi(*t),
                failures: RefCell::new(BTreeSet::new()),
            };
            let init = if summary.exit.reachable || summary.states.values().any(|s| s.reachable) {
                LsState::entry()
            } else {
                LsState::default()
            };
            let rec = Engine::new(&analysis, cfgs, *t, table.k).run(&summary.entry, init);
            (*t, rec, analysis.failures.into_inner())
        })
        .collect();
    let mut out = LocksetSummary::default();
    for (t, rec, failures) in per_class {
        out.per_context
            .extend(rec.pre.into_iter().filter(|(_, s)| !s.sets.is_empty()));
        out.failures.extend(failures);
        out.exits.insert(t, rec.exit);
    }
    out
}
