//! Memory accesses per context and the sharing state of each base.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::absint::{AbsState, Base, Context, Evaluator, Itv, ThreadId, POS_INF};
use crate::active_threads::LifecycleFacts;
use crate::frontend::typeck::type_of;
use crate::frontend::{CType, CfgSet, Expr, Loc, Program, StmtKind};
use crate::thread_system::{ThreadTable, MAIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Access {
    pub context: Context,
    pub base: Base,
    /// Bytes possibly touched, clamped to the base when its size is known.
    pub offset: Itv,
    /// Size of the accessed object.
    pub width: u64,
    pub kind: AccessKind,
    pub atomic: bool,
    pub loc: Loc,
}

impl Access {
    /// Touches exactly one known location.
    pub fn is_exact(&self) -> bool {
        self.offset.hi != POS_INF
            && self.offset.lo >= 0
            && (self.offset.hi - self.offset.lo + 1) as u64 == self.width
    }

    pub fn overlaps(&self, o: &Access) -> bool {
        self.base == o.base && self.offset.overlaps(&o.offset)
    }
}

/// A dereference whose pointer has no known target.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Unresolved {
    pub context: Context,
    pub kind: AccessKind,
    pub loc: Loc,
}

#[derive(Debug, Clone, Default)]
pub struct Accesses {
    pub list: Vec<Access>,
    pub unresolved: Vec<Unresolved>,
}

struct Collector<'a> {
    p: &'a Program,
    ev: Evaluator<'a>,
    ctx: &'a Context,
    s: &'a AbsState,
    loc: Loc,
    out: &'a mut Accesses,
}

impl<'a> Collector<'a> {
    fn func(&self) -> &str {
        self.ev.func
    }

    /// Record a read or write of the object designated by `lv`.
    fn touch(&mut self, lv: &Expr, kind: AccessKind) {
        let ty = self.p.resolve_type(type_of(self.p, self.func(), lv));
        let atomic = ty == CType::AtomicInt;
        let width = ty.size(self.p.machine).max(1);
        let targets = self.ev.targets(self.s, lv);
        if targets.is_empty() {
            if !matches!(lv, Expr::Var(..)) {
                self.out.unresolved.push(Unresolved {
                    context: self.ctx.clone(),
                    kind,
                    loc: self.loc,
                });
            }
            return;
        }
        for (base, start) in targets {
            if matches!(base, Base::Function(_)) {
                continue;
            }
            let end = if start.hi == POS_INF {
                POS_INF
            } else {
                start.hi.saturating_add(width as i64 - 1)
            };
            let mut offset = Itv {
                lo: start.lo.max(0),
                hi: end,
            };
            if let Some(size) = base.size(self.p) {
                offset.hi = offset.hi.min(size as i64 - 1);
            }
            if offset.lo > offset.hi {
                continue;
            }
            self.out.list.push(Access {
                context: self.ctx.clone(),
                base,
                offset,
                width,
                kind,
                atomic,
                loc: self.loc,
            });
        }
    }

    /// Reads needed to compute the address of `lv`.
    fn address(&mut self, lv: &Expr) {
        match lv {
            Expr::Var(..) => {}
            Expr::Deref(p) => self.value(p),
            Expr::Index(a, i) => {
                if matches!(type_of(self.p, self.func(), a), CType::Array(..)) {
                    self.address(a);
                } else {
                    self.value(a);
                }
                self.value(i);
            }
            Expr::Field(inner, _) => self.address(inner),
            other => self.value(other),
        }
    }

    /// Reads performed when evaluating `e` as a value.
    fn value(&mut self, e: &Expr) {
        match e {
            Expr::Int(_) | Expr::Func(_) | Expr::SizeOf(_) => {}
            Expr::Var(..) | Expr::Deref(_) | Expr::Index(..) | Expr::Field(..) => {
                self.address(e);
                if !matches!(type_of(self.p, self.func(), e), CType::Array(..)) {
                    self.touch(e, AccessKind::Read);
                }
            }
            Expr::AddrOf(lv) => self.address(lv),
            Expr::Unary(_, a) | Expr::Cast(_, a) => self.value(a),
            Expr::Binary(_, a, b) => {
                self.value(a);
                self.value(b);
            }
        }
    }

    fn write(&mut self, lv: &Expr) {
        self.address(lv);
        self.touch(lv, AccessKind::Write);
    }
}

/// Accesses of one reachable context.
pub fn context_accesses(
    p: &Program,
    cfgs: &CfgSet,
    ctx: &Context,
    s: &AbsState,
    out: &mut Accesses,
) {
    let stmt = cfgs.stmt(ctx.stmt);
    let mut c = Collector {
        p,
        ev: Evaluator::at(p, cfgs, ctx),
        ctx,
        s,
        loc: stmt.loc,
        out,
    };
    match &stmt.kind {
        StmtKind::Assign(lv, e) => {
            c.value(e);
            c.write(lv);
        }
        StmtKind::Call { args, result, .. } => {
            for a in args {
                c.value(a);
            }
            if let Some(r) = result {
                c.write(r);
            }
        }
        StmtKind::If { cond, .. } | StmtKind::While { cond, .. } => c.value(cond),
        StmtKind::Return(Some(e)) | StmtKind::Join(e) => c.value(e),
        StmtKind::Create { handle, arg, .. } => {
            c.value(arg);
            c.write(handle);
        }
        StmtKind::Lock(e)
        | StmtKind::Unlock(e)
        | StmtKind::RdLock(e)
        | StmtKind::WrLock(e)
        | StmtKind::RwUnlock(e) => c.value(e),
        StmtKind::TryLock { lock, result } => {
            c.value(lock);
            c.write(result);
        }
        StmtKind::Alloc { result, size } => {
            c.value(size);
            c.write(result);
        }
        StmtKind::Marker(_, args) => {
            for a in args {
                c.value(a);
            }
        }
        StmtKind::Break | StmtKind::Return(None) => {}
    }
}

/// Every access in every reachable context of every class.
pub fn collect_accesses(p: &Program, cfgs: &CfgSet, table: &ThreadTable) -> Accesses {
    let mut out = Accesses::default();
    for (ctx, s) in table.contexts() {
        context_accesses(p, cfgs, ctx, s, &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum BaseState {
    Virgin,
    Exclusive(ThreadId),
    SharedRead,
    SharedModified,
}

/// Frame bases whose address is stored where another thread can see it.
pub fn published_frames(table: &ThreadTable) -> BTreeSet<Base> {
    let mut out = BTreeSet::new();
    let states = table
        .summaries
        .values()
        .flat_map(|s| s.states.values().chain([&s.exit]))
        .chain(table.init_states.values());
    for s in states {
        for ((holder, _), v) in &s.env {
            for b in v.pts.keys() {
                let owner = match b {
                    Base::Local { thread, .. } | Base::Formal { thread, .. } => *thread,
                    _ => continue,
                };
                let visible = match holder {
                    Base::Global(_) | Base::Dynamic { .. } => true,
                    Base::Local { thread, .. } | Base::Formal { thread, .. } => *thread != owner,
                    Base::Function(_) => false,
                };
                if visible {
                    out.insert(b.clone());
                }
            }
        }
    }
    out
}

/// Written by main before any thread may exist.
fn is_init_write(a: &Access, facts: &LifecycleFacts) -> bool {
    a.kind == AccessKind::Write
        && a.context.thread == MAIN
        && facts
            .at(&a.context)
            .is_some_and(|f| f.created_may.is_empty())
}

/// Sharing state of every accessed base. Depends only on the set of
/// accesses: accessor classes (multi-instance ones counted twice) and
/// whether any write other than main's pre-thread initialisation exists.
pub fn classify_bases(
    accesses: &[Access],
    facts: &LifecycleFacts,
    table: &ThreadTable,
) -> BTreeMap<Base, BaseState> {
    let published = published_frames(table);
    let mut per_base: BTreeMap<&Base, (BTreeMap<ThreadId, u8>, bool)> = BTreeMap::new();
    for a in accesses {
        let entry = per_base.entry(&a.base).or_default();
        if a.atomic {
            continue;
        }
        let t = a.context.thread;
        let own_frame = matches!(&a.base, Base::Local { thread, .. } | Base::Formal { thread, .. } if *thread == t);
        let weight = if table.is_multi(t) && (!own_frame || published.contains(&a.base)) {
            2
        } else {
            1
        };
        let w = entry.0.entry(t).or_default();
        *w = (*w).max(weight);
        if a.kind == AccessKind::Write && !is_init_write(a, facts) {
            entry.1 = true;
        }
    }
    per_base
        .into_iter()
        .map(|(b, (accessors, shared_write))| {
            let count: u32 = accessors.values().map(|w| u32::from(*w)).sum();
            let state = match count {
                0 => BaseState::Virgin,
                1 => BaseState::Exclusive(*accessors.keys().next().unwrap()),
                _ if shared_write => BaseState::SharedModified,
                _ => BaseState::SharedRead,
            };
            (b.clone(), state)
        })
        .collect()
}

pub fn candidate_bases(states: &BTreeMap<Base, BaseState>) -> BTreeSet<Base> {
    states
        .iter()
        .filter(|(_, s)| **s == BaseState::SharedModified)
        .map(|(b, _)| b.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::absint::CallString;
    use crate::active_threads::compute_lifecycle;
    use crate::frontend::{build_cfg, parse_program, MachineModel};
    use crate::thread_system::{solve, Strategy as Approx};
    use proptest::prelude::*;

    struct Fixture {
        table: ThreadTable,
        facts: LifecycleFacts,
        acc: Accesses,
    }

    fn fixture(src: &str) -> Fixture {
        let p = parse_program(src, "t.c", MachineModel::Lp64).unwrap();
        let cfgs = build_cfg(&p);
        let table = solve(&p, &cfgs, Approx::Over, 2).unwrap();
        let facts = compute_lifecycle(&p, &cfgs, &table);
        let acc = collect_accesses(&p, &cfgs, &table);
        Fixture { table, facts, acc }
    }

    impl Fixture {
        fn of(&self, name: &str, kind: AccessKind) -> Vec<&Access> {
            self.acc
                .list
                .iter()
                .filter(|a| a.base == Base::Global(name.into()) && a.kind == kind)
                .collect()
        }

        fn states(&self) -> BTreeMap<Base, BaseState> {
            classify_bases(&self.acc.list, &self.facts, &self.table)
        }

        fn state(&self, name: &str) -> BaseState {
            self.states()[&Base::Global(name.into())]
        }
    }

    fn itv(lo: i64, hi: i64) -> Itv {
        Itv::new(lo, hi).unwrap()
    }

    #[test]
    fn scalar_write_in_thread() {
        let fx = fixture(
            "int g; void *f(void *a) { g = 1; return 0; }
             int main() { pthread_t t; pthread_create(&t, 0, f, 0); return 0; }",
        );
        let w = fx.of("g", AccessKind::Write);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].offset, itv(0, 3));
        assert_eq!(w[0].context.thread, fx.table.class_of_entry("f").unwrap());
        assert!(w[0].is_exact());
    }

    #[test]
    fn indexed_write_covers_range() {
        let fx = fixture(
            "int a[4]; int main() { int i; i = 0; while (i < 4) { a[i] = 0; i = i + 1; } return 0; }",
        );
        let w = fx.of("a", AccessKind::Write);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].offset, itv(0, 15));
        assert!(!w[0].is_exact());
    }

    #[test]
    fn deref_expands_over_points_to() {
        let fx = fixture(
            "int x; int y; int *p;
             int main() { int c; if (c) { p = &x; } else { p = &y; } *p = 1; return 0; }",
        );
        let xs = fx.of("x", AccessKind::Write);
        let ys = fx.of("y", AccessKind::Write);
        assert_eq!((xs.len(), ys.len()), (1, 1));
        assert_eq!(xs[0].context, ys[0].context);
        assert!(!fx.of("p", AccessKind::Read).is_empty());
    }

    #[test]
    fn address_computation_reads() {
        let fx = fixture(
            "struct S { int a; int b; }; struct S *sp; struct S s; int i; int arr[4];
             int main() { sp = &s; sp->b = 2; arr[i] = 1; return 0; }",
        );
        assert_eq!(fx.of("s", AccessKind::Write)[0].offset, itv(4, 7));
        assert_eq!(fx.of("sp", AccessKind::Read).len(), 1);
        assert_eq!(fx.of("i", AccessKind::Read).len(), 1);
        assert!(fx.of("arr", AccessKind::Read).is_empty());
    }

    #[test]
    fn unknown_pointer_is_unresolved() {
        let fx = fixture("int main() { int *p; *p = 1; return 0; }");
        assert_eq!(fx.acc.unresolved.len(), 1);
    }

    #[test]
    fn classification_examples() {
        let fx = fixture(
            "int g; int h; int k;
             void *f(void *a) { k = h; k = 2; return 0; }
             void *u(void *a) { k = 3; return 0; }
             int main() { pthread_t t; g = 1; h = 5; pthread_create(&t, 0, f, 0); pthread_create(&t, 0, u, 0); g = 2; return 0; }",
        );
        assert_eq!(fx.state("g"), BaseState::Exclusive(MAIN));
        assert_eq!(fx.state("h"), BaseState::SharedRead);
        assert_eq!(fx.state("k"), BaseState::SharedModified);
        assert_eq!(
            candidate_bases(&fx.states()),
            BTreeSet::from([Base::Global("k".into())])
        );
    }

    #[test]
    fn multi_instance_heap_is_shared() {
        let fx = fixture(
            "void *f(void *a) { int *q; q = malloc(4); *q = 1; return 0; }
             int main() { pthread_t t; int i; i = 0; while (i < 2) { pthread_create(&t, 0, f, 0); i = i + 1; } return 0; }",
        );
        let heap: Vec<_> = fx
            .states()
            .into_iter()
            .filter(|(b, _)| matches!(b, Base::Dynamic { weak: true, .. }))
            .collect();
        assert_eq!(heap.len(), 1);
        assert_eq!(heap[0].1, BaseState::SharedModified);
    }

    #[test]
    fn private_locals_of_multi_instance_stay_exclusive() {
        let fx = fixture(
            "void *f(void *a) { int x; int buf[2]; x = 1; buf[0] = x; return 0; }
             int main() { pthread_t t; int i; i = 0; while (i < 2) { pthread_create(&t, 0, f, 0); i = i + 1; } return 0; }",
        );
        assert!(fx
            .states()
            .values()
            .all(|s| matches!(s, BaseState::Exclusive(_))));
    }

    #[test]
    fn atomic_only_bases_are_not_candidates() {
        let fx = fixture(
            "atomic_int flag;
             void *f(void *a) { flag = 1; return 0; }
             int main() { pthread_t t; pthread_create(&t, 0, f, 0); flag = 2; return 0; }",
        );
        assert!(fx.of("flag", AccessKind::Write).iter().all(|a| a.atomic));
        assert!(candidate_bases(&fx.states()).is_empty());
    }

    fn synthetic(thread: ThreadId, name: &str, kind: AccessKind, stmt: u32) -> Access {
        Access {
            context: Context {
                thread,
                cs: CallString::default(),
                stmt,
            },
            base: Base::Global(name.into()),
            offset: Itv::new(0, 3).unwrap(),
            width: 4,
            kind,
            atomic: false,
            loc: Loc::default(),
        }
    }

    proptest! {
        #[test]
        fn classification_is_order_independent_and_filtered(
            raw in prop::collection::vec((0u32..3, 0usize..2, any::<bool>(), 0u32..4), 0..12),
            seed in any::<u64>(),
        ) {
            let fx = fixture(
                "int a; int b;
                 void *f(void *x) { return 0; } void *h(void *x) { return 0; }
                 int main() { pthread_t t; pthread_create(&t, 0, f, 0); pthread_create(&t, 0, h, 0); return 0; }",
            );
            let names = ["a", "b"];
            let accesses: Vec<Access> = raw
                .iter()
                .map(|(t, n, w, s)| {
                    let kind = if *w { AccessKind::Write } else { AccessKind::Read };
                    synthetic(*t, names[*n], kind, 1000 + s)
                })
                .collect();
            let mut shuffled = accesses.clone();
            let mut x = seed | 1;
            for i in (1..shuffled.len()).rev() {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                shuffled.swap(i, (x % (i as u64 + 1)) as usize);
            }
            let a = classify_bases(&accesses, &fx.facts, &fx.table);
            let b = classify_bases(&shuffled, &fx.facts, &fx.table);
            prop_assert_eq!(&a, &b);
            for base in candidate_bases(&a) {
                let on: Vec<&Access> = accesses.iter().filter(|x| x.base == base).collect();
                prop_assert!(on.iter().any(|x| x.kind == AccessKind::Write));
                let classes: BTreeSet<ThreadId> = on.iter().map(|x| x.context.thread).collect();
                prop_assert!(classes.len() >= 2);
            }
        }
    }
}
