//! Sequential abstract interpretation of one thread class.

pub mod domain;
pub mod engine;
pub mod eval;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

pub use domain::{
    is_shared_base, AbsState, AbsVal, Base, CallString, Cell, Context, Itv, ThreadId, NEG_INF, POS_INF,
};
pub use engine::{Analysis, Engine, LoopStat, Recording};
pub use eval::{AbsAnalysis, Evaluator, UpdateMode, TRYLOCK_RESULT};

use crate::frontend::{CfgSet, Loc, NodeId, Program, StmtId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("recursion is not supported: {}", .0.join(" -> "))]
    RecursionUnsupported(Vec<String>),
    #[error("thread entry at {loc} cannot be resolved to a function")]
    EntryUnresolved { stmt: StmtId, loc: Loc },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl AnalysisError {
    /// Short name of the unsupported construct, for verdict reporting.
    pub fn feature(&self) -> String {
        match self {
            AnalysisError::RecursionUnsupported(_) => "recursion".into(),
            AnalysisError::EntryUnresolved { .. } => "unresolved thread entry".into(),
            AnalysisError::Unsupported(f) => f.clone(),
        }
    }
}

/// Per-thread analysis parameters.
#[derive(Debug, Clone)]
pub struct ThreadConfig<'a> {
    pub thread: ThreadId,
    pub entry: &'a str,
    pub mode: UpdateMode,
    pub k: usize,
    pub weak_allocs: &'a BTreeSet<StmtId>,
    /// Frame variables whose address escapes, as (function, name).
    pub escaped: &'a BTreeSet<(String, String)>,
}

/// Result of analysing one thread class.
#[derive(Debug, Clone)]
pub struct ThreadSummary {
    pub thread: ThreadId,
    pub entry: String,
    /// State before every statement edge of every invoked function;
    /// unreachable contexts map to an unreachable state.
    pub states: BTreeMap<Context, AbsState>,
    pub feasible: BTreeSet<(Context, Option<bool>)>,
    pub must_exec: BTreeSet<Context>,
    pub exit: AbsState,
    pub loops: BTreeMap<(String, CallString, NodeId), LoopStat>,
}

impl ThreadSummary {
    pub fn state(&self, ctx: &Context) -> AbsState {
        self.states.get(ctx).cloned().unwrap_or_default()
    }

    pub fn reachable(&self, ctx: &Context) -> bool {
        self.states.get(ctx).is_some_and(|s| s.reachable)
    }

    pub fn reachable_contexts(&self) -> impl Iterator<Item = (&Context, &AbsState)> {
        self.states.iter().filter(|(_, s)| s.reachable)
    }

    /// Is the edge of `ctx` with the given guard polarity ever taken?
    pub fn edge_feasible(&self, ctx: &Context, polarity: Option<bool>) -> bool {
        self.feasible.contains(&(ctx.clone(), polarity))
    }
}

/// Reject programs whose call graph is cyclic from `entry`.
pub fn check_recursion(cfgs: &CfgSet, entry: &str) -> Result<(), AnalysisError> {
    match cfgs.find_recursion(entry) {
        Some(cycle) => Err(AnalysisError::RecursionUnsupported(cycle)),
        None => Ok(()),
    }
}

pub fn analyze_thread(
    program: &Program,
    cfgs: &CfgSet,
    config: &ThreadConfig,
    init: AbsState,
) -> Result<ThreadSummary, AnalysisError> {
    check_recursion(cfgs, config.entry)?;
    let analysis = AbsAnalysis {
        p: program,
        cfgs,
        thread: config.thread,
        mode: config.mode,
        weak_allocs: config.weak_allocs,
        escaped: config.escaped,
    };
    let mut engine = Engine::new(&analysis, cfgs, config.thread, config.k);
    let rec = engine.run(config.entry, init);
    Ok(ThreadSummary {
        thread: config.thread,
        entry: config.entry.to_string(),
        states: rec.pre,
        feasible: rec.feasible,
        must_exec: rec.must_exec,
        exit: rec.exit,
        loops: rec.loops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{build_cfg, parse_program, MachineModel, StmtKind};

    struct Run {
        p: Program,
        sum: ThreadSummary,
    }

    fn run_with(src: &str, entry: &str, mode: UpdateMode, init: impl Fn(&Program) -> AbsState) -> Run {
        let p = parse_program(src, "t.c", MachineModel::Lp64).unwrap();
        let cfgs = build_cfg(&p);
        let weak = BTreeSet::new();
        let cfg = ThreadConfig {
            thread: 0,
            entry,
            mode,
            k: 2,
            weak_allocs: &weak,
            escaped: &weak_esc(),
        };
        let sum = analyze_thread(&p, &cfgs, &cfg, init(&p)).unwrap();
        Run { p, sum }
    }

    fn run(src: &str) -> Run {
        run_with(src, "main", UpdateMode::Strong, AbsState::static_init)
    }

    impl Run {
        fn ctx_of(&self, nth: usize, func: &str) -> Context {
            let stmts: Vec<_> = self
                .p
                .statements()
                .into_iter()
                .filter(|(f, _)| *f == func)
                .collect();
            let id = stmts[nth].1.id;
            self.sum
                .states
                .keys()
                .find(|c| c.stmt == id)
                .cloned()
                .unwrap_or(Context {
                    thread: 0,
                    cs: CallString::default(),
                    stmt: id,
                })
        }

        fn global(&self, s: &AbsState, name: &str) -> AbsVal {
            s.get(&self.p, &(Base::Global(name.into()), 0))
        }

        fn exit_global(&self, name: &str) -> AbsVal {
            self.global(&self.sum.exit, name)
        }
    }

    fn weak_esc() -> BTreeSet<(String, String)> {
        BTreeSet::new()
    }

    fn itv(lo: i64, hi: i64) -> AbsVal {
        AbsVal::int(Itv::new(lo, hi).unwrap())
    }

    #[test]
    fn straight_line_strong_updates() {
        let r = run("int x; int main() { x = 1; x = x + 1; return 0; }");
        let before_second = r.sum.state(&r.ctx_of(1, "main"));
        assert_eq!(r.global(&before_second, "x"), itv(1, 1));
        assert_eq!(r.exit_global("x"), itv(2, 2));
    }

    #[test]
    fn loop_widens_then_narrows() {
        let r = run("int x; int main() { while (x < 10) x = x + 1; return 0; }");
        assert_eq!(r.exit_global("x"), itv(10, 10));
        let stat = r.sum.loops.values().next().unwrap();
        assert_eq!(stat.join_visits, 3);
        assert_eq!(stat.descending, 1);
        assert!(stat.widen_visits >= 1);
    }

    #[test]
    fn weak_update_keeps_old_values() {
        let r = run_with(
            "int g; int main() { g = 0; return 0; }",
            "main",
            UpdateMode::Weak,
            |p| {
                let mut s = AbsState::static_init(p);
                s.env.insert((Base::Global("g".into()), 0), itv(0, 5));
                s
            },
        );
        assert_eq!(r.exit_global("g"), itv(0, 5));
    }

    #[test]
    fn expression_examples() {
        let r = run("int x; int g = 7; int *p; int y; int main() { x = 2; p = &g; y = *p; return 0; }");
        let st = r.sum.exit.clone();
        let ev = Evaluator {
            p: &r.p,
            thread: 0,
            func: "main",
            cs: &CallString::default(),
        };
        let mut s = st.clone();
        s.env.insert((Base::Global("x".into()), 0), itv(2, 3));
        let x = Expr::Var("x".into(), Scope::Global);
        let plus = Expr::Binary(BinOp::Add, Box::new(x.clone()), Box::new(Expr::Int(1)));
        assert_eq!(ev.eval(&s, &plus), itv(3, 4));
        assert_eq!(r.global(&st, "y"), itv(7, 7));
        s.env.insert((Base::Global("x".into()), 0), itv(0, 10));
        let div = Expr::Binary(BinOp::Div, Box::new(x.clone()), Box::new(x));
        assert_eq!(ev.eval(&s, &div), AbsVal::top());
    }

    use crate::frontend::{BinOp, Expr, Scope};

    #[test]
    fn guards_refine_and_prune() {
        let r = run(
            "int x; int y; int main() { x = 5; if (x > 10) { y = 1; } else { y = 2; } return 0; }",
        );
        assert_eq!(r.exit_global("y"), itv(2, 2));
        let then_ctx = r.ctx_of(2, "main");
        assert!(!r.sum.reachable(&then_ctx));
    }

    #[test]
    fn calls_bind_formals_and_return() {
        let r = run(
            "int g; int add(int a, int b) { return a + b; }
             int main() { int r; r = add(2, 3); g = r; return 0; }",
        );
        assert_eq!(r.exit_global("g"), itv(5, 5));
        let inner = r
            .sum
            .states
            .keys()
            .find(|c| !c.cs.is_empty())
            .unwrap();
        assert_eq!(inner.cs.0[0].1, "add");
    }

    #[test]
    fn must_exec_excludes_conditional_statements() {
        let r = run("int x; int c; int main() { x = 1; if (c) { x = 2; } x = 3; return 0; }");
        let ctxs: Vec<Context> = (0..5).map(|i| r.ctx_of(i, "main")).collect();
        assert!(r.sum.must_exec.contains(&ctxs[0]));
        assert!(!r.sum.must_exec.contains(&ctxs[2]));
        assert!(r.sum.must_exec.contains(&ctxs[3]));
    }

    #[test]
    fn recursion_is_rejected() {
        let p = parse_program(
            "int f(int n) { int r; r = f(n); return r; } int main() { int x; x = f(1); return 0; }",
            "t.c",
            MachineModel::Lp64,
        )
        .unwrap();
        let cfgs = build_cfg(&p);
        let weak = BTreeSet::new();
        let cfg = ThreadConfig {
            thread: 0,
            entry: "main",
            mode: UpdateMode::Strong,
            k: 2,
            weak_allocs: &weak,
            escaped: &weak_esc(),
        };
        let err = analyze_thread(&p, &cfgs, &cfg, AbsState::static_init(&p)).unwrap_err();
        assert!(matches!(err, AnalysisError::RecursionUnsupported(_)));
    }

    #[test]
    fn trylock_result_is_refined() {
        let r = run(
            "pthread_mutex_t m; int x; int main() { int t; t = pthread_mutex_trylock(&m); if (t == 0) { x = t; } return 0; }",
        );
        assert_eq!(r.exit_global("x"), itv(0, 0));
        let tl = r
            .p
            .statements()
            .into_iter()
            .find(|(_, s)| matches!(s.kind, StmtKind::TryLock { .. }))
            .unwrap()
            .1
            .id;
        assert!(r.sum.states.keys().any(|c| c.stmt == tl));
    }

    #[test]
    fn arrays_and_pointers() {
        let r = run(
            "int a[4]; int s; int main() { int i; int *q; i = 0; while (i < 4) { a[i] = i; i = i + 1; } q = &a[2]; s = *q; return 0; }",
        );
        let s = r.exit_global("s");
        assert!(s.itv.unwrap().contains(2));
        assert!(s.itv.unwrap().contains(0));
    }
}
