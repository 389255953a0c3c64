//! Call-string sensitive forward dataflow over the per-function CFGs.
//!
//! A callee is re-analysed for every distinct (call string, entry state) it
//! is reached with; results are cached. Loop heads join for the first few
//! visits and widen afterwards; one descending pass follows stabilisation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;
use std::rc::Rc;

use serde::Serialize;

use super::domain::{CallString, Context, ThreadId};
use crate::frontend::{CfgSet, Edge, EdgeLabel, Expr, NodeId, StmtId, StmtKind};

pub trait Analysis {
    type State: Clone + Eq + Hash + std::fmt::Debug;

    fn bottom(&self) -> Self::State;
    fn is_bottom(&self, s: &Self::State) -> bool;
    fn join(&self, a: &Self::State, b: &Self::State) -> Self::State;
    fn widen(&self, older: &Self::State, newer: &Self::State) -> Self::State {
        self.join(older, newer)
    }

    /// Effect of a guard or a non-call statement edge.
    fn transfer(&self, ctx: &Context, label: &EdgeLabel, s: &Self::State) -> Self::State;

    fn call_entry(
        &self,
        ctx: &Context,
        callee_cs: &CallString,
        callee: &str,
        args: &[Expr],
        s: &Self::State,
    ) -> Self::State;

    #[allow(clippy::too_many_arguments)]
    fn call_return(
        &self,
        ctx: &Context,
        callee_cs: &CallString,
        callee: &str,
        result: Option<&Expr>,
        pre: &Self::State,
        exit: &Self::State,
    ) -> Self::State;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LoopStat {
    /// Updates of the head state by plain join.
    pub join_visits: u32,
    /// Updates of the head state by widening.
    pub widen_visits: u32,
    pub descending: u32,
}

impl LoopStat {
    fn max(&self, o: &LoopStat) -> LoopStat {
        LoopStat {
            join_visits: self.join_visits.max(o.join_visits),
            widen_visits: self.widen_visits.max(o.widen_visits),
            descending: self.descending.max(o.descending),
        }
    }
}

struct FnResult<S> {
    nodes: Vec<S>,
    exit: S,
    loops: Vec<(NodeId, LoopStat)>,
}

/// Everything observed while replaying the converged analysis.
#[derive(Debug, Clone)]
pub struct Recording<S> {
    /// State before each statement edge, joined over invocations.
    pub pre: BTreeMap<Context, S>,
    /// Edges with a non-bottom post state; guards carry their polarity.
    pub feasible: BTreeSet<(Context, Option<bool>)>,
    /// Contexts executed on every run of the thread.
    pub must_exec: BTreeSet<Context>,
    pub loops: BTreeMap<(String, CallString, NodeId), LoopStat>,
    pub exit: S,
}

/// Callee, call string and entry state of a memoized invocation.
type CallKey<S> = (String, CallString, S);

pub struct Engine<'a, A: Analysis> {
    analysis: &'a A,
    cfgs: &'a CfgSet,
    thread: ThreadId,
    k: usize,
    widen_delay: u32,
    cache: HashMap<CallKey<A::State>, Rc<FnResult<A::State>>>,
}

impl<'a, A: Analysis> Engine<'a, A> {
    pub fn new(analysis: &'a A, cfgs: &'a CfgSet, thread: ThreadId, k: usize) -> Self {
        Engine {
            analysis,
            cfgs,
            thread,
            k,
            widen_delay: 3,
            cache: HashMap::new(),
        }
    }

    /// Analyse `entry` from `init` and replay the result into a recording.
    pub fn run(&mut self, entry: &str, init: A::State) -> Recording<A::State> {
        let mut rec = Recording {
            pre: BTreeMap::new(),
            feasible: BTreeSet::new(),
            must_exec: BTreeSet::new(),
            loops: BTreeMap::new(),
            exit: self.analysis.bottom(),
        };
        let r = self.analyze(entry, &CallString::default(), init.clone());
        rec.exit = r.exit.clone();
        self.record(entry, &CallString::default(), init, true, &mut rec);
        rec
    }

    fn ctx(&self, cs: &CallString, stmt: StmtId) -> Context {
        Context {
            thread: self.thread,
            cs: cs.clone(),
            stmt,
        }
    }

    fn call_of(&self, label: &EdgeLabel) -> Option<(StmtId, &'a str, &'a [Expr], Option<&'a Expr>)> {
        let EdgeLabel::Stmt(id) = label else {
            return None;
        };
        match &self.cfgs.stmt(*id).kind {
            StmtKind::Call { func, args, result } => {
                Some((*id, func.as_str(), args.as_slice(), result.as_ref()))
            }
            _ => None,
        }
    }

    fn edge_post(&mut self, cs: &CallString, e: &Edge, s: &A::State) -> A::State {
        let a = self.analysis;
        let ctx = self.ctx(cs, e.label.stmt());
        match self.call_of(&e.label) {
            Some((site, callee, args, result)) => {
                let ccs = cs.push(site, callee, self.k);
                let centry = a.call_entry(&ctx, &ccs, callee, args, s);
                if a.is_bottom(&centry) {
                    return a.bottom();
                }
                let r = self.analyze(callee, &ccs, centry);
                a.call_return(&ctx, &ccs, callee, result, s, &r.exit)
            }
            None => a.transfer(&ctx, &e.label, s),
        }
    }

    fn analyze(&mut self, func: &str, cs: &CallString, entry: A::State) -> Rc<FnResult<A::State>> {
        let key = (func.to_string(), cs.clone(), entry);
        if let Some(r) = self.cache.get(&key) {
            return r.clone();
        }
        let entry = key.2.clone();
        let a = self.analysis;
        let cfg = self.cfgs.get(func);
        let mut states = vec![a.bottom(); cfg.num_nodes];
        states[cfg.entry] = entry.clone();
        let mut pos = vec![usize::MAX; cfg.num_nodes];
        for (i, &n) in cfg.rpo.iter().enumerate() {
            pos[n] = i;
        }
        let mut stats: BTreeMap<NodeId, LoopStat> = cfg
            .loop_heads
            .iter()
            .map(|&h| (h, LoopStat::default()))
            .collect();
        let mut work = BTreeSet::from([pos[cfg.entry]]);
        while let Some(i) = work.pop_first() {
            let node = cfg.rpo[i];
            let s = states[node].clone();
            if a.is_bottom(&s) {
                continue;
            }
            for ei in cfg.succ[node].clone() {
                let e = &cfg.edges[ei];
                let post = self.edge_post(cs, e, &s);
                if a.is_bottom(&post) {
                    continue;
                }
                let d = e.dst;
                let joined = a.join(&states[d], &post);
                if joined == states[d] {
                    continue;
                }
                let new = match stats.get_mut(&d) {
                    Some(stat) if stat.join_visits < self.widen_delay => {
                        stat.join_visits += 1;
                        joined
                    }
                    Some(stat) => {
                        stat.widen_visits += 1;
                        a.widen(&states[d], &joined)
                    }
                    None => joined,
                };
                states[d] = new;
                work.insert(pos[d]);
            }
        }
        // one descending pass in reverse postorder
        for &node in &cfg.rpo {
            let mut acc = if node == cfg.entry {
                entry.clone()
            } else {
                a.bottom()
            };
            for &ei in &cfg.pred[node] {
                let e = &cfg.edges[ei];
                let s = states[e.src].clone();
                if a.is_bottom(&s) {
                    continue;
                }
                let post = self.edge_post(cs, e, &s);
                acc = a.join(&acc, &post);
            }
            if let Some(stat) = stats.get_mut(&node) {
                stat.descending += 1;
            }
            states[node] = acc;
        }
        let r = Rc::new(FnResult {
            exit: states[cfg.exit].clone(),
            nodes: states,
            loops: stats.into_iter().collect(),
        });
        self.cache.insert(key, r.clone());
        r
    }

    fn record(
        &mut self,
        func: &str,
        cs: &CallString,
        entry: A::State,
        must: bool,
        rec: &mut Recording<A::State>,
    ) {
        let a = self.analysis;
        let r = self.analyze(func, cs, entry);
        let cfg = self.cfgs.get(func);
        for (node, stat) in &r.loops {
            let slot = rec
                .loops
                .entry((func.to_string(), cs.clone(), *node))
                .or_default();
            *slot = slot.max(stat);
        }
        let n_edges = cfg.edges.len();
        let mut live = vec![false; n_edges];
        let mut feasible = vec![false; n_edges];
        for (i, e) in cfg.edges.iter().enumerate() {
            let pre = &r.nodes[e.src];
            let ctx = self.ctx(cs, e.label.stmt());
            if a.is_bottom(pre) {
                rec.pre.entry(ctx).or_insert_with(|| a.bottom());
                continue;
            }
            live[i] = true;
            let joined = match rec.pre.get(&ctx) {
                Some(old) => a.join(old, pre),
                None => pre.clone(),
            };
            rec.pre.insert(ctx.clone(), joined);
            let post = self.edge_post(cs, e, pre);
            if !a.is_bottom(&post) {
                feasible[i] = true;
                let pol = match &e.label {
                    EdgeLabel::Guard { polarity, .. } => Some(*polarity),
                    EdgeLabel::Stmt(_) => None,
                };
                rec.feasible.insert((ctx, pol));
            }
        }
        let must_stmts = if must {
            must_exec_stmts(self.cfgs, func, &live, &feasible)
        } else {
            BTreeSet::new()
        };
        for s in &must_stmts {
            rec.must_exec.insert(self.ctx(cs, *s));
        }
        for (i, e) in cfg.edges.iter().enumerate() {
            if !live[i] {
                continue;
            }
            if let Some((site, callee, args, _)) = self.call_of(&e.label) {
                let ctx = self.ctx(cs, site);
                let ccs = cs.push(site, callee, self.k);
                let centry = a.call_entry(&ctx, &ccs, callee, args, &r.nodes[e.src]);
                if !a.is_bottom(&centry) {
                    self.record(callee, &ccs, centry, must_stmts.contains(&site), rec);
                }
            }
        }
    }
}

/// Statements that every maximal feasible path from the entry traverses.
///
/// A path avoiding `s` may end at the exit, at a node without feasible
/// successors, inside a non-returning statement, or loop forever.
fn must_exec_stmts(cfgs: &CfgSet, func: &str, live: &[bool], feasible: &[bool]) -> BTreeSet<StmtId> {
    let cfg = cfgs.get(func);
    let stmts: BTreeSet<StmtId> = cfg
        .edges
        .iter()
        .enumerate()
        .filter(|(i, _)| live[*i])
        .map(|(_, e)| e.label.stmt())
        .collect();
    let mut out = BTreeSet::new();
    for s in stmts {
        let avoid = |i: usize| cfg.edges[i].label.stmt() == s;
        let mut seen = vec![false; cfg.num_nodes];
        let mut stack = vec![cfg.entry];
        seen[cfg.entry] = true;
        let mut escapes = false;
        while let Some(n) = stack.pop() {
            if n == cfg.exit {
                escapes = true;
                break;
            }
            let outs = &cfg.succ[n];
            let continues = outs
                .iter()
                .any(|&i| (live[i] && feasible[i]) || (live[i] && avoid(i)));
            // a statement that never completes ends the path
            let stuck_elsewhere = outs.iter().any(|&i| {
                live[i]
                    && !feasible[i]
                    && !avoid(i)
                    && matches!(cfg.edges[i].label, EdgeLabel::Stmt(_))
            });
            if !continues || stuck_elsewhere {
                escapes = true;
                break;
            }
            for &i in outs {
                if feasible[i] && !avoid(i) {
                    let d = cfg.edges[i].dst;
                    if !seen[d] {
                        seen[d] = true;
                        stack.push(d);
                    }
                }
            }
        }
        if !escapes && !has_cycle(cfg, &seen, |i| feasible[i] && !avoid(i)) {
            out.insert(s);
        }
    }
    out
}

fn has_cycle(cfg: &crate::frontend::Cfg, within: &[bool], usable: impl Fn(usize) -> bool) -> bool {
    let mut indeg = vec![0usize; cfg.num_nodes];
    for (i, e) in cfg.edges.iter().enumerate() {
        if usable(i) && within[e.src] && within[e.dst] {
            indeg[e.dst] += 1;
        }
    }
    let mut queue: Vec<NodeId> = (0..cfg.num_nodes)
        .filter(|&n| within[n] && indeg[n] == 0)
        .collect();
    let mut removed = 0;
    while let Some(n) = queue.pop() {
        removed += 1;
        for &i in &cfg.succ[n] {
            let e = &cfg.edges[i];
            if usable(i) && within[e.dst] {
                indeg[e.dst] -= 1;
                if indeg[e.dst] == 0 {
                    queue.push(e.dst);
                }
            }
        }
    }
    removed < within.iter().filter(|&&w| w).count()
}
