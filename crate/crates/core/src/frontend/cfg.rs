//! Per-function control-flow graphs with statement-labelled edges.
//!
//! Simple statements label exactly one edge. `if`/`while` label two guard
//! edges of opposite polarity leaving the same node. `break` and the end of a
//! loop body are realised by merging nodes, so no unlabelled edges exist.

use std::collections::{BTreeMap, BTreeSet};

use super::ast::*;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EdgeLabel {
    Stmt(StmtId),
    Guard {
        stmt: StmtId,
        cond: Expr,
        polarity: bool,
    },
}

impl EdgeLabel {
    pub fn stmt(&self) -> StmtId {
        match self {
            EdgeLabel::Stmt(id) => *id,
            EdgeLabel::Guard { stmt, .. } => *stmt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub label: EdgeLabel,
}

#[derive(Debug, Clone)]
pub struct Cfg {
    pub func: String,
    pub num_nodes: usize,
    pub entry: NodeId,
    pub exit: NodeId,
    pub edges: Vec<Edge>,
    pub succ: Vec<Vec<usize>>,
    pub pred: Vec<Vec<usize>>,
    /// Nodes reachable from entry in reverse postorder.
    pub rpo: Vec<NodeId>,
    pub loop_heads: BTreeSet<NodeId>,
    /// Source node of the edge(s) of each statement.
    pub stmt_source: BTreeMap<StmtId, NodeId>,
    scc: Vec<usize>,
    scc_size: Vec<usize>,
}

impl Cfg {
    pub fn out_edges(&self, n: NodeId) -> impl Iterator<Item = &Edge> + '_ {
        self.succ[n].iter().map(move |&e| &self.edges[e])
    }

    pub fn in_edges(&self, n: NodeId) -> impl Iterator<Item = &Edge> + '_ {
        self.pred[n].iter().map(move |&e| &self.edges[e])
    }

    pub fn edge_on_cycle(&self, e: &Edge) -> bool {
        e.src == e.dst || (self.scc[e.src] == self.scc[e.dst] && self.scc_size[self.scc[e.src]] > 1)
    }

    /// True if the statement can execute more than once per invocation.
    pub fn stmt_on_cycle(&self, id: StmtId) -> bool {
        self.edges
            .iter()
            .any(|e| e.label.stmt() == id && self.edge_on_cycle(e))
    }

    pub fn stmt_edges(&self, id: StmtId) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| e.label.stmt() == id)
    }

    pub fn reachable(&self) -> BTreeSet<NodeId> {
        self.rpo.iter().copied().collect()
    }

    /// Shortest statement path from entry to the source node of `target`.
    pub fn path_to(&self, target: StmtId) -> Vec<StmtId> {
        let Some(&goal) = self.stmt_source.get(&target) else {
            return Vec::new();
        };
        let mut prev: Vec<Option<usize>> = vec![None; self.num_nodes];
        let mut seen = vec![false; self.num_nodes];
        let mut queue = std::collections::VecDeque::new();
        seen[self.entry] = true;
        queue.push_back(self.entry);
        while let Some(n) = queue.pop_front() {
            if n == goal {
                break;
            }
            for &ei in &self.succ[n] {
                let d = self.edges[ei].dst;
                if !seen[d] {
                    seen[d] = true;
                    prev[d] = Some(ei);
                    queue.push_back(d);
                }
            }
        }
        let mut path = Vec::new();
        let mut cur = goal;
        while let Some(ei) = prev[cur] {
            let e = &self.edges[ei];
            path.push(e.label.stmt());
            cur = e.src;
        }
        path.reverse();
        path
    }
}

/// All CFGs of a program plus a flat statement table.
#[derive(Debug, Clone)]
pub struct CfgSet {
    pub cfgs: BTreeMap<String, Cfg>,
    /// Statement by id with nested branch bodies removed.
    pub stmts: BTreeMap<StmtId, (String, Stmt)>,
}

impl CfgSet {
    pub fn get(&self, func: &str) -> &Cfg {
        &self.cfgs[func]
    }

    pub fn stmt(&self, id: StmtId) -> &Stmt {
        &self.stmts[&id].1
    }

    pub fn func_of(&self, id: StmtId) -> &str {
        &self.stmts[&id].0
    }

    pub fn loc(&self, id: StmtId) -> Loc {
        self.stmts.get(&id).map(|(_, s)| s.loc).unwrap_or_default()
    }

    /// Direct callees of `func`.
    pub fn callees(&self, func: &str) -> BTreeSet<String> {
        let cfg = self.get(func);
        cfg.edges
            .iter()
            .filter_map(|e| match &e.label {
                EdgeLabel::Stmt(id) => match &self.stmt(*id).kind {
                    StmtKind::Call { func, .. } => Some(func.clone()),
                    _ => None,
                },
                _ => None,
            })
            .collect()
    }

    /// A call cycle reachable from `entry`, if any.
    pub fn find_recursion(&self, entry: &str) -> Option<Vec<String>> {
        fn dfs(
            set: &CfgSet,
            f: &str,
            stack: &mut Vec<String>,
            done: &mut BTreeSet<String>,
        ) -> Option<Vec<String>> {
            if let Some(pos) = stack.iter().position(|s| s == f) {
                let mut cyc = stack[pos..].to_vec();
                cyc.push(f.to_string());
                return Some(cyc);
            }
            if done.contains(f) {
                return None;
            }
            stack.push(f.to_string());
            for c in set.callees(f) {
                if let Some(c) = dfs(set, &c, stack, done) {
                    return Some(c);
                }
            }
            stack.pop();
            done.insert(f.to_string());
            None
        }
        dfs(self, entry, &mut Vec::new(), &mut BTreeSet::new())
    }
}

/// Build one CFG per function.
pub fn build_cfg(program: &Program) -> CfgSet {
    let mut cfgs = BTreeMap::new();
    let mut stmts = BTreeMap::new();
    for (name, f) in &program.functions {
        cfgs.insert(name.clone(), Builder::build(f));
        for (_, s) in program
            .statements()
            .into_iter()
            .filter(|(fname, _)| *fname == name.as_str())
        {
            let mut flat = s.clone();
            match &mut flat.kind {
                StmtKind::If {
                    then_branch,
                    else_branch,
                    ..
                } => {
                    then_branch.clear();
                    else_branch.clear();
                }
                StmtKind::While { body, .. } => body.clear(),
                _ => {}
            }
            stmts.insert(s.id, (name.clone(), flat));
        }
    }
    CfgSet { cfgs, stmts }
}

struct Builder {
    parent: Vec<NodeId>,
    edges: Vec<Edge>,
    exit: NodeId,
    breaks: Vec<Vec<NodeId>>,
}

impl Builder {
    fn build(f: &Function) -> Cfg {
        let mut b = Builder {
            parent: Vec::new(),
            edges: Vec::new(),
            exit: 0,
            breaks: Vec::new(),
        };
        let entry = b.node();
        b.exit = b.node();
        let end = b.block(&f.body, entry);
        b.merge(end, b.exit);
        b.finish(f.name.clone(), entry)
    }

    fn node(&mut self) -> NodeId {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut n: NodeId) -> NodeId {
        while self.parent[n] != n {
            self.parent[n] = self.parent[self.parent[n]];
            n = self.parent[n];
        }
        n
    }

    /// Make `from` an alias of `into`.
    fn merge(&mut self, from: NodeId, into: NodeId) {
        let a = self.find(from);
        let b = self.find(into);
        if a != b {
            self.parent[a] = b;
        }
    }

    fn edge(&mut self, src: NodeId, label: EdgeLabel) -> NodeId {
        let dst = self.node();
        self.edges.push(Edge { src, dst, label });
        dst
    }

    fn block(&mut self, stmts: &[Stmt], mut cur: NodeId) -> NodeId {
        for s in stmts {
            cur = self.stmt(s, cur);
        }
        cur
    }

    fn stmt(&mut self, s: &Stmt, cur: NodeId) -> NodeId {
        match &s.kind {
            StmtKind::If {
                cond,
                then_branch,
                else_branch,
            } => {
                let t = self.edge(
                    cur,
                    EdgeLabel::Guard {
                        stmt: s.id,
                        cond: cond.clone(),
                        polarity: true,
                    },
                );
                let e = self.edge(
                    cur,
                    EdgeLabel::Guard {
                        stmt: s.id,
                        cond: cond.clone(),
                        polarity: false,
                    },
                );
                let t_end = self.block(then_branch, t);
                let e_end = self.block(else_branch, e);
                self.merge(e_end, t_end);
                t_end
            }
            StmtKind::While { cond, body } => {
                let head = cur;
                let body_start = self.edge(
                    head,
                    EdgeLabel::Guard {
                        stmt: s.id,
                        cond: cond.clone(),
                        polarity: true,
                    },
                );
                let after = self.edge(
                    head,
                    EdgeLabel::Guard {
                        stmt: s.id,
                        cond: cond.clone(),
                        polarity: false,
                    },
                );
                self.breaks.push(Vec::new());
                let body_end = self.block(body, body_start);
                self.merge(body_end, head);
                for b in self.breaks.pop().unwrap() {
                    self.merge(b, after);
                }
                after
            }
            StmtKind::Break => {
                self.breaks
                    .last_mut()
                    .expect("break outside loop")
                    .push(cur);
                self.node()
            }
            StmtKind::Return(_) => {
                let dst = self.edge(cur, EdgeLabel::Stmt(s.id));
                let exit = self.exit;
                self.merge(dst, exit);
                self.node()
            }
            _ => self.edge(cur, EdgeLabel::Stmt(s.id)),
        }
    }

    fn finish(mut self, func: String, entry: NodeId) -> Cfg {
        // compact union-find representatives into dense node ids
        let mut remap = BTreeMap::new();
        for n in 0..self.parent.len() {
            let r = self.find(n);
            let next = remap.len();
            remap.entry(r).or_insert(next);
        }
        let map = |b: &mut Builder, n: NodeId| -> NodeId {
            let r = b.find(n);
            remap[&r]
        };
        let entry = map(&mut self, entry);
        let exit_raw = self.exit;
        let exit = map(&mut self, exit_raw);
        let raw_edges = std::mem::take(&mut self.edges);
        let edges: Vec<Edge> = raw_edges
            .into_iter()
            .map(|e| Edge {
                src: map(&mut self, e.src),
                dst: map(&mut self, e.dst),
                label: e.label,
            })
            .collect();
        let num_nodes = remap.len();
        let mut succ = vec![Vec::new(); num_nodes];
        let mut pred = vec![Vec::new(); num_nodes];
        let mut stmt_source = BTreeMap::new();
        for (i, e) in edges.iter().enumerate() {
            succ[e.src].push(i);
            pred[e.dst].push(i);
            stmt_source.insert(e.label.stmt(), e.src);
        }

        // DFS: postorder and back edges
        let mut state = vec![0u8; num_nodes];
        let mut post = Vec::new();
        let mut loop_heads = BTreeSet::new();
        let mut stack: Vec<(NodeId, usize)> = vec![(entry, 0)];
        state[entry] = 1;
        while let Some((n, i)) = stack.pop() {
            if i < succ[n].len() {
                stack.push((n, i + 1));
                let d = edges[succ[n][i]].dst;
                match state[d] {
                    0 => {
                        state[d] = 1;
                        stack.push((d, 0));
                    }
                    1 => {
                        loop_heads.insert(d);
                    }
                    _ => {}
                }
            } else {
                state[n] = 2;
                post.push(n);
            }
        }
        post.reverse();
        let (scc, scc_size) = tarjan(num_nodes, &succ, &edges);
        Cfg {
            func,
            num_nodes,
            entry,
            exit,
            edges,
            succ,
            pred,
            rpo: post,
            loop_heads,
            stmt_source,
            scc,
            scc_size,
        }
    }
}

fn tarjan(n: usize, succ: &[Vec<usize>], edges: &[Edge]) -> (Vec<usize>, Vec<usize>) {
    struct St<'a> {
        succ: &'a [Vec<usize>],
        edges: &'a [Edge],
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        comp: Vec<usize>,
        sizes: Vec<usize>,
    }
    fn visit(s: &mut St, v: usize) {
        s.index[v] = Some(s.next);
        s.low[v] = s.next;
        s.next += 1;
        s.stack.push(v);
        s.on[v] = true;
        for k in 0..s.succ[v].len() {
            let w = s.edges[s.succ[v][k]].dst;
            match s.index[w] {
                None => {
                    visit(s, w);
                    s.low[v] = s.low[v].min(s.low[w]);
                }
                Some(iw) if s.on[w] => s.low[v] = s.low[v].min(iw),
                _ => {}
            }
        }
        if Some(s.low[v]) == s.index[v] {
            let id = s.sizes.len();
            let mut size = 0;
            loop {
                let w = s.stack.pop().unwrap();
                s.on[w] = false;
                s.comp[w] = id;
                size += 1;
                if w == v {
                    break;
                }
            }
            s.sizes.push(size);
        }
    }
    let mut s = St {
        succ,
        edges,
        index: vec![None; n],
        low: vec![0; n],
        on: vec![false; n],
        stack: Vec::new(),
        next: 0,
        comp: vec![0; n],
        sizes: Vec::new(),
    };
    for v in 0..n {
        if s.index[v].is_none() {
            visit(&mut s, v);
        }
    }
    (s.comp, s.sizes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_program;

    fn cfg_of(src: &str, func: &str) -> (Program, CfgSet, Cfg) {
        let p = parse_program(src, "t.c", MachineModel::Lp64).unwrap();
        let set = build_cfg(&p);
        let c = set.get(func).clone();
        (p, set, c)
    }

    fn guards(c: &Cfg) -> Vec<&Edge> {
        c.edges
            .iter()
            .filter(|e| matches!(e.label, EdgeLabel::Guard { .. }))
            .collect()
    }

    #[test]
    fn linear_body() {
        let (_, _, c) = cfg_of("int x; void f() { x = 1; return; } int main() { return 0; }", "f");
        assert_eq!(c.edges.len(), 2);
        assert!(guards(&c).is_empty());
        assert_eq!(c.edges[1].dst, c.exit);
        assert_eq!(c.edges[0].src, c.entry);
        assert!(c.loop_heads.is_empty());
        assert_eq!(c.out_edges(c.exit).count(), 0);
    }

    #[test]
    fn while_loop_shape() {
        let (_, _, c) = cfg_of(
            "int x; void f() { while (x < 10) x = x + 1; } int main() { return 0; }",
            "f",
        );
        let g = guards(&c);
        assert_eq!(g.len(), 2);
        let head = g[0].src;
        assert_eq!(g[1].src, head);
        assert!(c.loop_heads.contains(&head));
        let body = c
            .edges
            .iter()
            .find(|e| matches!(e.label, EdgeLabel::Stmt(_)))
            .unwrap();
        assert_eq!(body.dst, head, "back edge to the guard node");
        let exit_guard = g
            .iter()
            .find(|e| matches!(e.label, EdgeLabel::Guard { polarity: false, .. }))
            .unwrap();
        assert_eq!(exit_guard.dst, c.exit);
    }

    #[test]
    fn if_else_diamond() {
        let (_, set, c) = cfg_of(
            "pthread_mutex_t m; pthread_mutex_t n; int c;
             void f() { if (c) pthread_mutex_lock(&m); else pthread_mutex_lock(&n); }
             int main() { return 0; }",
            "f",
        );
        assert_eq!(guards(&c).len(), 2);
        let locks: Vec<_> = c
            .edges
            .iter()
            .filter(|e| matches!(set.stmt(e.label.stmt()).kind, StmtKind::Lock(_)))
            .collect();
        assert_eq!(locks.len(), 2);
        assert_eq!(locks[0].dst, locks[1].dst);
    }

    #[test]
    fn each_statement_on_one_edge() {
        let (p, set, _) = cfg_of(
            "int g; void *t(void *a) { int i; i = 0; while (i < 3) { if (g) break; i = i + 1; } return 0; }
             int main() { pthread_t h; pthread_create(&h, 0, t, 0); pthread_join(h, 0); return 0; }",
            "t",
        );
        for (f, s) in p.statements() {
            let c = set.get(f);
            let n = c.stmt_edges(s.id).count();
            match s.kind {
                StmtKind::If { .. } | StmtKind::While { .. } => assert_eq!(n, 2),
                StmtKind::Break => assert_eq!(n, 0),
                _ => assert_eq!(n, 1, "stmt {}", s.id),
            }
        }
    }

    #[test]
    fn empty_loop_is_self_loop() {
        let (_, _, c) = cfg_of("int f0; void w() { while (f0 == 0) {} } int main() { return 0; }", "w");
        let t = c
            .edges
            .iter()
            .find(|e| matches!(e.label, EdgeLabel::Guard { polarity: true, .. }))
            .unwrap();
        assert_eq!(t.src, t.dst);
        assert!(c.edge_on_cycle(t));
    }

    #[test]
    fn recursion_is_found() {
        let p = parse_program(
            "int f(int n) { int r; r = f(n); return r; } int main() { int x; x = f(1); return 0; }",
            "t.c",
            MachineModel::Lp64,
        )
        .unwrap();
        let set = build_cfg(&p);
        assert!(set.find_recursion("main").is_some());
    }
}
