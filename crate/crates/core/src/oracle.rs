//! Bounded concrete interpreter that explores every interleaving of a
//! program and decides whether two conflicting accesses can be enabled at
//! the same time.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::absint::{Base, CallString, Context, ThreadId};
use crate::frontend::typeck::{field_offset, pointee_size, type_of};
use crate::frontend::{
    BinOp, CType, Cfg, CfgSet, EdgeLabel, Expr, Loc, NodeId, Program, Scope, StmtId, StmtKind,
    UnOp,
};
use crate::mem_access::AccessKind;

/// Result value of a trylock on a busy mutex.
const EBUSY: i64 = 16;

/// Instance number of the main thread.
const MAIN_THREAD: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Bounds {
    /// Iterations of one loop per entry, per thread.
    pub loops: u32,
    /// Threads created in addition to main.
    pub threads: usize,
    /// Distinct explored states.
    pub states: usize,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            loops: 8,
            threads: 4,
            states: 1_000_000,
        }
    }
}

impl FromStr for Bounds {
    type Err = String;

    /// `L,T,S`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [l, t, st] = parts.as_slice() else {
            return Err(format!("expected L,T,S but got `{s}`"));
        };
        let num = |x: &str| x.parse::<u64>().map_err(|e| format!("`{x}`: {e}"));
        Ok(Bounds {
            loops: num(l)? as u32,
            threads: num(t)? as usize,
            states: num(st)? as usize,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
pub enum ConcreteTrap {
    #[error("division by zero at {0}")]
    DivisionByZero(Loc),
    #[error("out-of-bounds access at {0}")]
    OutOfBounds(Loc),
    #[error("invalid pointer dereference at {0}")]
    InvalidPointer(Loc),
    #[error("arithmetic overflow at {0}")]
    Overflow(Loc),
    #[error("invalid thread handle at {0}")]
    BadHandle(Loc),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    Global(String),
    Frame {
        tid: usize,
        depth: usize,
        formal: bool,
        name: String,
    },
    Heap {
        site: StmtId,
        n: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Val {
    Int(i64),
    Ptr(Block, i64),
    Func(String),
}

impl Val {
    fn truthy(&self) -> bool {
        !matches!(self, Val::Int(0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Frame {
    func: String,
    node: NodeId,
    cs: CallString,
    /// Call statement to return to.
    site: Option<StmtId>,
    ret: Option<Val>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Thread {
    entry: String,
    stack: Vec<Frame>,
}

impl Thread {
    fn finished(&self) -> bool {
        self.stack.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
struct RwState {
    writer: Option<usize>,
    readers: Vec<usize>,
}

type Addr = (Block, i64);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct State {
    threads: Vec<Thread>,
    /// Size and non-zero cells of every live block.
    mem: BTreeMap<Block, (u64, BTreeMap<i64, Val>)>,
    mutexes: BTreeMap<Addr, usize>,
    rwlocks: BTreeMap<Addr, RwState>,
    heap_next: BTreeMap<StmtId, u32>,
    /// Main has returned, ending the program.
    over: bool,
}

/// Loop iteration counts per (thread, loop statement).
type Counters = BTreeMap<(usize, StmtId), u32>;

fn dominates(a: &Counters, b: &Counters) -> bool {
    a.iter().all(|(k, v)| b.get(k).is_some_and(|w| v <= w))
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Touch {
    block: Block,
    lo: i64,
    hi: i64,
    kind: AccessKind,
    atomic: bool,
}

impl Touch {
    fn conflicts(&self, o: &Touch) -> bool {
        self.block == o.block
            && self.lo <= o.hi
            && o.lo <= self.hi
            && (self.kind == AccessKind::Write || o.kind == AccessKind::Write)
            && !self.atomic
            && !o.atomic
    }
}

/// A thread's next statement: entry function, call string, statement.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct StepSite {
    pub entry: String,
    pub cs: CallString,
    pub stmt: StmtId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WitnessStep {
    /// Thread instance, in creation order; main is 0.
    pub thread: usize,
    pub site: StepSite,
    pub loc: Loc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Witness {
    pub first: WitnessStep,
    pub second: WitnessStep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "result")]
pub enum OracleResult {
    Race(Witness),
    NoRace,
    BoundExceeded,
}

impl OracleResult {
    pub fn is_race(&self) -> bool {
        matches!(self, OracleResult::Race(_))
    }
}

impl fmt::Display for OracleResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OracleResult::Race(_) => "race",
            OracleResult::NoRace => "no_race",
            OracleResult::BoundExceeded => "bound_exceeded",
        })
    }
}

enum Outcome {
    Blocked,
    Trap(ConcreteTrap),
    Step {
        next: State,
        counters: Counters,
        touches: Vec<Touch>,
        /// A bound forbids continuing from `next`.
        cut: bool,
    },
}

struct Machine<'a> {
    p: &'a Program,
    cfgs: &'a CfgSet,
    bounds: Bounds,
    k: usize,
}

/// Evaluation within one frame of one thread, recording accesses.
struct Exec<'a, 'b> {
    m: &'b Machine<'a>,
    st: &'b mut State,
    tid: usize,
    depth: usize,
    func: String,
    loc: Loc,
    touches: Vec<Touch>,
}

type R<T> = Result<T, ConcreteTrap>;

impl<'a, 'b> Exec<'a, 'b> {
    fn ty(&self, e: &Expr) -> CType {
        self.m.p.resolve_type(type_of(self.m.p, &self.func, e))
    }

    fn var_block(&self, name: &str, scope: Scope) -> Block {
        match scope {
            Scope::Global => Block::Global(name.to_string()),
            Scope::Local | Scope::Formal => Block::Frame {
                tid: self.tid,
                depth: self.depth,
                formal: scope == Scope::Formal,
                name: name.to_string(),
            },
        }
    }

    fn check(&self, b: &Block, off: i64, width: u64) -> R<()> {
        let (size, _) = self
            .st
            .mem
            .get(b)
            .ok_or(ConcreteTrap::InvalidPointer(self.loc))?;
        if off < 0 || off as u64 + width > *size {
            return Err(ConcreteTrap::OutOfBounds(self.loc));
        }
        Ok(())
    }

    fn touch(&mut self, b: &Block, off: i64, width: u64, kind: AccessKind, atomic: bool) {
        self.touches.push(Touch {
            block: b.clone(),
            lo: off,
            hi: off + width as i64 - 1,
            kind,
            atomic,
        });
    }

    fn load(&mut self, b: &Block, off: i64, ty: &CType) -> R<Val> {
        let width = ty.size(self.m.p.machine).max(1);
        self.touch(b, off, width, AccessKind::Read, *ty == CType::AtomicInt);
        self.check(b, off, width)?;
        Ok(self.st.mem[b].1.get(&off).cloned().unwrap_or(Val::Int(0)))
    }

    fn store(&mut self, b: &Block, off: i64, ty: &CType, v: Val) -> R<()> {
        let width = ty.size(self.m.p.machine).max(1);
        self.touch(b, off, width, AccessKind::Write, *ty == CType::AtomicInt);
        self.check(b, off, width)?;
        let cells = &mut self.st.mem.get_mut(b).unwrap().1;
        cells.retain(|o, _| *o < off || *o >= off + width as i64 || *o == off);
        if v == Val::Int(0) {
            cells.remove(&off);
        } else {
            cells.insert(off, v);
        }
        Ok(())
    }

    fn ptr(&mut self, e: &Expr) -> R<Addr> {
        match self.value(e)? {
            Val::Ptr(b, o) => Ok((b, o)),
            _ => Err(ConcreteTrap::InvalidPointer(self.loc)),
        }
    }

    fn int(&mut self, e: &Expr) -> R<i64> {
        match self.value(e)? {
            Val::Int(v) => Ok(v),
            _ => Err(ConcreteTrap::InvalidPointer(self.loc)),
        }
    }

    fn addr(&mut self, lv: &Expr) -> R<Addr> {
        match lv {
            Expr::Var(n, s) => Ok((self.var_block(n, *s), 0)),
            Expr::Deref(p) => self.ptr(p),
            Expr::Index(a, i) => {
                let (b, o) = match self.ty(a) {
                    CType::Array(..) => self.addr(a)?,
                    _ => self.ptr(a)?,
                };
                let idx = self.int(i)?;
                let elem = self.ty(lv).size(self.m.p.machine) as i64;
                let by = idx.checked_mul(elem).ok_or(ConcreteTrap::Overflow(self.loc))?;
                Ok((b, o + by))
            }
            Expr::Field(r, f) => {
                let off = field_offset(self.m.p, &self.func, r, f).unwrap_or(0) as i64;
                let (b, o) = self.addr(r)?;
                Ok((b, o + off))
            }
            Expr::Cast(_, e) => self.addr(e),
            other => self.ptr(other),
        }
    }

    fn value(&mut self, e: &Expr) -> R<Val> {
        match e {
            Expr::Int(v) => Ok(Val::Int(*v)),
            Expr::SizeOf(t) => Ok(Val::Int(self.m.p.resolve_type(t.clone()).size(self.m.p.machine) as i64)),
            Expr::Func(n) => Ok(Val::Func(n.clone())),
            Expr::AddrOf(lv) => {
                let (b, o) = self.addr(lv)?;
                Ok(Val::Ptr(b, o))
            }
            Expr::Var(..) | Expr::Deref(_) | Expr::Index(..) | Expr::Field(..) => {
                let ty = self.ty(e);
                let (b, o) = self.addr(e)?;
                if matches!(ty, CType::Array(..)) {
                    return Ok(Val::Ptr(b, o));
                }
                self.load(&b, o, &ty)
            }
            Expr::Cast(_, inner) => self.value(inner),
            Expr::Unary(UnOp::Neg, inner) => {
                let v = self.int(inner)?;
                v.checked_neg()
                    .map(Val::Int)
                    .ok_or(ConcreteTrap::Overflow(self.loc))
            }
            Expr::Unary(UnOp::Not, inner) => Ok(Val::Int(!self.value(inner)?.truthy() as i64)),
            Expr::Binary(op, a, b) => self.binary(*op, a, b),
        }
    }

    fn binary(&mut self, op: BinOp, a: &Expr, b: &Expr) -> R<Val> {
        let overflow = ConcreteTrap::Overflow(self.loc);
        if op == BinOp::And || op == BinOp::Or {
            let l = self.value(a)?.truthy();
            if l == (op == BinOp::Or) {
                return Ok(Val::Int(l as i64));
            }
            return Ok(Val::Int(self.value(b)?.truthy() as i64));
        }
        let va = self.value(a)?;
        let vb = self.value(b)?;
        let scale_a = pointee_size(self.m.p, &self.func, a) as i64;
        let scale_b = pointee_size(self.m.p, &self.func, b) as i64;
        match (op, va, vb) {
            (BinOp::Add, Val::Ptr(blk, o), Val::Int(i)) => {
                let by = i.checked_mul(scale_a).ok_or(overflow.clone())?;
                Ok(Val::Ptr(blk, o.checked_add(by).ok_or(overflow)?))
            }
            (BinOp::Add, Val::Int(i), Val::Ptr(blk, o)) => {
                let by = i.checked_mul(scale_b).ok_or(overflow.clone())?;
                Ok(Val::Ptr(blk, o.checked_add(by).ok_or(overflow)?))
            }
            (BinOp::Sub, Val::Ptr(blk, o), Val::Int(i)) => {
                let by = i.checked_mul(scale_a).ok_or(overflow.clone())?;
                Ok(Val::Ptr(blk, o.checked_sub(by).ok_or(overflow)?))
            }
            (BinOp::Sub, Val::Ptr(b1, o1), Val::Ptr(b2, o2)) if b1 == b2 => {
                Ok(Val::Int((o1 - o2) / scale_a.max(1)))
            }
            (op, Val::Int(x), Val::Int(y)) => {
                let r = match op {
                    BinOp::Add => x.checked_add(y),
                    BinOp::Sub => x.checked_sub(y),
                    BinOp::Mul => x.checked_mul(y),
                    BinOp::Div | BinOp::Rem if y == 0 => {
                        return Err(ConcreteTrap::DivisionByZero(self.loc))
                    }
                    BinOp::Div => x.checked_div(y),
                    BinOp::Rem => x.checked_rem(y),
                    BinOp::Lt => Some((x < y) as i64),
                    BinOp::Le => Some((x <= y) as i64),
                    BinOp::Gt => Some((x > y) as i64),
                    BinOp::Ge => Some((x >= y) as i64),
                    BinOp::Eq => Some((x == y) as i64),
                    BinOp::Ne => Some((x != y) as i64),
                    BinOp::And | BinOp::Or => unreachable!(),
                };
                r.map(Val::Int).ok_or(overflow)
            }
            (BinOp::Eq, x, y) => Ok(Val::Int((x == y) as i64)),
            (BinOp::Ne, x, y) => Ok(Val::Int((x != y) as i64)),
            (op, Val::Ptr(b1, x), Val::Ptr(b2, y)) if b1 == b2 && op.is_comparison() => {
                self.binary_ints(op, x, y)
            }
            _ => Err(ConcreteTrap::InvalidPointer(self.loc)),
        }
    }

    fn binary_ints(&mut self, op: BinOp, x: i64, y: i64) -> R<Val> {
        Ok(Val::Int(match op {
            BinOp::Lt => x < y,
            BinOp::Le => x <= y,
            BinOp::Gt => x > y,
            BinOp::Ge => x >= y,
            BinOp::Eq => x == y,
            _ => x != y,
        } as i64))
    }

    fn assign(&mut self, lv: &Expr, rhs: &Expr) -> R<()> {
        let ty = self.ty(lv);
        if let CType::Record(def) = &ty {
            let size = def.size;
            let (sb, so) = self.addr(rhs)?;
            self.touch(&sb, so, size, AccessKind::Read, false);
            self.check(&sb, so, size)?;
            let src: Vec<(i64, Val)> = self.st.mem[&sb]
                .1
                .range(so..so + size as i64)
                .map(|(o, v)| (o - so, v.clone()))
                .collect();
            let (tb, to) = self.addr(lv)?;
            self.touch(&tb, to, size, AccessKind::Write, false);
            self.check(&tb, to, size)?;
            let cells = &mut self.st.mem.get_mut(&tb).unwrap().1;
            cells.retain(|o, _| *o < to || *o >= to + size as i64);
            for (o, v) in src {
                cells.insert(to + o, v);
            }
            return Ok(());
        }
        let v = self.value(rhs)?;
        let (b, o) = self.addr(lv)?;
        self.store(&b, o, &ty, v)
    }

    fn write_to(&mut self, lv: &Expr, v: Val) -> R<()> {
        let ty = self.ty(lv);
        let (b, o) = self.addr(lv)?;
        self.store(&b, o, &ty, v)
    }
}

impl<'a> Machine<'a> {
    fn cfg(&self, func: &str) -> &'a Cfg {
        self.cfgs.get(func)
    }

    fn initial(&self) -> State {
        let p = self.p;
        let mut mem = BTreeMap::new();
        for g in &p.globals {
            let ty = p.resolve_type(g.ty.clone());
            let mut cells = BTreeMap::new();
            for (o, _) in ty.scalar_slots(p.machine) {
                let v = g.initial_value(o, p.machine);
                if v != 0 {
                    cells.insert(o as i64, Val::Int(v));
                }
            }
            mem.insert(Block::Global(g.name.clone()), (ty.size(p.machine), cells));
        }
        let mut st = State {
            threads: Vec::new(),
            mem,
            mutexes: BTreeMap::new(),
            rwlocks: BTreeMap::new(),
            heap_next: BTreeMap::new(),
            over: false,
        };
        st.threads.push(Thread {
            entry: p.entry.clone(),
            stack: Vec::new(),
        });
        self.push_frame(&mut st, MAIN_THREAD, &p.entry, CallString::default(), None, &[]);
        let _ = self.settle(&mut st, MAIN_THREAD, &mut Vec::new());
        st
    }

    fn push_frame(&self, st: &mut State, tid: usize, func: &str, cs: CallString, site: Option<StmtId>, args: &[Val]) {
        let f = self.p.function(func).expect("function exists");
        let depth = st.threads[tid].stack.len();
        let mm = self.p.machine;
        for (i, d) in f.formals.iter().enumerate() {
            let mut cells = BTreeMap::new();
            match args.get(i) {
                Some(Val::Int(0)) | None => {}
                Some(v) => {
                    cells.insert(0, v.clone());
                }
            }
            let b = Block::Frame {
                tid,
                depth,
                formal: true,
                name: d.name.clone(),
            };
            st.mem.insert(b, (self.p.resolve_type(d.ty.clone()).size(mm), cells));
        }
        for d in &f.locals {
            let b = Block::Frame {
                tid,
                depth,
                formal: false,
                name: d.name.clone(),
            };
            st.mem.insert(b, (self.p.resolve_type(d.ty.clone()).size(mm), BTreeMap::new()));
        }
        st.threads[tid].stack.push(Frame {
            func: func.to_string(),
            node: self.cfg(func).entry,
            cs,
            site,
            ret: None,
        });
    }

    /// Pop frames that reached their exit, delivering return values.
    fn settle(&self, st: &mut State, tid: usize, touches: &mut Vec<Touch>) -> R<()> {
        loop {
            let Some(top) = st.threads[tid].stack.last() else {
                return Ok(());
            };
            if top.node != self.cfg(&top.func).exit {
                return Ok(());
            }
            let done = st.threads[tid].stack.pop().unwrap();
            let depth = st.threads[tid].stack.len();
            st.mem.retain(|b, _| !matches!(b, Block::Frame { tid: t, depth: d, .. } if *t == tid && *d == depth));
            let Some(caller) = st.threads[tid].stack.last().cloned() else {
                if tid == MAIN_THREAD {
                    st.over = true;
                }
                return Ok(());
            };
            let Some(site) = done.site else { continue };
            if let StmtKind::Call { result: Some(lv), .. } = &self.cfgs.stmt(site).kind {
                let mut ex = Exec {
                    m: self,
                    st,
                    tid,
                    depth: depth - 1,
                    func: caller.func.clone(),
                    loc: self.cfgs.loc(site),
                    touches: Vec::new(),
                };
                let r = ex.write_to(lv, done.ret.unwrap_or(Val::Int(0)));
                touches.extend(ex.touches);
                r?;
            }
        }
    }

    /// Statement the thread executes next.
    fn next_site(&self, st: &State, tid: usize) -> Option<StepSite> {
        let t = &st.threads[tid];
        let f = t.stack.last()?;
        let e = self.cfg(&f.func).out_edges(f.node).next()?;
        Some(StepSite {
            entry: t.entry.clone(),
            cs: f.cs.clone(),
            stmt: e.label.stmt(),
        })
    }

    fn step(&self, st: &State, counters: &Counters, tid: usize) -> Outcome {
        let mut next = st.clone();
        let mut counters = counters.clone();
        let frame = next.threads[tid].stack.last().cloned().expect("live thread");
        let cfg = self.cfg(&frame.func);
        let edges: Vec<_> = cfg.out_edges(frame.node).collect();
        let Some(first) = edges.first() else {
            return Outcome::Blocked;
        };
        let stmt = first.label.stmt();
        let mut ex = Exec {
            m: self,
            st: &mut next,
            tid,
            depth: frame_depth(st, tid),
            func: frame.func.clone(),
            loc: self.cfgs.loc(stmt),
            touches: Vec::new(),
        };
        let mut cut = false;
        let res: Result<Option<NodeId>, Stop> = (|| {
            if let EdgeLabel::Guard { cond, .. } = &first.label {
                let taken = ex.value(cond)?.truthy();
                let e = edges
                    .iter()
                    .find(|e| matches!(&e.label, EdgeLabel::Guard { polarity, .. } if *polarity == taken))
                    .expect("both guard polarities exist");
                if matches!(self.cfgs.stmt(stmt).kind, StmtKind::While { .. }) {
                    if taken {
                        let c = counters.entry((tid, stmt)).or_default();
                        *c += 1;
                        cut = *c > self.bounds.loops;
                    } else {
                        counters.remove(&(tid, stmt));
                    }
                }
                return Ok(Some(e.dst));
            }
            let dst = first.dst;
            match &self.cfgs.stmt(stmt).kind {
                StmtKind::Assign(lv, rhs) => ex.assign(lv, rhs)?,
                StmtKind::Call { func, args, .. } => {
                    let vals = args.iter().map(|a| ex.value(a)).collect::<R<Vec<_>>>()?;
                    ex.st.threads[tid].stack.last_mut().unwrap().node = dst;
                    let cs = frame.cs.push(stmt, func, self.k);
                    self.push_frame(ex.st, tid, func, cs, Some(stmt), &vals);
                    return Ok(None);
                }
                StmtKind::Return(e) => {
                    let v = e.as_ref().map(|e| ex.value(e)).transpose()?;
                    ex.st.threads[tid].stack.last_mut().unwrap().ret = v;
                }
                StmtKind::Create { handle, entry, arg } => {
                    let Val::Func(name) = ex.value(entry)? else {
                        return Err(ConcreteTrap::InvalidPointer(ex.loc).into());
                    };
                    let av = ex.value(arg)?;
                    let new = ex.st.threads.len();
                    ex.write_to(handle, Val::Int(new as i64))?;
                    if new > self.bounds.threads {
                        cut = true;
                    }
                    ex.st.threads.push(Thread {
                        entry: name.clone(),
                        stack: Vec::new(),
                    });
                    self.push_frame(ex.st, new, &name, CallString::default(), None, &[av]);
                    let mut extra = Vec::new();
                    self.settle(ex.st, new, &mut extra)?;
                }
                StmtKind::Join(h) => {
                    let t = ex.int(h)?;
                    if t <= 0 || t as usize >= ex.st.threads.len() || t as usize == tid {
                        return Err(ConcreteTrap::BadHandle(ex.loc).into());
                    }
                    if !ex.st.threads[t as usize].finished() {
                        return Err(Stop::Blocked);
                    }
                }
                StmtKind::Lock(l) => {
                    let a = ex.ptr(l)?;
                    if ex.st.mutexes.contains_key(&a) {
                        return Err(Stop::Blocked);
                    }
                    ex.st.mutexes.insert(a, tid);
                }
                StmtKind::Unlock(l) => {
                    let a = ex.ptr(l)?;
                    if ex.st.mutexes.get(&a) == Some(&tid) {
                        ex.st.mutexes.remove(&a);
                    }
                }
                StmtKind::TryLock { lock, result } => {
                    let a = ex.ptr(lock)?;
                    let r = match ex.st.mutexes.entry(a) {
                        std::collections::btree_map::Entry::Occupied(_) => EBUSY,
                        std::collections::btree_map::Entry::Vacant(v) => {
                            v.insert(tid);
                            0
                        }
                    };
                    ex.write_to(result, Val::Int(r))?;
                }
                StmtKind::RdLock(l) => {
                    let a = ex.ptr(l)?;
                    let rw = ex.st.rwlocks.entry(a).or_default();
                    if rw.writer.is_some() {
                        return Err(Stop::Blocked);
                    }
                    rw.readers.push(tid);
                    rw.readers.sort_unstable();
                }
                StmtKind::WrLock(l) => {
                    let a = ex.ptr(l)?;
                    let rw = ex.st.rwlocks.entry(a).or_default();
                    if rw.writer.is_some() || !rw.readers.is_empty() {
                        return Err(Stop::Blocked);
                    }
                    rw.writer = Some(tid);
                }
                StmtKind::RwUnlock(l) => {
                    let a = ex.ptr(l)?;
                    if let Some(rw) = ex.st.rwlocks.get_mut(&a) {
                        if rw.writer == Some(tid) {
                            rw.writer = None;
                        } else if let Some(i) = rw.readers.iter().position(|r| *r == tid) {
                            rw.readers.remove(i);
                        }
                        if rw.writer.is_none() && rw.readers.is_empty() {
                            ex.st.rwlocks.remove(&a);
                        }
                    }
                }
                StmtKind::Alloc { result, size } => {
                    let n = ex.int(size)?.max(0) as u64;
                    let idx = ex.st.heap_next.entry(stmt).or_default();
                    let b = Block::Heap { site: stmt, n: *idx };
                    *idx += 1;
                    ex.st.mem.insert(b.clone(), (n, BTreeMap::new()));
                    ex.write_to(result, Val::Ptr(b, 0))?;
                }
                StmtKind::Marker(_, args) => {
                    for a in args {
                        ex.value(a)?;
                    }
                }
                StmtKind::If { .. } | StmtKind::While { .. } | StmtKind::Break => {}
            }
            Ok(Some(dst))
        })();
        let mut touches = std::mem::take(&mut ex.touches);
        match res {
            Err(Stop::Blocked) => return Outcome::Blocked,
            Err(Stop::Trap(t)) => return Outcome::Trap(t),
            Ok(Some(dst)) => next.threads[tid].stack.last_mut().unwrap().node = dst,
            Ok(None) => {}
        }
        if let Err(t) = self.settle(&mut next, tid, &mut touches) {
            return Outcome::Trap(t);
        }
        Outcome::Step {
            next,
            counters,
            touches,
            cut,
        }
    }
}

fn frame_depth(st: &State, tid: usize) -> usize {
    st.threads[tid].stack.len() - 1
}

/// Why a step did not complete.
enum Stop {
    Blocked,
    Trap(ConcreteTrap),
}

impl From<ConcreteTrap> for Stop {
    fn from(t: ConcreteTrap) -> Self {
        Stop::Trap(t)
    }
}

/// Thread instances able to move, with their steps.
struct Enabled {
    steps: Vec<(usize, StepSite, Outcome)>,
}

impl<'a> Machine<'a> {
    fn enabled(&self, st: &State, counters: &Counters) -> Enabled {
        let mut steps = Vec::new();
        if st.over {
            return Enabled { steps };
        }
        for tid in 0..st.threads.len() {
            let Some(site) = self.next_site(st, tid) else {
                continue;
            };
            match self.step(st, counters, tid) {
                Outcome::Blocked => {}
                o => steps.push((tid, site, o)),
            }
        }
        Enabled { steps }
    }

    fn find_race(&self, en: &Enabled) -> Option<Witness> {
        let touches = |o: &Outcome| match o {
            Outcome::Step { touches, .. } => Some(touches.clone()),
            _ => None,
        };
        for (i, (t1, s1, o1)) in en.steps.iter().enumerate() {
            let Some(f1) = touches(o1) else { continue };
            for (t2, s2, o2) in &en.steps[i + 1..] {
                let Some(f2) = touches(o2) else { continue };
                if f1.iter().any(|a| f2.iter().any(|b| a.conflicts(b))) {
                    let w = |t: usize, s: &StepSite| WitnessStep {
                        thread: t,
                        site: s.clone(),
                        loc: self.cfgs.loc(s.stmt),
                    };
                    return Some(Witness {
                        first: w(*t1, s1),
                        second: w(*t2, s2),
                    });
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExploreOptions {
    pub bounds: Bounds,
    /// Call-string bound used to name step sites.
    pub k: usize,
    /// Record pairs of simultaneously enabled step sites.
    pub coenabled: bool,
    /// Keep exploring after a race is found.
    pub exhaustive: bool,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        ExploreOptions {
            bounds: Bounds::default(),
            k: crate::race_detect::DEFAULT_K,
            coenabled: false,
            exhaustive: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Exploration {
    pub result: Option<OracleResult>,
    pub states: usize,
    pub traps: Vec<ConcreteTrap>,
    /// Unordered pairs of step sites enabled in the same state, from
    /// distinct thread instances.
    pub coenabled: BTreeSet<(StepSite, StepSite)>,
}

/// Explore all interleavings with state memoization.
pub fn explore(p: &Program, cfgs: &CfgSet, opts: &ExploreOptions) -> Exploration {
    let m = Machine {
        p,
        cfgs,
        bounds: opts.bounds,
        k: opts.k,
    };
    let mut out = Exploration::default();
    let mut visited: HashMap<State, Vec<Counters>> = HashMap::new();
    let mut stack = vec![(m.initial(), Counters::new())];
    let mut exceeded = false;
    let mut race = None;
    while let Some((st, counters)) = stack.pop() {
        let seen = visited.entry(st.clone()).or_default();
        if seen.iter().any(|c| dominates(c, &counters)) {
            continue;
        }
        seen.retain(|c| !dominates(&counters, c));
        seen.push(counters.clone());
        out.states += 1;
        if out.states > opts.bounds.states {
            exceeded = true;
            break;
        }
        let en = m.enabled(&st, &counters);
        if race.is_none() {
            race = m.find_race(&en);
            if race.is_some() && !opts.exhaustive {
                break;
            }
        }
        if opts.coenabled {
            for (i, (_, s1, o1)) in en.steps.iter().enumerate() {
                for (_, s2, o2) in &en.steps[i + 1..] {
                    if matches!(o1, Outcome::Step { .. }) && matches!(o2, Outcome::Step { .. }) {
                        let pair = if s1 <= s2 {
                            (s1.clone(), s2.clone())
                        } else {
                            (s2.clone(), s1.clone())
                        };
                        out.coenabled.insert(pair);
                    }
                }
            }
        }
        for (_, _, o) in en.steps.into_iter().rev() {
            match o {
                Outcome::Trap(t) => {
                    if !out.traps.contains(&t) {
                        out.traps.push(t);
                    }
                }
                Outcome::Step {
                    cut: true,
                    ..
                } => exceeded = true,
                Outcome::Step { next, counters, .. } => stack.push((next, counters)),
                Outcome::Blocked => {}
            }
        }
    }
    out.result = Some(match race {
        Some(w) => OracleResult::Race(w),
        None if exceeded => OracleResult::BoundExceeded,
        None => OracleResult::NoRace,
    });
    out
}

/// Decide race presence within `bounds`.
pub fn oracle_check(p: &Program, cfgs: &CfgSet, bounds: Bounds) -> OracleResult {
    let opts = ExploreOptions {
        bounds,
        ..ExploreOptions::default()
    };
    explore(p, cfgs, &opts).result.expect("exploration sets a result")
}

/// Depth-first enumeration of interleavings without memoization. Gives up
/// with `None` after `max_paths` complete interleavings.
pub fn naive_check(p: &Program, cfgs: &CfgSet, bounds: Bounds, max_paths: usize) -> Option<OracleResult> {
    let m = Machine {
        p,
        cfgs,
        bounds,
        k: crate::race_detect::DEFAULT_K,
    };
    let mut paths = 0usize;
    let mut exceeded = false;
    let mut stack = vec![(m.initial(), Counters::new())];
    while let Some((st, counters)) = stack.pop() {
        let en = m.enabled(&st, &counters);
        if let Some(w) = m.find_race(&en) {
            return Some(OracleResult::Race(w));
        }
        let mut any = false;
        for (_, _, o) in en.steps.into_iter().rev() {
            match o {
                Outcome::Step { cut: true, .. } => exceeded = true,
                Outcome::Step { next, counters, .. } => {
                    any = true;
                    stack.push((next, counters));
                }
                Outcome::Trap(_) | Outcome::Blocked => {}
            }
        }
        if !any {
            paths += 1;
            if paths > max_paths {
                return None;
            }
        }
    }
    Some(if exceeded {
        OracleResult::BoundExceeded
    } else {
        OracleResult::NoRace
    })
}

/// A concrete value named in analysis terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObsVal {
    Int(i64),
    Addr(Base, i64),
    Func(String),
    /// Points into a block that no longer exists.
    Dangling,
}

/// Concrete contents of every scalar cell before one statement.
#[derive(Debug, Clone)]
pub struct Observation {
    pub context: Context,
    pub cells: Vec<((Base, i64), ObsVal)>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub observations: Vec<Observation>,
    /// Main returned within the step limit.
    pub complete: bool,
}

fn block_base(st: &State, b: &Block) -> Option<Base> {
    Some(match b {
        Block::Global(n) => Base::Global(n.clone()),
        Block::Frame {
            tid,
            depth,
            formal,
            name,
        } => {
            let f = st.threads.get(*tid)?.stack.get(*depth)?;
            let (func, cs) = (f.func.clone(), f.cs.clone());
            let thread = *tid as ThreadId;
            if *formal {
                Base::Formal { thread, func, name: name.clone(), cs }
            } else {
                Base::Local { thread, func, name: name.clone(), cs }
            }
        }
        Block::Heap { site, .. } => Base::Dynamic {
            site: *site,
            weak: false,
        },
    })
}

fn observe(p: &Program, st: &State) -> Vec<((Base, i64), ObsVal)> {
    let mut out = Vec::new();
    for (b, (_, cells)) in &st.mem {
        let Some(base) = block_base(st, b) else { continue };
        let slots: Vec<i64> = match base.ctype(p) {
            Some(t) => p
                .resolve_type(t)
                .scalar_slots(p.machine)
                .into_iter()
                .filter(|(_, t)| !matches!(t, CType::Mutex | CType::RwLock))
                .map(|(o, _)| o as i64)
                .collect(),
            None => cells.keys().copied().collect(),
        };
        for o in slots {
            let v = match cells.get(&o).cloned().unwrap_or(Val::Int(0)) {
                Val::Int(i) => ObsVal::Int(i),
                Val::Func(f) => ObsVal::Func(f),
                Val::Ptr(tb, to) => match block_base(st, &tb) {
                    Some(base) if st.mem.contains_key(&tb) => ObsVal::Addr(base, to),
                    _ => ObsVal::Dangling,
                },
            };
            out.push(((base.clone(), o), v));
        }
    }
    out
}

/// Run main alone, recording the concrete state before each statement.
/// Fails if the program creates a thread or traps.
pub fn concrete_trace(p: &Program, cfgs: &CfgSet, k: usize, max_steps: usize) -> Result<Trace, TraceError> {
    let m = Machine {
        p,
        cfgs,
        bounds: Bounds {
            loops: u32::MAX,
            ..Bounds::default()
        },
        k,
    };
    let mut st = m.initial();
    let mut counters = Counters::new();
    let mut observations = Vec::new();
    for _ in 0..max_steps {
        if st.over {
            return Ok(Trace {
                observations,
                complete: true,
            });
        }
        let site = m.next_site(&st, MAIN_THREAD).ok_or(TraceError::Stuck)?;
        if matches!(cfgs.stmt(site.stmt).kind, StmtKind::Create { .. }) {
            return Err(TraceError::Threads);
        }
        observations.push(Observation {
            context: Context {
                thread: MAIN_THREAD as ThreadId,
                cs: site.cs.clone(),
                stmt: site.stmt,
            },
            cells: observe(p, &st),
        });
        match m.step(&st, &counters, MAIN_THREAD) {
            Outcome::Step {
                next, counters: c, ..
            } => {
                st = next;
                counters = c;
            }
            Outcome::Blocked => return Err(TraceError::Stuck),
            Outcome::Trap(t) => return Err(TraceError::Trap(t)),
        }
    }
    Ok(Trace {
        observations,
        complete: false,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("program creates threads")]
    Threads,
    #[error("main blocked")]
    Stuck,
    #[error(transparent)]
    Trap(#[from] ConcreteTrap),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{build_cfg, parse_program, MachineModel};

    fn setup(src: &str) -> (Program, CfgSet) {
        let p = parse_program(src, "t.c", MachineModel::Lp64).unwrap();
        let cfgs = build_cfg(&p);
        (p, cfgs)
    }

    fn check(src: &str) -> OracleResult {
        let (p, cfgs) = setup(src);
        oracle_check(&p, &cfgs, Bounds::default())
    }

    const RACY: &str = "int g;
        void *w(void *x) { g = g + 1; return 0; }
        int main() { pthread_t t; pthread_create(&t, 0, w, 0); g = g + 1; pthread_join(t, 0); return 0; }";

    const LOCKED: &str = "int g; pthread_mutex_t m;
        void *w(void *x) { pthread_mutex_lock(&m); g = g + 1; pthread_mutex_unlock(&m); return 0; }
        int main() { pthread_t t; pthread_create(&t, 0, w, 0);
          pthread_mutex_lock(&m); g = g + 1; pthread_mutex_unlock(&m); pthread_join(t, 0); return 0; }";

    const HANDSHAKE: &str = "atomic_int f; int g;
        void *w(void *x) { while (!f) {} g = 1; return 0; }
        int main() { pthread_t t; pthread_create(&t, 0, w, 0); g = 2; f = 1; pthread_join(t, 0); return 0; }";

    fn stmt_line(p: &Program, id: StmtId) -> String {
        let (_, s) = p.statements().into_iter().find(|(_, s)| s.id == id).unwrap();
        format!("{:?}", s.kind)
    }

    #[test]
    fn unprotected_increment_races_on_the_writes() {
        let (p, cfgs) = setup(RACY);
        let OracleResult::Race(w) = oracle_check(&p, &cfgs, Bounds::default()) else {
            panic!("expected a race");
        };
        for s in [&w.first, &w.second] {
            assert!(stmt_line(&p, s.site.stmt).starts_with("Assign"));
        }
        assert_ne!(w.first.thread, w.second.thread);
    }

    #[test]
    fn mutex_serializes() {
        assert_eq!(check(LOCKED), OracleResult::NoRace);
    }

    #[test]
    fn flag_handshake_orders_writes() {
        assert_eq!(check(HANDSHAKE), OracleResult::NoRace);
        let (p, cfgs) = setup(HANDSHAKE);
        assert_eq!(naive_check(&p, &cfgs, Bounds::default(), 100_000), Some(OracleResult::BoundExceeded));
    }

    #[test]
    fn trylock_and_rwlock() {
        let try_ok = "int g; pthread_mutex_t m;
            void *w(void *x) { int r; r = pthread_mutex_trylock(&m); if (r == 0) { g = 1; pthread_mutex_unlock(&m); } return 0; }
            int main() { pthread_t t; pthread_create(&t, 0, w, 0); pthread_mutex_lock(&m); g = 2; pthread_mutex_unlock(&m); pthread_join(t, 0); return 0; }";
        assert_eq!(check(try_ok), OracleResult::NoRace);
        let try_bad = "int g; pthread_mutex_t m;
            void *w(void *x) { int r; r = pthread_mutex_trylock(&m); g = 1; return 0; }
            int main() { pthread_t t; pthread_create(&t, 0, w, 0); pthread_mutex_lock(&m); g = 2; pthread_mutex_unlock(&m); pthread_join(t, 0); return 0; }";
        assert!(check(try_bad).is_race());
        let readers = "int g; pthread_rwlock_t l;
            void *w(void *x) { int v; pthread_rwlock_rdlock(&l); v = g; pthread_rwlock_unlock(&l); return 0; }
            int main() { pthread_t t; pthread_create(&t, 0, w, 0); pthread_rwlock_rdlock(&l); g = 2; pthread_rwlock_unlock(&l); pthread_join(t, 0); return 0; }";
        assert!(check(readers).is_race());
        let writer = readers.replacen("pthread_rwlock_rdlock(&l); g = 2", "pthread_rwlock_wrlock(&l); g = 2", 1);
        assert_eq!(check(&writer), OracleResult::NoRace);
    }

    #[test]
    fn join_orders_accesses() {
        let src = "int g;
            void *w(void *x) { g = 1; return 0; }
            int main() { pthread_t t; pthread_create(&t, 0, w, 0); pthread_join(t, 0); g = 2; return 0; }";
        assert_eq!(check(src), OracleResult::NoRace);
    }

    #[test]
    fn atomics_do_not_race() {
        let src = "atomic_int g;
            void *w(void *x) { g = 1; return 0; }
            int main() { pthread_t t; pthread_create(&t, 0, w, 0); g = 2; pthread_join(t, 0); return 0; }";
        assert_eq!(check(src), OracleResult::NoRace);
    }

    #[test]
    fn distinct_fields_and_elements_do_not_conflict() {
        let src = "struct s { int a; int b; }; struct s v; int arr[2];
            void *w(void *x) { v.a = 1; arr[0] = 1; return 0; }
            int main() { pthread_t t; pthread_create(&t, 0, w, 0); v.b = 2; arr[1] = 2; pthread_join(t, 0); return 0; }";
        assert_eq!(check(src), OracleResult::NoRace);
    }

    #[test]
    fn spawn_loop_exceeds_thread_bound() {
        let src = "int g; pthread_mutex_t m;
            void *w(void *x) { pthread_mutex_lock(&m); g = g + 1; pthread_mutex_unlock(&m); return 0; }
            int main() { pthread_t t; int i; i = 0; while (i < 10) { pthread_create(&t, 0, w, 0); i = i + 1; } return 0; }";
        assert_eq!(check(src), OracleResult::BoundExceeded);
    }

    #[test]
    fn traps_are_reported_and_other_branches_continue() {
        let src = "int g; int d;
            void *w(void *x) { int y; y = 10 / d; return 0; }
            void *v(void *x) { g = 1; return 0; }
            int main() { pthread_t t; pthread_t u; pthread_create(&t, 0, w, 0); pthread_create(&u, 0, v, 0); g = 2; return 0; }";
        let (p, cfgs) = setup(src);
        let ex = explore(&p, &cfgs, &ExploreOptions::default());
        assert!(ex.traps.iter().any(|t| matches!(t, ConcreteTrap::DivisionByZero(_))));
        assert!(ex.result.unwrap().is_race());
    }

    #[test]
    fn results_are_deterministic() {
        for src in [RACY, LOCKED, HANDSHAKE] {
            let (p, cfgs) = setup(src);
            let a = explore(&p, &cfgs, &ExploreOptions::default());
            let b = explore(&p, &cfgs, &ExploreOptions::default());
            assert_eq!(a.result, b.result);
            assert_eq!(a.states, b.states);
        }
    }

    #[test]
    fn agrees_with_naive_explorer() {
        for src in [RACY, LOCKED] {
            let (p, cfgs) = setup(src);
            let memo = oracle_check(&p, &cfgs, Bounds::default());
            let naive = naive_check(&p, &cfgs, Bounds::default(), 100_000).unwrap();
            assert_eq!(memo.is_race(), naive.is_race());
            assert_eq!(memo == OracleResult::NoRace, naive == OracleResult::NoRace);
        }
    }

    #[test]
    fn coenabled_pairs_are_collected() {
        let (p, cfgs) = setup(RACY);
        let opts = ExploreOptions {
            coenabled: true,
            exhaustive: true,
            ..ExploreOptions::default()
        };
        let ex = explore(&p, &cfgs, &opts);
        assert!(ex.coenabled.iter().any(|(a, b)| a.entry != b.entry));
    }

    #[test]
    fn single_thread_trace_values() {
        let src = "int x; int a[3]; int *q;
            int add(int u, int v) { return u + v; }
            int main() { int i; i = 0; while (i < 3) { a[i] = i * 2; i = i + 1; } x = add(a[2], 1); q = &a[1]; *q = 7; return 0; }";
        let (p, cfgs) = setup(src);
        let tr = concrete_trace(&p, &cfgs, 2, 10_000).unwrap();
        assert!(tr.complete);
        let last = tr.observations.last().unwrap();
        let get = |b: Base, o: i64| last.cells.iter().find(|(c, _)| *c == (b.clone(), o)).map(|(_, v)| v.clone());
        assert_eq!(get(Base::Global("x".into()), 0), Some(ObsVal::Int(5)));
        assert_eq!(get(Base::Global("a".into()), 4), Some(ObsVal::Int(7)));
        assert_eq!(get(Base::Global("q".into()), 0), Some(ObsVal::Addr(Base::Global("a".into()), 4)));
        assert!(tr.observations.iter().any(|o| !o.context.cs.is_empty()));
    }

    #[test]
    fn trace_rejects_threads() {
        let (p, cfgs) = setup(RACY);
        assert_eq!(concrete_trace(&p, &cfgs, 2, 1000).unwrap_err(), TraceError::Threads);
    }

    #[test]
    fn bounds_parse() {
        assert_eq!("8,4,1000000".parse::<Bounds>().unwrap(), Bounds::default());
        assert!("8,4".parse::<Bounds>().is_err());
    }
}
