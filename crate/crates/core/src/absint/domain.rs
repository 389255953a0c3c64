//! Intervals, base/offset points-to values and abstract memory states.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::frontend::{Program, StmtId};

pub const NEG_INF: i64 = i64::MIN;
pub const POS_INF: i64 = i64::MAX;

/// Integer interval; `NEG_INF`/`POS_INF` stand for the infinite bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Itv {
    pub lo: i64,
    pub hi: i64,
}

// Bounds are mapped to i128 with infinities far outside the i64 range, so
// saturation during arithmetic can be detected by clamping afterwards.
const BIG: i128 = 1 << 100;

fn widen_bound(v: i64) -> i128 {
    match v {
        NEG_INF => -BIG,
        POS_INF => BIG,
        v => v as i128,
    }
}

fn clamp(v: i128) -> i64 {
    if v >= POS_INF as i128 {
        POS_INF
    } else if v <= NEG_INF as i128 {
        NEG_INF
    } else {
        v as i64
    }
}

impl Itv {
    pub const TOP: Itv = Itv {
        lo: NEG_INF,
        hi: POS_INF,
    };
    pub const BOOL: Itv = Itv { lo: 0, hi: 1 };

    pub fn new(lo: i64, hi: i64) -> Option<Itv> {
        (lo <= hi).then_some(Itv { lo, hi })
    }

    pub fn single(v: i64) -> Itv {
        Itv { lo: v, hi: v }
    }

    pub fn is_singleton(&self) -> bool {
        self.lo == self.hi && self.lo != NEG_INF && self.hi != POS_INF
    }

    pub fn is_top(&self) -> bool {
        *self == Itv::TOP
    }

    pub fn contains(&self, v: i64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn includes(&self, other: &Itv) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn join(&self, o: &Itv) -> Itv {
        Itv {
            lo: self.lo.min(o.lo),
            hi: self.hi.max(o.hi),
        }
    }

    pub fn meet(&self, o: &Itv) -> Option<Itv> {
        Itv::new(self.lo.max(o.lo), self.hi.min(o.hi))
    }

    pub fn widen(&self, newer: &Itv) -> Itv {
        Itv {
            lo: if newer.lo < self.lo { NEG_INF } else { self.lo },
            hi: if newer.hi > self.hi { POS_INF } else { self.hi },
        }
    }

    pub fn overlaps(&self, o: &Itv) -> bool {
        self.meet(o).is_some()
    }

    fn from_i128(lo: i128, hi: i128) -> Itv {
        Itv {
            lo: clamp(lo),
            hi: clamp(hi),
        }
    }

    pub fn add(&self, o: &Itv) -> Itv {
        Itv::from_i128(
            widen_bound(self.lo).saturating_add(widen_bound(o.lo)),
            widen_bound(self.hi).saturating_add(widen_bound(o.hi)),
        )
    }

    pub fn neg(&self) -> Itv {
        Itv::from_i128(-widen_bound(self.hi), -widen_bound(self.lo))
    }

    pub fn sub(&self, o: &Itv) -> Itv {
        self.add(&o.neg())
    }

    fn corners(&self, o: &Itv, f: impl Fn(i128, i128) -> i128) -> Itv {
        let (a, b) = (widen_bound(self.lo), widen_bound(self.hi));
        let (c, d) = (widen_bound(o.lo), widen_bound(o.hi));
        let vals = [f(a, c), f(a, d), f(b, c), f(b, d)];
        Itv::from_i128(*vals.iter().min().unwrap(), *vals.iter().max().unwrap())
    }

    pub fn mul(&self, o: &Itv) -> Itv {
        self.corners(o, |x, y| x.saturating_mul(y))
    }

    /// Truncating division; a divisor that may be zero gives top.
    pub fn div(&self, o: &Itv) -> Itv {
        if o.contains(0) {
            return Itv::TOP;
        }
        self.corners(o, |x, y| x / y)
    }

    pub fn rem(&self, o: &Itv) -> Itv {
        if o.contains(0) {
            return Itv::TOP;
        }
        let m = widen_bound(o.lo).abs().max(widen_bound(o.hi).abs()) - 1;
        let (lo, hi) = (widen_bound(self.lo), widen_bound(self.hi));
        if lo >= 0 {
            Itv::from_i128(0, hi.min(m))
        } else if hi <= 0 {
            Itv::from_i128(lo.max(-m), 0)
        } else {
            Itv::from_i128(-m, m)
        }
    }

    /// Abstract comparison yielding a subset of {0, 1}.
    pub fn compare(&self, op: crate::frontend::BinOp, o: &Itv) -> Itv {
        use crate::frontend::BinOp::*;
        let (t, f) = match op {
            Lt => (self.hi < o.lo, self.lo >= o.hi),
            Le => (self.hi <= o.lo, self.lo > o.hi),
            Gt => (self.lo > o.hi, self.hi <= o.lo),
            Ge => (self.lo >= o.hi, self.hi < o.lo),
            Eq => (
                self.is_singleton() && o.is_singleton() && self.lo == o.lo,
                !self.overlaps(o),
            ),
            Ne => (
                !self.overlaps(o),
                self.is_singleton() && o.is_singleton() && self.lo == o.lo,
            ),
            _ => (false, false),
        };
        match (t, f) {
            (true, _) => Itv::single(1),
            (_, true) => Itv::single(0),
            _ => Itv::BOOL,
        }
    }
}

impl fmt::Display for Itv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = |v: i64| match v {
            NEG_INF => "-inf".to_string(),
            POS_INF => "+inf".to_string(),
            v => v.to_string(),
        };
        write!(f, "[{},{}]", b(self.lo), b(self.hi))
    }
}

pub type ThreadId = u32;

/// The most recent calls, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct CallString(pub Vec<(StmtId, String)>);

impl CallString {
    pub fn push(&self, site: StmtId, callee: &str, k: usize) -> CallString {
        let mut v = self.0.clone();
        v.push((site, callee.to_string()));
        if v.len() > k {
            v.drain(..v.len() - k);
        }
        CallString(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for CallString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<_> = self.0.iter().map(|(s, c)| format!("{c}@{s}")).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Context {
    pub thread: ThreadId,
    pub cs: CallString,
    pub stmt: StmtId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Base {
    Global(String),
    Local {
        thread: ThreadId,
        func: String,
        name: String,
        cs: CallString,
    },
    Formal {
        thread: ThreadId,
        func: String,
        name: String,
        cs: CallString,
    },
    Dynamic {
        site: StmtId,
        weak: bool,
    },
    Function(String),
}

impl Base {
    pub fn is_weak(&self) -> bool {
        matches!(self, Base::Dynamic { weak: true, .. })
    }

    /// Declared size in bytes, when the base has a static type.
    pub fn size(&self, p: &Program) -> Option<u64> {
        self.ctype(p).map(|t| t.size(p.machine))
    }

    pub fn ctype(&self, p: &Program) -> Option<crate::frontend::CType> {
        use crate::frontend::Scope;
        match self {
            Base::Global(n) => p.global(n).map(|g| g.ty.clone()),
            Base::Local { func, name, .. } => p.var_type(func, name, Scope::Local).cloned(),
            Base::Formal { func, name, .. } => p.var_type(func, name, Scope::Formal).cloned(),
            Base::Dynamic { .. } | Base::Function(_) => None,
        }
    }

    /// Start offsets of scalar slots, when the layout is known.
    pub fn slots(&self, p: &Program) -> Option<Vec<i64>> {
        self.ctype(p).map(|t| {
            t.scalar_slots(p.machine)
                .into_iter()
                .map(|(o, _)| o as i64)
                .collect()
        })
    }
}

impl fmt::Display for Base {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Base::Global(n) => write!(f, "{n}"),
            Base::Local {
                thread, func, name, ..
            }
            | Base::Formal {
                thread, func, name, ..
            } => write!(f, "{func}::{name}#{thread}"),
            Base::Dynamic { site, weak } => {
                write!(f, "malloc@{site}{}", if *weak { "(weak)" } else { "" })
            }
            Base::Function(n) => write!(f, "&{n}"),
        }
    }
}

/// Cells other threads may observe: globals, heap blocks, and frame
/// variables whose address is taken somewhere.
pub fn is_shared_base(b: &Base, escaped: &BTreeSet<(String, String)>) -> bool {
    match b {
        Base::Global(_) | Base::Dynamic { .. } => true,
        Base::Local { func, name, .. } | Base::Formal { func, name, .. } => {
            escaped.contains(&(func.clone(), name.clone()))
        }
        Base::Function(_) => false,
    }
}

/// Interval part plus points-to part. Both empty is bottom.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct AbsVal {
    pub itv: Option<Itv>,
    pub pts: BTreeMap<Base, Itv>,
}

impl AbsVal {
    pub fn bottom() -> AbsVal {
        AbsVal::default()
    }

    pub fn top() -> AbsVal {
        AbsVal {
            itv: Some(Itv::TOP),
            pts: BTreeMap::new(),
        }
    }

    pub fn int(itv: Itv) -> AbsVal {
        AbsVal {
            itv: Some(itv),
            pts: BTreeMap::new(),
        }
    }

    pub fn constant(v: i64) -> AbsVal {
        AbsVal::int(Itv::single(v))
    }

    pub fn addr(base: Base, off: Itv) -> AbsVal {
        AbsVal {
            itv: None,
            pts: BTreeMap::from([(base, off)]),
        }
    }

    pub fn is_bottom(&self) -> bool {
        self.itv.is_none() && self.pts.is_empty()
    }

    pub fn join(&self, o: &AbsVal) -> AbsVal {
        let itv = match (self.itv, o.itv) {
            (Some(a), Some(b)) => Some(a.join(&b)),
            (a, b) => a.or(b),
        };
        let mut pts = self.pts.clone();
        for (b, off) in &o.pts {
            pts.entry(b.clone())
                .and_modify(|x| *x = x.join(off))
                .or_insert(*off);
        }
        AbsVal { itv, pts }
    }

    pub fn widen(&self, newer: &AbsVal) -> AbsVal {
        let itv = match (self.itv, newer.itv) {
            (Some(a), Some(b)) => Some(a.widen(&b)),
            (a, b) => a.or(b),
        };
        let mut pts = self.pts.clone();
        for (b, off) in &newer.pts {
            pts.entry(b.clone())
                .and_modify(|x| *x = x.widen(off))
                .or_insert(*off);
        }
        AbsVal { itv, pts }
    }

    /// Containment order.
    pub fn leq(&self, o: &AbsVal) -> bool {
        let itv_ok = match (self.itv, o.itv) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(a), Some(b)) => b.includes(&a),
        };
        itv_ok
            && self
                .pts
                .iter()
                .all(|(b, off)| o.pts.get(b).is_some_and(|x| x.includes(off)))
    }

    /// May the value be zero (a null pointer or integer 0)?
    pub fn may_be_zero(&self) -> bool {
        self.itv.is_some_and(|i| i.contains(0))
    }

    /// May the value be non-zero? Addresses are never null.
    pub fn may_be_nonzero(&self) -> bool {
        !self.pts.is_empty() || self.itv.is_some_and(|i| i != Itv::single(0))
    }

    /// Interval view for arithmetic; addresses make it top.
    pub fn as_int(&self) -> Option<Itv> {
        if self.pts.is_empty() {
            self.itv
        } else {
            Some(Itv::TOP)
        }
    }
}

impl fmt::Display for AbsVal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.itv {
            Some(i) => write!(f, "{i}")?,
            None => write!(f, "_")?,
        }
        if !self.pts.is_empty() {
            let parts: Vec<_> = self.pts.iter().map(|(b, o)| format!("{b}+{o}")).collect();
            write!(f, " {{{}}}", parts.join(", "))?;
        }
        Ok(())
    }
}

/// A memory cell: base plus the start offset of a scalar slot.
pub type Cell = (Base, i64);

/// Default content of a cell not bound in a state.
pub fn default_value(p: &Program, cell: &Cell) -> AbsVal {
    match &cell.0 {
        Base::Global(name) => match p.global(name) {
            Some(g) if cell.1 >= 0 => AbsVal::constant(g.initial_value(cell.1 as u64, p.machine)),
            _ => AbsVal::top(),
        },
        _ => AbsVal::top(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct AbsState {
    pub reachable: bool,
    pub env: BTreeMap<Cell, AbsVal>,
    /// Pending return value, set by `return e`.
    pub ret: Option<AbsVal>,
}

impl AbsState {
    pub fn unreachable() -> AbsState {
        AbsState::default()
    }

    pub fn empty() -> AbsState {
        AbsState {
            reachable: true,
            ..Default::default()
        }
    }

    /// Globals bound to their static initializers.
    pub fn static_init(p: &Program) -> AbsState {
        let mut s = AbsState::empty();
        for g in &p.globals {
            for (off, _) in g.ty.scalar_slots(p.machine) {
                let cell = (Base::Global(g.name.clone()), off as i64);
                let v = default_value(p, &cell);
                s.env.insert(cell, v);
            }
        }
        s
    }

    pub fn get(&self, p: &Program, cell: &Cell) -> AbsVal {
        self.env
            .get(cell)
            .cloned()
            .unwrap_or_else(|| default_value(p, cell))
    }

    fn combine(
        &self,
        p: &Program,
        o: &AbsState,
        f: impl Fn(&AbsVal, &AbsVal) -> AbsVal,
    ) -> AbsState {
        if !self.reachable {
            return o.clone();
        }
        if !o.reachable {
            return self.clone();
        }
        let mut env = BTreeMap::new();
        for (cell, v) in &self.env {
            let w = o.env.get(cell).cloned().unwrap_or_else(|| default_value(p, cell));
            env.insert(cell.clone(), f(v, &w));
        }
        for (cell, w) in &o.env {
            if !self.env.contains_key(cell) {
                env.insert(cell.clone(), f(&default_value(p, cell), w));
            }
        }
        let ret = match (&self.ret, &o.ret) {
            (Some(a), Some(b)) => Some(f(a, b)),
            (a, b) => a.clone().or(b.clone()),
        };
        AbsState {
            reachable: true,
            env,
            ret,
        }
    }

    pub fn join(&self, p: &Program, o: &AbsState) -> AbsState {
        self.combine(p, o, |a, b| a.join(b))
    }

    pub fn widen(&self, p: &Program, newer: &AbsState) -> AbsState {
        self.combine(p, newer, |a, b| a.widen(b))
    }

    /// Pointwise containment.
    pub fn leq(&self, p: &Program, o: &AbsState) -> bool {
        if !self.reachable {
            return true;
        }
        if !o.reachable {
            return false;
        }
        self.env.keys().chain(o.env.keys()).all(|cell| {
            self.get(p, cell).leq(&o.get(p, cell))
        })
    }

    /// Keep only cells whose base satisfies `keep`.
    pub fn restrict(&self, keep: impl Fn(&Base) -> bool) -> AbsState {
        if !self.reachable {
            return self.clone();
        }
        AbsState {
            reachable: true,
            env: self
                .env
                .iter()
                .filter(|((b, _), _)| keep(b))
                .map(|(c, v)| (c.clone(), v.clone()))
                .collect(),
            ret: None,
        }
    }
}
