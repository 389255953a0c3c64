//! Expression evaluation, guard refinement and statement transfer for the
//! interval/points-to domain.

use std::collections::{BTreeMap, BTreeSet};

use super::domain::*;
use super::engine::Analysis;
use crate::frontend::typeck::{field_offset, pointee_size, type_of};
use crate::frontend::{BinOp, CType, CfgSet, EdgeLabel, Expr, Program, Scope, StmtId, StmtKind, UnOp};

/// Abstract result of `pthread_mutex_trylock`: 0 or EBUSY.
pub const TRYLOCK_RESULT: Itv = Itv { lo: 0, hi: 16 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdateMode {
    Strong,
    /// Writes to global and heap cells join with the old content.
    Weak,
}

/// Evaluation inside one function activation.
pub struct Evaluator<'a> {
    pub p: &'a Program,
    pub thread: ThreadId,
    pub func: &'a str,
    pub cs: &'a CallString,
}

fn shift(targets: &BTreeMap<Base, Itv>, by: Itv) -> BTreeMap<Base, Itv> {
    targets.iter().map(|(b, o)| (b.clone(), o.add(&by))).collect()
}

fn dec(v: i64) -> i64 {
    if v == NEG_INF || v == POS_INF {
        v
    } else {
        v - 1
    }
}

fn inc(v: i64) -> i64 {
    if v == NEG_INF || v == POS_INF {
        v
    } else {
        v + 1
    }
}

/// Values of `i` satisfying `i op b` for some value of `b`.
fn constrain_itv(i: Itv, op: BinOp, b: Itv) -> Option<Itv> {
    match op {
        BinOp::Lt => i.meet(&Itv { lo: NEG_INF, hi: dec(b.hi) }),
        BinOp::Le => i.meet(&Itv { lo: NEG_INF, hi: b.hi }),
        BinOp::Gt => i.meet(&Itv { lo: inc(b.lo), hi: POS_INF }),
        BinOp::Ge => i.meet(&Itv { lo: b.lo, hi: POS_INF }),
        BinOp::Eq => i.meet(&b),
        BinOp::Ne if b.is_singleton() => {
            let c = b.lo;
            match (i.lo == c, i.hi == c) {
                (true, true) => None,
                (true, false) => Itv::new(c + 1, i.hi),
                (false, true) => Itv::new(i.lo, c - 1),
                _ => Some(i),
            }
        }
        _ => Some(i),
    }
}

impl<'a> Evaluator<'a> {
    /// Evaluator for the activation a context belongs to.
    pub fn at(p: &'a Program, cfgs: &'a CfgSet, ctx: &'a Context) -> Evaluator<'a> {
        Evaluator {
            p,
            thread: ctx.thread,
            func: cfgs.func_of(ctx.stmt),
            cs: &ctx.cs,
        }
    }

    pub fn var_base(&self, name: &str, scope: Scope) -> Base {
        match scope {
            Scope::Global => Base::Global(name.to_string()),
            Scope::Local => Base::Local {
                thread: self.thread,
                func: self.func.to_string(),
                name: name.to_string(),
                cs: self.cs.clone(),
            },
            Scope::Formal => Base::Formal {
                thread: self.thread,
                func: self.func.to_string(),
                name: name.to_string(),
                cs: self.cs.clone(),
            },
        }
    }

    fn ty(&self, e: &Expr) -> CType {
        type_of(self.p, self.func, e)
    }

    /// Cells of `base` a scalar access at offsets `off` may touch.
    pub fn cells_in(&self, s: &AbsState, base: &Base, off: Itv) -> Vec<i64> {
        match base.slots(self.p) {
            Some(slots) => slots.into_iter().filter(|o| off.contains(*o)).collect(),
            None if matches!(base, Base::Function(_)) => Vec::new(),
            None if off.is_singleton() => vec![off.lo],
            None => s
                .env
                .keys()
                .filter(|(b, o)| b == base && off.contains(*o))
                .map(|(_, o)| *o)
                .collect(),
        }
    }

    pub fn read(&self, s: &AbsState, base: &Base, off: Itv) -> AbsVal {
        if matches!(base, Base::Function(_)) {
            return AbsVal::top();
        }
        let cells = self.cells_in(s, base, off);
        let mut v = AbsVal::bottom();
        for o in &cells {
            v = v.join(&s.get(self.p, &(base.clone(), *o)));
        }
        let complete = match base.slots(self.p) {
            Some(_) => !cells.is_empty(),
            None => off.is_singleton(),
        };
        if complete {
            v
        } else {
            v.join(&AbsVal::top())
        }
    }

    /// Addresses designated by an lvalue (or an array-typed expression).
    pub fn targets(&self, s: &AbsState, lv: &Expr) -> BTreeMap<Base, Itv> {
        match lv {
            Expr::Var(n, sc) => BTreeMap::from([(self.var_base(n, *sc), Itv::single(0))]),
            Expr::Deref(p) => self.eval(s, p).pts,
            Expr::Index(a, i) => {
                let base = match self.ty(a) {
                    CType::Array(..) => self.targets(s, a),
                    _ => self.eval(s, a).pts,
                };
                let elem = self.p.resolve_type(self.ty(lv)).size(self.p.machine) as i64;
                match self.eval(s, i).as_int() {
                    Some(idx) => shift(&base, idx.mul(&Itv::single(elem))),
                    None => BTreeMap::new(),
                }
            }
            Expr::Field(r, f) => {
                let off = field_offset(self.p, self.func, r, f).unwrap_or(0) as i64;
                shift(&self.targets(s, r), Itv::single(off))
            }
            Expr::Cast(_, e) => self.targets(s, e),
            _ => BTreeMap::new(),
        }
    }

    pub fn eval(&self, s: &AbsState, e: &Expr) -> AbsVal {
        match e {
            Expr::Int(v) => AbsVal::constant(*v),
            Expr::SizeOf(t) => AbsVal::constant(t.size(self.p.machine) as i64),
            Expr::Func(n) => AbsVal::addr(Base::Function(n.clone()), Itv::single(0)),
            Expr::AddrOf(lv) => AbsVal {
                itv: None,
                pts: self.targets(s, lv),
            },
            Expr::Var(..) | Expr::Deref(_) | Expr::Index(..) | Expr::Field(..) => {
                match self.p.resolve_type(self.ty(e)) {
                    CType::Array(..) => AbsVal {
                        itv: None,
                        pts: self.targets(s, e),
                    },
                    CType::Record(_) => AbsVal::top(),
                    _ => {
                        let t = self.targets(s, e);
                        if t.is_empty() {
                            return AbsVal::top();
                        }
                        let mut v = AbsVal::bottom();
                        for (b, o) in &t {
                            v = v.join(&self.read(s, b, *o));
                        }
                        v
                    }
                }
            }
            Expr::Cast(_, inner) => self.eval(s, inner),
            Expr::Unary(UnOp::Neg, inner) => match self.eval(s, inner).as_int() {
                Some(i) => AbsVal::int(i.neg()),
                None => AbsVal::bottom(),
            },
            Expr::Unary(UnOp::Not, inner) => {
                let v = self.eval(s, inner);
                if v.is_bottom() {
                    return v;
                }
                match (v.may_be_zero(), v.may_be_nonzero()) {
                    (true, false) => AbsVal::constant(1),
                    (false, true) => AbsVal::constant(0),
                    _ => AbsVal::int(Itv::BOOL),
                }
            }
            Expr::Binary(op, a, b) => self.eval_binary(s, *op, a, b),
        }
    }

    fn eval_binary(&self, s: &AbsState, op: BinOp, a: &Expr, b: &Expr) -> AbsVal {
        let va = self.eval(s, a);
        let vb = self.eval(s, b);
        if va.is_bottom() || vb.is_bottom() {
            return AbsVal::bottom();
        }
        match op {
            BinOp::And | BinOp::Or => {
                let (ta, fa) = (va.may_be_nonzero(), va.may_be_zero());
                let (tb, fb) = (vb.may_be_nonzero(), vb.may_be_zero());
                let (may_true, may_false) = if op == BinOp::And {
                    (ta && tb, fa || (ta && fb))
                } else {
                    (ta || (fa && tb), fa && fb)
                };
                match (may_true, may_false) {
                    (true, false) => AbsVal::constant(1),
                    (false, true) => AbsVal::constant(0),
                    _ => AbsVal::int(Itv::BOOL),
                }
            }
            BinOp::Add | BinOp::Sub if !va.pts.is_empty() && vb.pts.is_empty() => {
                let scale = pointee_size(self.p, self.func, a) as i64;
                let mut by = vb.itv.unwrap_or(Itv::TOP).mul(&Itv::single(scale));
                if op == BinOp::Sub {
                    by = by.neg();
                }
                AbsVal {
                    itv: va.itv.map(|i| i.add(&by)),
                    pts: shift(&va.pts, by),
                }
            }
            BinOp::Add if va.pts.is_empty() && !vb.pts.is_empty() => {
                let scale = pointee_size(self.p, self.func, b) as i64;
                let by = va.itv.unwrap_or(Itv::TOP).mul(&Itv::single(scale));
                AbsVal {
                    itv: vb.itv.map(|i| i.add(&by)),
                    pts: shift(&vb.pts, by),
                }
            }
            _ if op.is_comparison() => {
                if va.pts.is_empty() && vb.pts.is_empty() {
                    let (Some(x), Some(y)) = (va.itv, vb.itv) else {
                        return AbsVal::bottom();
                    };
                    return AbsVal::int(x.compare(op, &y));
                }
                // comparisons against null are decided by the address part
                let null_cmp = |p: &AbsVal, z: &AbsVal| {
                    z.pts.is_empty() && z.itv == Some(Itv::single(0)) && p.itv.is_none()
                };
                if (op == BinOp::Eq || op == BinOp::Ne) && (null_cmp(&va, &vb) || null_cmp(&vb, &va)) {
                    return AbsVal::constant((op == BinOp::Ne) as i64);
                }
                AbsVal::int(Itv::BOOL)
            }
            _ => {
                let (Some(x), Some(y)) = (va.as_int(), vb.as_int()) else {
                    return AbsVal::bottom();
                };
                AbsVal::int(match op {
                    BinOp::Add => x.add(&y),
                    BinOp::Sub => x.sub(&y),
                    BinOp::Mul => x.mul(&y),
                    BinOp::Div => x.div(&y),
                    BinOp::Rem => x.rem(&y),
                    _ => Itv::TOP,
                })
            }
        }
    }

    /// Write `v` through `targets`. A single definite target is overwritten;
    /// everything else is joined into.
    pub fn store(
        &self,
        s: &mut AbsState,
        targets: &BTreeMap<Base, Itv>,
        v: &AbsVal,
        weak: &dyn Fn(&Base) -> bool,
    ) {
        let strong_ok = targets.len() == 1;
        for (base, off) in targets {
            if matches!(base, Base::Function(_)) {
                continue;
            }
            let strong = strong_ok && off.is_singleton() && !base.is_weak() && !weak(base);
            for o in self.cells_in(s, base, *off) {
                let cell = (base.clone(), o);
                let new = if strong {
                    v.clone()
                } else {
                    s.get(self.p, &cell).join(v)
                };
                s.env.insert(cell, new);
            }
        }
    }

    /// Narrow `s` to the states where `cond` evaluates to `polarity`.
    pub fn refine(&self, s: &AbsState, cond: &Expr, polarity: bool) -> AbsState {
        if !s.reachable {
            return s.clone();
        }
        let v = self.eval(s, cond);
        if v.is_bottom()
            || (polarity && !v.may_be_nonzero())
            || (!polarity && !v.may_be_zero())
        {
            return AbsState::unreachable();
        }
        match cond {
            Expr::Unary(UnOp::Not, e) => self.refine(s, e, !polarity),
            Expr::Cast(_, e) => self.refine(s, e, polarity),
            Expr::Binary(BinOp::And, a, b) => {
                if polarity {
                    self.refine(&self.refine(s, a, true), b, true)
                } else {
                    let left = self.refine(s, a, false);
                    let right = self.refine(&self.refine(s, a, true), b, false);
                    left.join(self.p, &right)
                }
            }
            Expr::Binary(BinOp::Or, a, b) => {
                if polarity {
                    let left = self.refine(s, a, true);
                    let right = self.refine(&self.refine(s, a, false), b, true);
                    left.join(self.p, &right)
                } else {
                    self.refine(&self.refine(s, a, false), b, false)
                }
            }
            Expr::Binary(op, a, b) if op.is_comparison() => {
                let op = if polarity { *op } else { op.negate() };
                let vb = self.eval(s, b);
                let s1 = self.constrain(s, a, op, &vb);
                if !s1.reachable {
                    return s1;
                }
                let va = self.eval(&s1, a);
                self.constrain(&s1, b, op.flip(), &va)
            }
            e if e.is_lvalue() => {
                let op = if polarity { BinOp::Ne } else { BinOp::Eq };
                self.constrain(s, e, op, &AbsVal::constant(0))
            }
            _ => s.clone(),
        }
    }

    fn constrain(&self, s: &AbsState, lv: &Expr, op: BinOp, bound: &AbsVal) -> AbsState {
        let lv = match lv {
            Expr::Cast(_, e) => e.as_ref(),
            e => e,
        };
        if !lv.is_lvalue() || !self.ty(lv).is_scalar() || !bound.pts.is_empty() {
            return s.clone();
        }
        let Some(b) = bound.itv else {
            return s.clone();
        };
        let targets = self.targets(s, lv);
        let [(base, off)] = targets.iter().collect::<Vec<_>>()[..] else {
            return s.clone();
        };
        if !off.is_singleton() || base.is_weak() || matches!(base, Base::Function(_)) {
            return s.clone();
        }
        let cell = (base.clone(), off.lo);
        if base.slots(self.p).is_some_and(|sl| !sl.contains(&off.lo)) {
            return s.clone();
        }
        let cur = s.get(self.p, &cell);
        let itv = cur.itv.and_then(|i| constrain_itv(i, op, b));
        let pts = if op == BinOp::Eq && b == Itv::single(0) {
            BTreeMap::new()
        } else {
            cur.pts.clone()
        };
        let new = AbsVal { itv, pts };
        if new.is_bottom() {
            return AbsState::unreachable();
        }
        let mut out = s.clone();
        out.env.insert(cell, new);
        out
    }
}

/// The interval/points-to analysis of one thread class.
pub struct AbsAnalysis<'a> {
    pub p: &'a Program,
    pub cfgs: &'a CfgSet,
    pub thread: ThreadId,
    pub mode: UpdateMode,
    pub weak_allocs: &'a BTreeSet<StmtId>,
    pub escaped: &'a BTreeSet<(String, String)>,
}

impl<'a> AbsAnalysis<'a> {
    fn weak_target(&self, b: &Base) -> bool {
        self.mode == UpdateMode::Weak && is_shared_base(b, self.escaped)
    }

    pub fn evaluator<'b>(&'b self, ctx: &'b Context) -> Evaluator<'b> {
        Evaluator::at(self.p, self.cfgs, ctx)
    }

    fn drop_frame(&self, s: &mut AbsState, callee: &str, ccs: &CallString) {
        s.env.retain(|(b, _), _| match b {
            Base::Local {
                thread, func, cs, ..
            }
            | Base::Formal {
                thread, func, cs, ..
            } => !(*thread == self.thread && func == callee && cs == ccs),
            _ => true,
        });
    }

    pub fn dynamic_base(&self, site: StmtId) -> Base {
        Base::Dynamic {
            site,
            weak: self.weak_allocs.contains(&site),
        }
    }
}

impl<'a> Analysis for AbsAnalysis<'a> {
    type State = AbsState;

    fn bottom(&self) -> AbsState {
        AbsState::unreachable()
    }

    fn is_bottom(&self, s: &AbsState) -> bool {
        !s.reachable
    }

    fn join(&self, a: &AbsState, b: &AbsState) -> AbsState {
        a.join(self.p, b)
    }

    fn widen(&self, older: &AbsState, newer: &AbsState) -> AbsState {
        older.widen(self.p, newer)
    }

    fn transfer(&self, ctx: &Context, label: &EdgeLabel, s: &AbsState) -> AbsState {
        if !s.reachable {
            return s.clone();
        }
        let ev = self.evaluator(ctx);
        let id = match label {
            EdgeLabel::Guard { cond, polarity, .. } => return ev.refine(s, cond, *polarity),
            EdgeLabel::Stmt(id) => *id,
        };
        let mut out = s.clone();
        match &self.cfgs.stmt(id).kind {
            StmtKind::Assign(lv, e) => {
                let v = ev.eval(s, e);
                if v.is_bottom() {
                    return AbsState::unreachable();
                }
                ev.store(&mut out, &ev.targets(s, lv), &v, &|b| self.weak_target(b));
            }
            StmtKind::Return(e) => {
                out.ret = e.as_ref().map(|e| ev.eval(s, e));
            }
            StmtKind::Create { handle, .. } => {
                ev.store(&mut out, &ev.targets(s, handle), &AbsVal::constant(id as i64), &|b| self.weak_target(b));
            }
            StmtKind::TryLock { result, .. } => {
                ev.store(&mut out, &ev.targets(s, result), &AbsVal::int(TRYLOCK_RESULT), &|b| self.weak_target(b));
            }
            StmtKind::Alloc { result, .. } => {
                let base = self.dynamic_base(id);
                if !base.is_weak() && self.mode == UpdateMode::Strong {
                    out.env.retain(|(b, _), _| *b != base);
                }
                ev.store(&mut out, &ev.targets(s, result), &AbsVal::addr(base, Itv::single(0)), &|b| self.weak_target(b));
            }
            StmtKind::Call { .. } => unreachable!("calls are handled by the engine"),
            _ => {}
        }
        out
    }

    fn call_entry(
        &self,
        ctx: &Context,
        callee_cs: &CallString,
        callee: &str,
        args: &[Expr],
        s: &AbsState,
    ) -> AbsState {
        if !s.reachable {
            return s.clone();
        }
        let ev = self.evaluator(ctx);
        let f = self.p.function(callee).expect("callee exists");
        let mut out = s.clone();
        out.ret = None;
        self.drop_frame(&mut out, callee, callee_cs);
        for (formal, arg) in f.formals.iter().zip(args) {
            let v = ev.eval(s, arg);
            if v.is_bottom() {
                return AbsState::unreachable();
            }
            let base = Base::Formal {
                thread: self.thread,
                func: callee.to_string(),
                name: formal.name.clone(),
                cs: callee_cs.clone(),
            };
            out.env.insert((base, 0), v);
        }
        out
    }

    fn call_return(
        &self,
        ctx: &Context,
        callee_cs: &CallString,
        callee: &str,
        result: Option<&Expr>,
        _pre: &AbsState,
        exit: &AbsState,
    ) -> AbsState {
        if !exit.reachable {
            return exit.clone();
        }
        let mut out = exit.clone();
        let ret = out.ret.take();
        self.drop_frame(&mut out, callee, callee_cs);
        if let Some(lv) = result {
            let ev = self.evaluator(ctx);
            let v = ret.unwrap_or_else(AbsVal::top);
            let t = ev.targets(&out, lv);
            ev.store(&mut out, &t, &v, &|b| self.weak_target(b));
        }
        out
    }
}
