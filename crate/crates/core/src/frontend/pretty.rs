//! Printing programs back to C source accepted by the parser.
//!
//! Expressions are fully parenthesised, so re-parsing yields the same tree.

use std::fmt::Write;

use super::ast::*;

/// Declaration `ty name` in C declarator syntax.
pub fn declaration(ty: &CType, name: &str) -> String {
    let mut dims = Vec::new();
    let mut t = ty;
    while let CType::Array(elem, n) = t {
        dims.push(*n);
        t = elem;
    }
    let mut stars = 0;
    while let CType::Ptr(inner) = t {
        stars += 1;
        t = inner;
    }
    let mut s = format!("{} {}{}", t, "*".repeat(stars), name);
    for d in dims {
        let _ = write!(s, "[{d}]");
    }
    s
}

/// Type name as written in casts and `sizeof`.
pub fn type_name(ty: &CType) -> String {
    declaration(ty, "").trim_end().replace(" [", "[")
}

pub fn expr(e: &Expr) -> String {
    match e {
        Expr::Int(v) if *v < 0 => format!("({v})"),
        Expr::Int(v) => v.to_string(),
        Expr::Var(n, _) | Expr::Func(n) => n.clone(),
        Expr::AddrOf(e) => format!("&{}", atom(e)),
        Expr::Deref(e) => format!("*{}", atom(e)),
        Expr::Index(a, i) => format!("{}[{}]", atom(a), expr(i)),
        Expr::Field(inner, f) => match inner.as_ref() {
            Expr::Deref(p) => format!("{}->{}", atom(p), f),
            other => format!("{}.{}", atom(other), f),
        },
        Expr::Unary(UnOp::Neg, e) => format!("-{}", atom(e)),
        Expr::Unary(UnOp::Not, e) => format!("!{}", atom(e)),
        Expr::Binary(op, a, b) => format!("({} {} {})", expr(a), op.symbol(), expr(b)),
        Expr::Cast(t, e) => format!("(({}){})", type_name(t), atom(e)),
        Expr::SizeOf(t) => format!("sizeof({})", type_name(t)),
    }
}

/// Expression that binds tighter than any prefix or postfix operator.
fn atom(e: &Expr) -> String {
    match e {
        Expr::Var(..) | Expr::Func(_) | Expr::Binary(..) | Expr::Cast(..) | Expr::SizeOf(_) => {
            expr(e)
        }
        Expr::Int(v) if *v >= 0 => expr(e),
        _ => format!("({})", expr(e)),
    }
}

fn args(list: &[Expr]) -> String {
    list.iter().map(expr).collect::<Vec<_>>().join(", ")
}

fn indent(out: &mut String, depth: usize) {
    for _ in 0..depth {
        out.push_str("    ");
    }
}

fn block(out: &mut String, stmts: &[Stmt], depth: usize) {
    for s in stmts {
        stmt(out, s, depth);
    }
}

/// One statement with its nested blocks.
pub fn stmt(out: &mut String, s: &Stmt, depth: usize) {
    indent(out, depth);
    match &s.kind {
        StmtKind::Assign(lv, e) => {
            let _ = writeln!(out, "{} = {};", expr(lv), expr(e));
        }
        StmtKind::Call { func, args: a, result } => {
            if let Some(r) = result {
                let _ = write!(out, "{} = ", expr(r));
            }
            let _ = writeln!(out, "{}({});", func, args(a));
        }
        StmtKind::If {
            cond,
            then_branch,
            else_branch,
        } => {
            let _ = writeln!(out, "if ({}) {{", expr(cond));
            block(out, then_branch, depth + 1);
            indent(out, depth);
            if else_branch.is_empty() {
                out.push_str("}\n");
            } else {
                out.push_str("} else {\n");
                block(out, else_branch, depth + 1);
                indent(out, depth);
                out.push_str("}\n");
            }
        }
        StmtKind::While { cond, body } => {
            let _ = writeln!(out, "while ({}) {{", expr(cond));
            block(out, body, depth + 1);
            indent(out, depth);
            out.push_str("}\n");
        }
        StmtKind::Break => out.push_str("break;\n"),
        StmtKind::Return(None) => out.push_str("return;\n"),
        StmtKind::Return(Some(e)) => {
            let _ = writeln!(out, "return {};", expr(e));
        }
        StmtKind::Create { handle, entry, arg } => {
            let h = match handle {
                Expr::Deref(p) => expr(p),
                other => format!("&{}", atom(other)),
            };
            let _ = writeln!(out, "pthread_create({}, 0, {}, {});", h, expr(entry), expr(arg));
        }
        StmtKind::Join(h) => {
            let _ = writeln!(out, "pthread_join({}, 0);", expr(h));
        }
        StmtKind::Lock(l) => {
            let _ = writeln!(out, "pthread_mutex_lock({});", expr(l));
        }
        StmtKind::Unlock(l) => {
            let _ = writeln!(out, "pthread_mutex_unlock({});", expr(l));
        }
        StmtKind::TryLock { lock, result } => {
            let _ = writeln!(out, "{} = pthread_mutex_trylock({});", expr(result), expr(lock));
        }
        StmtKind::RdLock(l) => {
            let _ = writeln!(out, "pthread_rwlock_rdlock({});", expr(l));
        }
        StmtKind::WrLock(l) => {
            let _ = writeln!(out, "pthread_rwlock_wrlock({});", expr(l));
        }
        StmtKind::RwUnlock(l) => {
            let _ = writeln!(out, "pthread_rwlock_unlock({});", expr(l));
        }
        StmtKind::Alloc { result, size } => {
            let _ = writeln!(out, "{} = malloc({});", expr(result), expr(size));
        }
        StmtKind::Marker(name, a) => {
            let _ = writeln!(out, "{}({});", name, args(a));
        }
    }
}

fn signature(f: &Function) -> String {
    let formals = if f.formals.is_empty() {
        "void".to_string()
    } else {
        f.formals
            .iter()
            .map(|d| declaration(&d.ty, &d.name))
            .collect::<Vec<_>>()
            .join(", ")
    };
    format!("{}({})", declaration(&f.ret, &f.name), formals)
}

/// The whole translation unit.
pub fn program(p: &Program) -> String {
    let mut out = String::new();
    for r in &p.records {
        let _ = writeln!(out, "struct {} {{", r.name);
        for f in &r.fields {
            let _ = writeln!(out, "    {};", declaration(&f.ty, &f.name));
        }
        out.push_str("};\n");
    }
    for g in &p.globals {
        out.push_str(&declaration(&g.ty, &g.name));
        match &g.init {
            None => {}
            Some(Initializer::Scalar(v)) => {
                let _ = write!(out, " = {}", expr(&Expr::Int(*v)));
            }
            Some(Initializer::List(vals)) => {
                let vals: Vec<_> = vals.iter().map(|v| expr(&Expr::Int(*v))).collect();
                let _ = write!(out, " = {{{}}}", vals.join(", "));
            }
            Some(Initializer::LockInit) => out.push_str(match g.ty {
                CType::RwLock => " = PTHREAD_RWLOCK_INITIALIZER",
                _ => " = PTHREAD_MUTEX_INITIALIZER",
            }),
        }
        out.push_str(";\n");
    }
    for f in p.functions.values() {
        let _ = writeln!(out, "{};", signature(f));
    }
    for f in p.functions.values() {
        let _ = writeln!(out, "\n{} {{", signature(f));
        for l in &f.locals {
            let _ = writeln!(out, "    {};", declaration(&l.ty, &l.name));
        }
        block(&mut out, &f.body, 1);
        out.push_str("}\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_program;
    use proptest::prelude::*;

    fn round_trip(src: &str) {
        let p = parse_program(src, "t.c", MachineModel::Lp64).unwrap();
        let printed = program(&p);
        let q = parse_program(&printed, "t.c", MachineModel::Lp64)
            .unwrap_or_else(|e| panic!("{e}\n{printed}"));
        assert_eq!(p.without_locations(), q.without_locations(), "{printed}");
    }

    #[test]
    fn declarations() {
        let t = CType::Array(Box::new(CType::Ptr(Box::new(CType::Int))), 3);
        assert_eq!(declaration(&t, "a"), "int *a[3]");
        assert_eq!(type_name(&CType::Ptr(Box::new(CType::Void))), "void *");
    }

    #[test]
    fn round_trips_threaded_program() {
        round_trip(
            "struct node { int val; struct node *next; };
             struct node nodes[2];
             pthread_mutex_t m = PTHREAD_MUTEX_INITIALIZER;
             pthread_rwlock_t rw;
             int a[4] = {1, 2};
             int g = -3;
             atomic_int flag;
             int helper(int *p, int k) { *p = *p + k; return *p; }
             void *worker(void *arg) {
                 int *p = (int *) arg;
                 int r;
                 for (int i = 0; i < 4; i++) {
                     if (pthread_mutex_trylock(&m) == 0) { a[i] = helper(p, i) * 2; pthread_mutex_unlock(&m); }
                     else break;
                 }
                 pthread_rwlock_rdlock(&rw); r = nodes[0].next->val; pthread_rwlock_unlock(&rw);
                 return NULL;
             }
             int main() {
                 pthread_t t[2];
                 int *buf = malloc(sizeof(int) * 4);
                 pthread_create(&t[0], 0, worker, buf);
                 pthread_create(&t[1], 0, worker, &g);
                 while (!flag) {}
                 pthread_join(t[0], 0); pthread_join(t[1], 0);
                 free(buf);
                 return 0;
             }",
        );
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-50i64..50).prop_map(Expr::Int),
            Just(Expr::Var("x".into(), Scope::Global)),
            Just(Expr::Var("y".into(), Scope::Local)),
            Just(Expr::Index(
                Box::new(Expr::Var("arr".into(), Scope::Global)),
                Box::new(Expr::Var("y".into(), Scope::Local))
            )),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            let ops = prop_oneof![
                Just(BinOp::Add),
                Just(BinOp::Sub),
                Just(BinOp::Mul),
                Just(BinOp::Lt),
                Just(BinOp::Eq),
                Just(BinOp::And),
                Just(BinOp::Or),
            ];
            prop_oneof![
                (ops, inner.clone(), inner.clone())
                    .prop_map(|(op, a, b)| Expr::Binary(op, Box::new(a), Box::new(b))),
                inner.clone().prop_map(|e| Expr::Unary(UnOp::Not, Box::new(e))),
                inner
                    .clone()
                    .prop_filter("folded", |e| !matches!(e, Expr::Int(_)))
                    .prop_map(|e| Expr::Unary(UnOp::Neg, Box::new(e))),
                inner.prop_map(|e| Expr::Cast(CType::Int, Box::new(e))),
            ]
        })
    }

    proptest! {
        #[test]
        fn expressions_round_trip(e in arb_expr()) {
            let src = format!(
                "int x; int arr[8]; int main() {{ int y; y = {}; return 0; }}",
                expr(&e)
            );
            let p = parse_program(&src, "t.c", MachineModel::Lp64).unwrap();
            match &p.function("main").unwrap().body[0].kind {
                StmtKind::Assign(_, got) => prop_assert_eq!(got, &e),
                other => prop_assert!(false, "{:?}", other),
            }
        }
    }
}
