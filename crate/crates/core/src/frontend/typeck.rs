//! Static types of expressions, needed for element sizes, field offsets and
//! atomicity of accesses.

use std::collections::BTreeSet;

use super::ast::*;

/// Type of `e` in function `func`. Arrays are returned undecayed.
pub fn type_of(p: &Program, func: &str, e: &Expr) -> CType {
    match e {
        Expr::Int(_) | Expr::SizeOf(_) | Expr::Unary(..) => CType::Int,
        Expr::Var(name, scope) => p
            .var_type(func, name, *scope)
            .cloned()
            .unwrap_or(CType::Int),
        Expr::Func(_) => CType::Ptr(Box::new(CType::Void)),
        Expr::AddrOf(inner) => CType::Ptr(Box::new(type_of(p, func, inner))),
        Expr::Deref(inner) | Expr::Index(inner, _) => match type_of(p, func, inner) {
            CType::Ptr(t) | CType::Array(t, _) => p.resolve_type(*t),
            _ => CType::Int,
        },
        Expr::Field(inner, name) => match type_of(p, func, inner) {
            CType::Record(def) => def
                .field(name)
                .map(|f| f.ty.clone())
                .unwrap_or(CType::Int),
            _ => CType::Int,
        },
        Expr::Binary(op, a, b) => match op {
            BinOp::Add | BinOp::Sub => {
                let ta = decay(type_of(p, func, a));
                let tb = decay(type_of(p, func, b));
                match (ta.is_pointer(), tb.is_pointer()) {
                    (true, false) => ta,
                    (false, true) if *op == BinOp::Add => tb,
                    _ => CType::Int,
                }
            }
            _ => CType::Int,
        },
        Expr::Cast(t, _) => t.clone(),
    }
}

pub fn decay(t: CType) -> CType {
    match t {
        CType::Array(elem, _) => CType::Ptr(elem),
        other => other,
    }
}

/// Byte offset of `field` within the record type of `base`.
pub fn field_offset(p: &Program, func: &str, base: &Expr, field: &str) -> Option<u64> {
    match type_of(p, func, base) {
        CType::Record(def) => def.field(field).map(|f| f.offset),
        _ => None,
    }
}

/// Size in bytes of the objects `e` points to, used to scale pointer
/// arithmetic. `void *` arithmetic counts bytes.
pub fn pointee_size(p: &Program, func: &str, e: &Expr) -> u64 {
    match decay(type_of(p, func, e)) {
        CType::Ptr(t) => p.resolve_type(*t).size(p.machine).max(1),
        _ => 1,
    }
}

/// Variable whose storage `e` designates directly, without following
/// pointers.
fn storage_root<'e>(p: &Program, func: &str, e: &'e Expr) -> Option<(&'e str, Scope)> {
    match e {
        Expr::Var(n, s) => Some((n, *s)),
        Expr::Field(inner, _) => storage_root(p, func, inner),
        Expr::Index(a, _) if matches!(type_of(p, func, a), CType::Array(..)) => {
            storage_root(p, func, a)
        }
        _ => None,
    }
}

/// `value` is true where an array-typed variable would decay to a pointer.
fn collect_escapes(
    p: &Program,
    func: &str,
    e: &Expr,
    value: bool,
    out: &mut BTreeSet<(String, String)>,
) {
    match e {
        Expr::Var(n, s) => {
            let is_array = matches!(p.var_type(func, n, *s), Some(CType::Array(..)));
            if value && is_array && *s != Scope::Global {
                out.insert((func.to_string(), n.clone()));
            }
        }
        Expr::AddrOf(inner) => {
            if let Some((n, s)) = storage_root(p, func, inner) {
                if s != Scope::Global {
                    out.insert((func.to_string(), n.to_string()));
                }
            }
            collect_escapes(p, func, inner, false, out);
        }
        Expr::Int(_) | Expr::Func(_) | Expr::SizeOf(_) => {}
        Expr::Field(a, _) => collect_escapes(p, func, a, false, out),
        Expr::Index(a, i) => {
            collect_escapes(p, func, a, false, out);
            collect_escapes(p, func, i, true, out);
        }
        Expr::Deref(a) | Expr::Unary(_, a) | Expr::Cast(_, a) => {
            collect_escapes(p, func, a, true, out)
        }
        Expr::Binary(_, a, b) => {
            collect_escapes(p, func, a, true, out);
            collect_escapes(p, func, b, true, out);
        }
    }
}

/// Frame variables, as (function, name), whose address is taken anywhere,
/// including arrays used as pointer values.
pub fn escaped_locals(p: &Program) -> BTreeSet<(String, String)> {
    let mut out = BTreeSet::new();
    for (func, s) in p.statements() {
        for e in s.kind.expressions() {
            collect_escapes(p, func, e, true, &mut out);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_program;

    #[test]
    fn types_of_lvalues() {
        let p = parse_program(
            "struct S { int a; atomic_int b; }; struct S s; int arr[4]; int *ptr;
             int main() { return 0; }",
            "t.c",
            MachineModel::Lp64,
        )
        .unwrap();
        let s_b = Expr::Field(Box::new(Expr::Var("s".into(), Scope::Global)), "b".into());
        assert_eq!(type_of(&p, "main", &s_b), CType::AtomicInt);
        assert_eq!(field_offset(&p, "main", &Expr::Var("s".into(), Scope::Global), "b"), Some(4));
        let idx = Expr::Index(
            Box::new(Expr::Var("arr".into(), Scope::Global)),
            Box::new(Expr::Int(1)),
        );
        assert_eq!(type_of(&p, "main", &idx), CType::Int);
        let sum = Expr::Binary(
            BinOp::Add,
            Box::new(Expr::Var("ptr".into(), Scope::Global)),
            Box::new(Expr::Int(1)),
        );
        assert!(type_of(&p, "main", &sum).is_pointer());
        assert_eq!(pointee_size(&p, "main", &Expr::Var("arr".into(), Scope::Global)), 4);
    }

    #[test]
    fn escaped_frame_variables() {
        let p = parse_program(
            "struct S { int a; }; int *gp;
             void *f(void *arg) { int x; int y; struct S s; int buf[2]; gp = &x; y = 1; gp = &s.a; return 0; }
             int main() { return 0; }",
            "t.c",
            MachineModel::Lp64,
        )
        .unwrap();
        let esc = escaped_locals(&p);
        let has = |n: &str| esc.contains(&("f".to_string(), n.to_string()));
        assert!(has("x") && has("s"));
        assert!(!has("y") && !has("arg") && !has("buf"));
        let p = parse_program(
            "int *gp; void *f(void *arg) { int buf[2]; int own[2]; own[0] = 1; gp = buf; return 0; }
             int main() { return 0; }",
            "t.c",
            MachineModel::Lp64,
        )
        .unwrap();
        let esc = escaped_locals(&p);
        assert!(esc.contains(&("f".to_string(), "buf".to_string())));
        assert!(!esc.contains(&("f".to_string(), "own".to_string())));
    }
}
