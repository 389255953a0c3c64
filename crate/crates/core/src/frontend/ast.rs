//! Syntax tree for the supported C subset.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

pub type StmtId = u32;

/// Target data model. Only the width of addresses differs between the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
pub enum MachineModel {
    Ilp32,
    #[default]
    Lp64,
}

impl MachineModel {
    pub fn pointer_size(self) -> u64 {
        match self {
            MachineModel::Ilp32 => 4,
            MachineModel::Lp64 => 8,
        }
    }
}

impl std::str::FromStr for MachineModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ilp32" | "gcc_x86_32" => Ok(MachineModel::Ilp32),
            "lp64" | "gcc_x86_64" => Ok(MachineModel::Lp64),
            other => Err(format!("unknown machine model `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize)]
pub struct Loc {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Field {
    pub name: String,
    pub ty: CType,
    pub offset: u64,
}

/// A flat record. Field offsets are cumulative sizes of the preceding fields.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RecordDef {
    pub name: String,
    pub fields: Vec<Field>,
    pub size: u64,
}

impl RecordDef {
    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CType {
    Void,
    Int,
    AtomicInt,
    Mutex,
    RwLock,
    ThreadHandle,
    Ptr(Box<CType>),
    Array(Box<CType>, u64),
    Record(Arc<RecordDef>),
    /// Reference to a struct not yet complete, only behind a pointer.
    Named(String),
}

impl CType {
    pub fn size(&self, mm: MachineModel) -> u64 {
        match self {
            CType::Void => 1,
            CType::Int | CType::AtomicInt => 4,
            // glibc object sizes
            CType::Mutex => match mm {
                MachineModel::Ilp32 => 24,
                MachineModel::Lp64 => 40,
            },
            CType::RwLock => match mm {
                MachineModel::Ilp32 => 32,
                MachineModel::Lp64 => 56,
            },
            CType::ThreadHandle => mm.pointer_size(),
            CType::Ptr(_) => mm.pointer_size(),
            CType::Array(elem, n) => elem.size(mm) * n,
            CType::Record(def) => def.size,
            CType::Named(_) => 0,
        }
    }

    pub fn is_pointer(&self) -> bool {
        matches!(self, CType::Ptr(_))
    }

    pub fn is_scalar(&self) -> bool {
        matches!(
            self,
            CType::Int | CType::AtomicInt | CType::ThreadHandle | CType::Ptr(_)
        )
    }

    /// Element type for arrays and pointers.
    pub fn element(&self) -> Option<&CType> {
        match self {
            CType::Ptr(t) | CType::Array(t, _) => Some(t),
            _ => None,
        }
    }

    /// Scalar slots `(offset, type)` covering the object, in offset order.
    /// Lock objects occupy a single opaque slot.
    pub fn scalar_slots(&self, mm: MachineModel) -> Vec<(u64, CType)> {
        let mut out = Vec::new();
        self.collect_slots(0, mm, &mut out);
        out
    }

    fn collect_slots(&self, base: u64, mm: MachineModel, out: &mut Vec<(u64, CType)>) {
        match self {
            CType::Array(elem, n) => {
                let sz = elem.size(mm);
                for i in 0..*n {
                    elem.collect_slots(base + i * sz, mm, out);
                }
            }
            CType::Record(def) => {
                for f in &def.fields {
                    f.ty.collect_slots(base + f.offset, mm, out);
                }
            }
            CType::Void | CType::Named(_) => {}
            other => out.push((base, other.clone())),
        }
    }
}

impl fmt::Display for CType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CType::Void => write!(f, "void"),
            CType::Int => write!(f, "int"),
            CType::AtomicInt => write!(f, "atomic_int"),
            CType::Mutex => write!(f, "pthread_mutex_t"),
            CType::RwLock => write!(f, "pthread_rwlock_t"),
            CType::ThreadHandle => write!(f, "pthread_t"),
            CType::Ptr(t) => write!(f, "{t} *"),
            CType::Array(t, n) => write!(f, "{t}[{n}]"),
            CType::Record(def) => write!(f, "struct {}", def.name),
            CType::Named(name) => write!(f, "struct {name}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Scope {
    Global,
    Local,
    Formal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Rem => "%",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::And => "&&",
            BinOp::Or => "||",
        }
    }

    pub fn is_comparison(self) -> bool {
        matches!(
            self,
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::Eq | BinOp::Ne
        )
    }

    /// `a op b` == `b flip(op) a`
    pub fn flip(self) -> BinOp {
        match self {
            BinOp::Lt => BinOp::Gt,
            BinOp::Le => BinOp::Ge,
            BinOp::Gt => BinOp::Lt,
            BinOp::Ge => BinOp::Le,
            other => other,
        }
    }

    /// `!(a op b)` == `a negate(op) b`
    pub fn negate(self) -> BinOp {
        match self {
            BinOp::Lt => BinOp::Ge,
            BinOp::Le => BinOp::Gt,
            BinOp::Gt => BinOp::Le,
            BinOp::Ge => BinOp::Lt,
            BinOp::Eq => BinOp::Ne,
            BinOp::Ne => BinOp::Eq,
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Int(i64),
    Var(String, Scope),
    /// A function designator, only meaningful as a thread entry.
    Func(String),
    AddrOf(Box<Expr>),
    Deref(Box<Expr>),
    Index(Box<Expr>, Box<Expr>),
    Field(Box<Expr>, String),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Cast(CType, Box<Expr>),
    SizeOf(CType),
}

impl Expr {
    pub fn is_lvalue(&self) -> bool {
        matches!(
            self,
            Expr::Var(..) | Expr::Deref(_) | Expr::Index(..) | Expr::Field(..)
        )
    }

    /// Names of variables read syntactically, with their scopes.
    pub fn variables(&self, out: &mut Vec<(String, Scope)>) {
        match self {
            Expr::Var(n, s) => out.push((n.clone(), *s)),
            Expr::Int(_) | Expr::Func(_) | Expr::SizeOf(_) => {}
            Expr::AddrOf(e) | Expr::Deref(e) | Expr::Unary(_, e) | Expr::Cast(_, e) => {
                e.variables(out)
            }
            Expr::Field(e, _) => e.variables(out),
            Expr::Index(a, b) | Expr::Binary(_, a, b) => {
                a.variables(out);
                b.variables(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StmtKind {
    Assign(Expr, Expr),
    Call {
        func: String,
        args: Vec<Expr>,
        result: Option<Expr>,
    },
    If {
        cond: Expr,
        then_branch: Vec<Stmt>,
        else_branch: Vec<Stmt>,
    },
    While {
        cond: Expr,
        body: Vec<Stmt>,
    },
    Break,
    Return(Option<Expr>),
    Create {
        handle: Expr,
        entry: Expr,
        arg: Expr,
    },
    Join(Expr),
    Lock(Expr),
    Unlock(Expr),
    TryLock {
        lock: Expr,
        result: Expr,
    },
    RdLock(Expr),
    WrLock(Expr),
    RwUnlock(Expr),
    Alloc {
        result: Expr,
        size: Expr,
    },
    /// No-op call kept for source fidelity (`pthread_mutex_init`, `free`,
    /// the `assert_nonracing` marker, ...).
    Marker(String, Vec<Expr>),
}

impl StmtKind {
    /// Expressions of the statement itself, excluding nested blocks.
    pub fn expressions(&self) -> Vec<&Expr> {
        match self {
            StmtKind::Assign(a, b) => vec![a, b],
            StmtKind::Call { args, result, .. } => args.iter().chain(result).collect(),
            StmtKind::If { cond, .. } | StmtKind::While { cond, .. } => vec![cond],
            StmtKind::Break | StmtKind::Return(None) => vec![],
            StmtKind::Return(Some(e))
            | StmtKind::Join(e)
            | StmtKind::Lock(e)
            | StmtKind::Unlock(e)
            | StmtKind::RdLock(e)
            | StmtKind::WrLock(e)
            | StmtKind::RwUnlock(e) => vec![e],
            StmtKind::Create { handle, entry, arg } => vec![handle, entry, arg],
            StmtKind::TryLock { lock, result } => vec![lock, result],
            StmtKind::Alloc { result, size } => vec![result, size],
            StmtKind::Marker(_, args) => args.iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Stmt {
    pub id: StmtId,
    pub loc: Loc,
    pub kind: StmtKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Initializer {
    Scalar(i64),
    List(Vec<i64>),
    /// `PTHREAD_MUTEX_INITIALIZER` and friends.
    LockInit,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GlobalDecl {
    pub name: String,
    pub ty: CType,
    pub init: Option<Initializer>,
    pub loc: Loc,
}

impl GlobalDecl {
    /// Static initial value of the scalar slot at byte `offset`.
    pub fn initial_value(&self, offset: u64, mm: MachineModel) -> i64 {
        match &self.init {
            None | Some(Initializer::LockInit) => 0,
            Some(Initializer::Scalar(v)) => {
                if offset == 0 {
                    *v
                } else {
                    0
                }
            }
            Some(Initializer::List(vals)) => {
                let slots = self.ty.scalar_slots(mm);
                slots
                    .iter()
                    .position(|(o, _)| *o == offset)
                    .and_then(|i| vals.get(i).copied())
                    .unwrap_or(0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VarDecl {
    pub name: String,
    pub ty: CType,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Function {
    pub name: String,
    pub ret: CType,
    pub formals: Vec<VarDecl>,
    pub locals: Vec<VarDecl>,
    pub body: Vec<Stmt>,
    pub loc: Loc,
}

impl Function {
    pub fn var_type(&self, name: &str, scope: Scope) -> Option<&CType> {
        let list = match scope {
            Scope::Local => &self.locals,
            Scope::Formal => &self.formals,
            Scope::Global => return None,
        };
        list.iter().find(|d| d.name == name).map(|d| &d.ty)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub file: String,
    pub machine: MachineModel,
    pub records: Vec<Arc<RecordDef>>,
    pub globals: Vec<GlobalDecl>,
    pub functions: BTreeMap<String, Function>,
    pub entry: String,
}

impl Program {
    pub fn global(&self, name: &str) -> Option<&GlobalDecl> {
        self.globals.iter().find(|g| g.name == name)
    }

    /// Replace an incomplete struct reference by its definition.
    pub fn resolve_type(&self, ty: CType) -> CType {
        match ty {
            CType::Named(name) => self
                .records
                .iter()
                .find(|r| r.name == name)
                .map(|r| CType::Record(r.clone()))
                .unwrap_or(CType::Named(name)),
            other => other,
        }
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.get(name)
    }

    pub fn var_type(&self, func: &str, name: &str, scope: Scope) -> Option<&CType> {
        match scope {
            Scope::Global => self.global(name).map(|g| &g.ty),
            _ => self.functions.get(func)?.var_type(name, scope),
        }
    }

    /// Every statement, depth-first in source order, with its function.
    pub fn statements(&self) -> Vec<(&str, &Stmt)> {
        fn walk<'a>(f: &'a str, stmts: &'a [Stmt], out: &mut Vec<(&'a str, &'a Stmt)>) {
            for s in stmts {
                out.push((f, s));
                match &s.kind {
                    StmtKind::If {
                        then_branch,
                        else_branch,
                        ..
                    } => {
                        walk(f, then_branch, out);
                        walk(f, else_branch, out);
                    }
                    StmtKind::While { body, .. } => walk(f, body, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        for (name, func) in &self.functions {
            walk(name, &func.body, &mut out);
        }
        out
    }

    /// Clone with every source location zeroed, for structural comparison.
    pub fn without_locations(&self) -> Program {
        fn strip(stmts: &mut [Stmt]) {
            for s in stmts {
                s.loc = Loc::default();
                match &mut s.kind {
                    StmtKind::If {
                        then_branch,
                        else_branch,
                        ..
                    } => {
                        strip(then_branch);
                        strip(else_branch);
                    }
                    StmtKind::While { body, .. } => strip(body),
                    _ => {}
                }
            }
        }
        let mut p = self.clone();
        p.file = String::new();
        for g in &mut p.globals {
            g.loc = Loc::default();
        }
        for f in p.functions.values_mut() {
            f.loc = Loc::default();
            strip(&mut f.body);
        }
        p
    }
}
