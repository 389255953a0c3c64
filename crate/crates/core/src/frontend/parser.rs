//! Recursive-descent parser for the supported C subset.
//!
//! Source-level preprocessing happens here: `_Atomic int` and `atomic_int`
//! both produce [`CType::AtomicInt`], `for` loops are lowered to `while`,
//! `p->f` becomes `(*p).f`, and calls nested in expressions are hoisted into
//! fresh temporaries ahead of the statement that uses them.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::ast::*;
use super::lexer::{tokenize, Tok, Token};
use super::FrontendError;

type PResult<T> = Result<T, FrontendError>;

pub fn parse_program(src: &str, file: &str, machine: MachineModel) -> PResult<Program> {
    let tokens = tokenize(src)?;
    let mut p = Parser {
        toks: tokens,
        pos: 0,
        machine,
        records: BTreeMap::new(),
        record_order: Vec::new(),
        globals: Vec::new(),
        functions: BTreeMap::new(),
        prototypes: BTreeMap::new(),
        scope: None,
        calls: Vec::new(),
        func_refs: Vec::new(),
    };
    p.parse_unit()?;
    p.finish(file)
}

struct FnScope {
    formals: Vec<VarDecl>,
    locals: Vec<VarDecl>,
    temp_counter: u32,
    loop_depth: u32,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    machine: MachineModel,
    records: BTreeMap<String, Arc<RecordDef>>,
    record_order: Vec<Arc<RecordDef>>,
    globals: Vec<GlobalDecl>,
    functions: BTreeMap<String, Function>,
    prototypes: BTreeMap<String, (CType, usize, Loc)>,
    scope: Option<FnScope>,
    /// (callee, arity, loc) for post-parse resolution
    calls: Vec<(String, usize, Loc)>,
    func_refs: Vec<(String, Loc)>,
}

const TYPE_WORDS: &[&str] = &[
    "int",
    "_Atomic",
    "atomic_int",
    "pthread_mutex_t",
    "pthread_rwlock_t",
    "pthread_t",
    "void",
    "struct",
    "const",
    "volatile",
    "static",
    "extern",
    "sem_t",
    "pthread_cond_t",
    "pthread_attr_t",
    "unsigned",
    "signed",
    "long",
    "short",
    "char",
    "float",
    "double",
];

impl Parser {
    // ---- token helpers -------------------------------------------------

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        let i = (self.pos + n).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn loc(&self) -> Loc {
        self.toks[self.pos].loc
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Tok::Punct(q) if *q == p)
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(self.peek(), Tok::Ident(q) if q == w)
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.is_punct(p) {
            self.next();
            true
        } else {
            false
        }
    }

    fn eat_word(&mut self, w: &str) -> bool {
        if self.is_word(w) {
            self.next();
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, p: &str) -> PResult<()> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{p}`")))
        }
    }

    fn expect_ident(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.next();
                Ok(s)
            }
            _ => Err(self.unexpected("identifier")),
        }
    }

    fn unexpected(&self, wanted: &str) -> FrontendError {
        let found = match self.peek() {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(v) => format!("`{v}`"),
            Tok::Punct(p) => format!("`{p}`"),
            Tok::Eof => "end of input".to_string(),
        };
        FrontendError::parse(self.loc(), format!("expected {wanted}, found {found}"))
    }

    fn unsupported(&self, feature: &str) -> FrontendError {
        FrontendError::Unsupported {
            feature: feature.to_string(),
            loc: self.loc(),
        }
    }

    fn starts_type(&self) -> bool {
        matches!(self.peek(), Tok::Ident(w) if TYPE_WORDS.contains(&w.as_str()))
    }

    // ---- types ---------------------------------------------------------

    /// Type specifier with qualifiers, without declarator.
    fn parse_type_spec(&mut self) -> PResult<CType> {
        let mut atomic = false;
        loop {
            if self.eat_word("const") || self.eat_word("volatile") || self.eat_word("static") {
                continue;
            }
            if self.is_word("extern") {
                self.next();
                continue;
            }
            if self.is_word("_Atomic") {
                self.next();
                if self.eat_punct("(") {
                    let inner = self.parse_type_spec()?;
                    self.expect_punct(")")?;
                    return atomic_of(inner, self.loc());
                }
                atomic = true;
                continue;
            }
            break;
        }
        let loc = self.loc();
        let word = match self.peek().clone() {
            Tok::Ident(w) => w,
            _ => return Err(self.unexpected("type")),
        };
        let ty = match word.as_str() {
            "int" => {
                self.next();
                CType::Int
            }
            "atomic_int" => {
                self.next();
                CType::AtomicInt
            }
            "pthread_mutex_t" => {
                self.next();
                CType::Mutex
            }
            "pthread_rwlock_t" => {
                self.next();
                CType::RwLock
            }
            "pthread_t" => {
                self.next();
                CType::ThreadHandle
            }
            "void" => {
                self.next();
                CType::Void
            }
            "struct" => {
                self.next();
                let name = self.expect_ident()?;
                if self.is_punct("{") {
                    self.parse_record_body(name)?
                } else {
                    match self.records.get(&name) {
                        Some(def) => CType::Record(def.clone()),
                        // incomplete type, usable only behind a pointer
                        None if self.is_punct("*") => CType::Named(name),
                        None => {
                            return Err(FrontendError::parse(
                                loc,
                                format!("unknown struct `{name}`"),
                            ))
                        }
                    }
                }
            }
            "sem_t" => return Err(self.unsupported("semaphore")),
            "pthread_cond_t" => return Err(self.unsupported("condition variable")),
            other => {
                return Err(FrontendError::parse(
                    loc,
                    format!("unsupported type `{other}`"),
                ))
            }
        };
        while self.eat_word("const") || self.eat_word("volatile") {}
        if atomic {
            atomic_of(ty, loc)
        } else {
            Ok(ty)
        }
    }

    fn parse_record_body(&mut self, name: String) -> PResult<CType> {
        let loc = self.loc();
        self.expect_punct("{")?;
        let mut fields = Vec::new();
        let mut offset = 0;
        while !self.eat_punct("}") {
            let base = self.parse_type_spec()?;
            loop {
                let (fname, ty) = self.parse_declarator(base.clone())?;
                if fields.iter().any(|f: &Field| f.name == fname) {
                    return Err(FrontendError::parse(loc, format!("duplicate field `{fname}`")));
                }
                let size = ty.size(self.machine);
                fields.push(Field {
                    name: fname,
                    ty,
                    offset,
                });
                offset += size;
                if !self.eat_punct(",") {
                    break;
                }
            }
            self.expect_punct(";")?;
        }
        let def = Arc::new(RecordDef {
            name: name.clone(),
            fields,
            size: offset,
        });
        if self.records.insert(name.clone(), def.clone()).is_some() {
            return Err(FrontendError::parse(loc, format!("struct `{name}` redefined")));
        }
        self.record_order.push(def.clone());
        Ok(CType::Record(def))
    }

    /// `'*'* name ('[' const ']')*`
    fn parse_declarator(&mut self, base: CType) -> PResult<(String, CType)> {
        let mut ty = base;
        while self.eat_punct("*") {
            while self.eat_word("const") || self.eat_word("volatile") {}
            ty = CType::Ptr(Box::new(ty));
        }
        let name = self.expect_ident()?;
        let dims = self.parse_dims()?;
        for d in dims.into_iter().rev() {
            ty = CType::Array(Box::new(ty), d);
        }
        Ok((name, ty))
    }

    fn parse_dims(&mut self) -> PResult<Vec<u64>> {
        let mut dims = Vec::new();
        while self.is_punct("[") {
            let loc = self.loc();
            self.next();
            if self.is_punct("]") {
                return Err(FrontendError::parse(loc, "array size required"));
            }
            let e = self.parse_expr_nohoist()?;
            let n = const_eval(&e, self.machine).ok_or(FrontendError::Unsupported {
                feature: "variable-length array".into(),
                loc,
            })?;
            if n <= 0 {
                return Err(FrontendError::parse(loc, "array size must be positive"));
            }
            self.expect_punct("]")?;
            dims.push(n as u64);
        }
        Ok(dims)
    }

    /// Type name for casts and `sizeof`: spec followed by stars and dims.
    fn parse_type_name(&mut self) -> PResult<CType> {
        let mut ty = self.parse_type_spec()?;
        while self.eat_punct("*") {
            ty = CType::Ptr(Box::new(ty));
        }
        let dims = self.parse_dims()?;
        for d in dims.into_iter().rev() {
            ty = CType::Array(Box::new(ty), d);
        }
        Ok(ty)
    }

    // ---- top level -----------------------------------------------------

    fn parse_unit(&mut self) -> PResult<()> {
        while !matches!(self.peek(), Tok::Eof) {
            if self.eat_punct(";") {
                continue;
            }
            if self.is_word("typedef") {
                return Err(self.unsupported("typedef"));
            }
            let loc = self.loc();
            let base = self.parse_type_spec()?;
            if self.eat_punct(";") {
                // bare `struct S { ... };`
                continue;
            }
            let (name, ty) = self.parse_declarator(base.clone())?;
            if self.is_punct("(") {
                self.parse_function(name, ty, loc)?;
                continue;
            }
            self.parse_global_rest(base, name, ty, loc)?;
        }
        Ok(())
    }

    fn parse_global_rest(
        &mut self,
        base: CType,
        mut name: String,
        mut ty: CType,
        mut loc: Loc,
    ) -> PResult<()> {
        loop {
            if matches!(ty, CType::Void) {
                return Err(FrontendError::parse(loc, "variable of type void"));
            }
            let init = if self.eat_punct("=") {
                Some(self.parse_initializer(&ty)?)
            } else {
                None
            };
            if self.globals.iter().any(|g| g.name == name) {
                return Err(FrontendError::parse(loc, format!("global `{name}` redeclared")));
            }
            self.globals.push(GlobalDecl {
                name,
                ty,
                init,
                loc,
            });
            if self.eat_punct(",") {
                loc = self.loc();
                let (n, t) = self.parse_declarator(base.clone())?;
                name = n;
                ty = t;
                continue;
            }
            self.expect_punct(";")?;
            return Ok(());
        }
    }

    fn parse_initializer(&mut self, ty: &CType) -> PResult<Initializer> {
        let loc = self.loc();
        if let Tok::Ident(w) = self.peek().clone() {
            if w == "PTHREAD_MUTEX_INITIALIZER" || w == "PTHREAD_RWLOCK_INITIALIZER" {
                self.next();
                return Ok(Initializer::LockInit);
            }
        }
        if self.eat_punct("{") {
            let mut vals = Vec::new();
            while !self.eat_punct("}") {
                let e = self.parse_expr_nohoist()?;
                vals.push(
                    const_eval(&e, self.machine)
                        .ok_or_else(|| FrontendError::parse(loc, "initializer is not constant"))?,
                );
                if !self.eat_punct(",") {
                    self.expect_punct("}")?;
                    break;
                }
            }
            let slots = ty.scalar_slots(self.machine).len();
            if vals.len() > slots {
                return Err(FrontendError::parse(loc, "too many initializers"));
            }
            return Ok(Initializer::List(vals));
        }
        let e = self.parse_expr_nohoist()?;
        match const_eval(&e, self.machine) {
            Some(v) if ty.is_scalar() => Ok(Initializer::Scalar(v)),
            _ => Err(FrontendError::parse(loc, "initializer is not a scalar constant")),
        }
    }

    fn parse_function(&mut self, name: String, ret: CType, loc: Loc) -> PResult<()> {
        self.expect_punct("(")?;
        let mut formals = Vec::new();
        if self.is_word("void") && matches!(self.peek_at(1), Tok::Punct(")")) {
            self.next();
        }
        while !self.is_punct(")") {
            let base = self.parse_type_spec()?;
            let (pname, mut pty) = self.parse_declarator(base)?;
            if let CType::Array(elem, _) = pty {
                pty = CType::Ptr(elem);
            }
            formals.push(VarDecl {
                name: pname,
                ty: pty,
            });
            if !self.eat_punct(",") {
                break;
            }
        }
        self.expect_punct(")")?;
        if self.eat_punct(";") {
            self.prototypes.insert(name, (ret, formals.len(), loc));
            return Ok(());
        }
        if self.functions.contains_key(&name) {
            return Err(FrontendError::parse(loc, format!("function `{name}` redefined")));
        }
        if name.starts_with("__VERIFIER_atomic") {
            return Err(FrontendError::Unsupported {
                feature: "custom atomic function".into(),
                loc,
            });
        }
        // register the signature first so the body can call itself by name
        self.prototypes
            .insert(name.clone(), (ret.clone(), formals.len(), loc));
        self.scope = Some(FnScope {
            formals: formals.clone(),
            locals: Vec::new(),
            temp_counter: 0,
            loop_depth: 0,
        });
        let body = self.parse_block()?;
        let scope = self.scope.take().unwrap();
        self.functions.insert(
            name.clone(),
            Function {
                name,
                ret,
                formals,
                locals: scope.locals,
                body,
                loc,
            },
        );
        Ok(())
    }

    fn finish(self, file: &str) -> PResult<Program> {
        let main = self
            .functions
            .get("main")
            .ok_or_else(|| FrontendError::parse(Loc::default(), "no `main` function"))?;
        if !main.formals.is_empty() {
            return Err(FrontendError::parse(main.loc, "`main` must take no parameters"));
        }
        for (callee, arity, loc) in &self.calls {
            match self.functions.get(callee) {
                Some(f) if f.formals.len() == *arity => {}
                Some(_) => {
                    return Err(FrontendError::parse(
                        *loc,
                        format!("wrong number of arguments to `{callee}`"),
                    ))
                }
                None => {
                    return Err(FrontendError::parse(
                        *loc,
                        format!("call to undefined function `{callee}`"),
                    ))
                }
            }
        }
        for (f, loc) in &self.func_refs {
            if !self.functions.contains_key(f) {
                return Err(FrontendError::parse(
                    *loc,
                    format!("reference to undefined function `{f}`"),
                ));
            }
        }
        let mut program = Program {
            file: file.to_string(),
            machine: self.machine,
            records: self.record_order,
            globals: self.globals,
            functions: self.functions,
            entry: "main".to_string(),
        };
        number_statements(&mut program);
        Ok(program)
    }

    // ---- statements ----------------------------------------------------

    fn scope(&mut self) -> &mut FnScope {
        self.scope.as_mut().expect("statement outside function")
    }

    fn parse_block(&mut self) -> PResult<Vec<Stmt>> {
        self.expect_punct("{")?;
        let mut out = Vec::new();
        while !self.eat_punct("}") {
            if matches!(self.peek(), Tok::Eof) {
                return Err(self.unexpected("`}`"));
            }
            out.extend(self.parse_stmt()?);
        }
        Ok(out)
    }

    /// A statement used as a branch or loop body.
    fn parse_body(&mut self) -> PResult<Vec<Stmt>> {
        if self.is_punct("{") {
            self.parse_block()
        } else {
            self.parse_stmt()
        }
    }

    fn mk(&self, loc: Loc, kind: StmtKind) -> Stmt {
        Stmt { id: 0, loc, kind }
    }

    fn parse_stmt(&mut self) -> PResult<Vec<Stmt>> {
        let loc = self.loc();
        if self.is_punct("{") {
            return self.parse_block();
        }
        if self.eat_punct(";") {
            return Ok(Vec::new());
        }
        if self.starts_type() {
            return self.parse_local_decl();
        }
        let word = match self.peek() {
            Tok::Ident(w) => Some(w.clone()),
            _ => None,
        };
        match word.as_deref() {
            Some("if") => {
                self.next();
                self.expect_punct("(")?;
                let mut pre = Vec::new();
                let cond = self.parse_expr(&mut pre)?;
                self.expect_punct(")")?;
                let then_branch = self.parse_body()?;
                let else_branch = if self.eat_word("else") {
                    self.parse_body()?
                } else {
                    Vec::new()
                };
                pre.push(self.mk(
                    loc,
                    StmtKind::If {
                        cond,
                        then_branch,
                        else_branch,
                    },
                ));
                Ok(pre)
            }
            Some("while") => {
                self.next();
                self.expect_punct("(")?;
                let cond = self.parse_loop_cond()?;
                self.expect_punct(")")?;
                self.scope().loop_depth += 1;
                let body = self.parse_body()?;
                self.scope().loop_depth -= 1;
                Ok(vec![self.mk(loc, StmtKind::While { cond, body })])
            }
            Some("for") => {
                self.next();
                self.expect_punct("(")?;
                let mut out = if self.eat_punct(";") {
                    Vec::new()
                } else if self.starts_type() {
                    self.parse_local_decl()?
                } else {
                    let s = self.parse_simple_stmt()?;
                    self.expect_punct(";")?;
                    s
                };
                let cond = if self.is_punct(";") {
                    Expr::Int(1)
                } else {
                    self.parse_loop_cond()?
                };
                self.expect_punct(";")?;
                let step = if self.is_punct(")") {
                    Vec::new()
                } else {
                    self.parse_simple_stmt()?
                };
                self.expect_punct(")")?;
                self.scope().loop_depth += 1;
                let mut body = self.parse_body()?;
                self.scope().loop_depth -= 1;
                body.extend(step);
                out.push(self.mk(loc, StmtKind::While { cond, body }));
                Ok(out)
            }
            Some("do") => Err(self.unsupported("do-while loop")),
            Some("goto") => Err(self.unsupported("goto")),
            Some("switch") => Err(self.unsupported("switch")),
            Some("continue") => Err(self.unsupported("continue")),
            Some("break") => {
                self.next();
                self.expect_punct(";")?;
                if self.scope().loop_depth == 0 {
                    return Err(FrontendError::parse(loc, "`break` outside loop"));
                }
                Ok(vec![self.mk(loc, StmtKind::Break)])
            }
            Some("return") => {
                self.next();
                let mut pre = Vec::new();
                let value = if self.is_punct(";") {
                    None
                } else {
                    Some(self.parse_expr(&mut pre)?)
                };
                self.expect_punct(";")?;
                pre.push(self.mk(loc, StmtKind::Return(value)));
                Ok(pre)
            }
            _ => {
                let s = self.parse_simple_stmt()?;
                self.expect_punct(";")?;
                Ok(s)
            }
        }
    }

    fn parse_loop_cond(&mut self) -> PResult<Expr> {
        let loc = self.loc();
        let mut pre = Vec::new();
        let cond = self.parse_expr(&mut pre)?;
        if !pre.is_empty() {
            return Err(FrontendError::Unsupported {
                feature: "call in loop condition".into(),
                loc,
            });
        }
        Ok(cond)
    }

    fn declare_local(&mut self, name: &str, ty: CType, loc: Loc) -> PResult<()> {
        let scope = self.scope();
        if scope.locals.iter().any(|d| d.name == name) || scope.formals.iter().any(|d| d.name == name)
        {
            return Err(FrontendError::parse(loc, format!("`{name}` redeclared")));
        }
        scope.locals.push(VarDecl {
            name: name.to_string(),
            ty,
        });
        Ok(())
    }

    fn parse_local_decl(&mut self) -> PResult<Vec<Stmt>> {
        let base = self.parse_type_spec()?;
        let mut out = Vec::new();
        if self.is_punct(";") {
            self.next();
            return Ok(out);
        }
        loop {
            let loc = self.loc();
            let (name, ty) = self.parse_declarator(base.clone())?;
            if matches!(ty, CType::Void) {
                return Err(FrontendError::parse(loc, "variable of type void"));
            }
            self.declare_local(&name, ty.clone(), loc)?;
            if self.eat_punct("=") {
                if !ty.is_scalar() {
                    return Err(FrontendError::parse(loc, "only scalar locals may be initialized"));
                }
                let lhs = Expr::Var(name, Scope::Local);
                out.extend(self.parse_assignment_rhs(lhs, loc)?);
            }
            if !self.eat_punct(",") {
                break;
            }
        }
        self.expect_punct(";")?;
        Ok(out)
    }

    /// Assignment, compound assignment, increment, or call; no trailing `;`.
    fn parse_simple_stmt(&mut self) -> PResult<Vec<Stmt>> {
        let loc = self.loc();
        if self.eat_punct("++") || self.eat_punct("--") {
            let op = if matches!(self.toks[self.pos - 1].tok, Tok::Punct("++")) {
                BinOp::Add
            } else {
                BinOp::Sub
            };
            let mut pre = Vec::new();
            let lv = self.parse_unary(&mut pre)?;
            self.check_lvalue(&lv, loc)?;
            let rhs = Expr::Binary(op, Box::new(lv.clone()), Box::new(Expr::Int(1)));
            pre.push(self.mk(loc, StmtKind::Assign(lv, rhs)));
            return Ok(pre);
        }
        // plain call statement
        if let (Tok::Ident(name), Tok::Punct("(")) = (self.peek().clone(), self.peek_at(1).clone()) {
            if !self.is_local_or_global(&name) {
                if let Some(f) = unsupported_callee(&name) {
                    return Err(self.unsupported(f));
                }
                self.next();
                let mut pre = Vec::new();
                let args = self.parse_call_args(&mut pre)?;
                pre.extend(self.make_call(&name, args, None, loc)?);
                return Ok(pre);
            }
        }
        let mut pre = Vec::new();
        let lv = self.parse_unary(&mut pre)?;
        self.check_lvalue(&lv, loc)?;
        let compound = match self.peek() {
            Tok::Punct("=") => None,
            Tok::Punct("+=") => Some(BinOp::Add),
            Tok::Punct("-=") => Some(BinOp::Sub),
            Tok::Punct("*=") => Some(BinOp::Mul),
            Tok::Punct("/=") => Some(BinOp::Div),
            Tok::Punct("%=") => Some(BinOp::Rem),
            Tok::Punct("++") => {
                self.next();
                let rhs = Expr::Binary(BinOp::Add, Box::new(lv.clone()), Box::new(Expr::Int(1)));
                pre.push(self.mk(loc, StmtKind::Assign(lv, rhs)));
                return Ok(pre);
            }
            Tok::Punct("--") => {
                self.next();
                let rhs = Expr::Binary(BinOp::Sub, Box::new(lv.clone()), Box::new(Expr::Int(1)));
                pre.push(self.mk(loc, StmtKind::Assign(lv, rhs)));
                return Ok(pre);
            }
            _ => return Err(self.unexpected("assignment")),
        };
        self.next();
        match compound {
            None => pre.extend(self.parse_assignment_rhs(lv, loc)?),
            Some(op) => {
                let rhs = self.parse_expr(&mut pre)?;
                let rhs = Expr::Binary(op, Box::new(lv.clone()), Box::new(rhs));
                pre.push(self.mk(loc, StmtKind::Assign(lv, rhs)));
            }
        }
        Ok(pre)
    }

    fn parse_assignment_rhs(&mut self, lhs: Expr, loc: Loc) -> PResult<Vec<Stmt>> {
        // `lhs = (T) call(...)` and `lhs = call(...)` bind the result directly
        let save = self.pos;
        while self.is_punct("(") && self.peek_is_type_at(1) {
            self.next();
            self.parse_type_name()?;
            self.expect_punct(")")?;
        }
        if let (Tok::Ident(name), Tok::Punct("(")) = (self.peek().clone(), self.peek_at(1).clone()) {
            if !self.is_local_or_global(&name) {
                if let Some(f) = unsupported_callee(&name) {
                    return Err(self.unsupported(f));
                }
                let snapshot = self.snapshot();
                self.next();
                let mut pre = Vec::new();
                let args = self.parse_call_args(&mut pre)?;
                if self.is_punct(";") || self.is_punct(",") || self.is_punct(")") {
                    pre.extend(self.make_call(&name, args, Some(lhs), loc)?);
                    return Ok(pre);
                }
                // the call is only part of a larger expression
                self.restore(snapshot);
            }
        }
        self.pos = save;
        let mut pre = Vec::new();
        let rhs = self.parse_expr(&mut pre)?;
        pre.push(self.mk(loc, StmtKind::Assign(lhs, rhs)));
        Ok(pre)
    }

    fn snapshot(&self) -> (usize, usize, u32, usize) {
        let s = self.scope.as_ref().expect("statement outside function");
        (self.pos, s.locals.len(), s.temp_counter, self.calls.len())
    }

    fn restore(&mut self, (pos, locals, temps, calls): (usize, usize, u32, usize)) {
        self.pos = pos;
        self.calls.truncate(calls);
        let s = self.scope();
        s.locals.truncate(locals);
        s.temp_counter = temps;
    }

    fn peek_is_type_at(&self, n: usize) -> bool {
        matches!(self.peek_at(n), Tok::Ident(w) if TYPE_WORDS.contains(&w.as_str()))
    }

    fn check_lvalue(&self, e: &Expr, loc: Loc) -> PResult<()> {
        if e.is_lvalue() {
            Ok(())
        } else {
            Err(FrontendError::parse(loc, "expression is not assignable"))
        }
    }

    fn is_local_or_global(&self, name: &str) -> bool {
        if let Some(s) = &self.scope {
            if s.locals.iter().any(|d| d.name == name) || s.formals.iter().any(|d| d.name == name) {
                return true;
            }
        }
        self.globals.iter().any(|g| g.name == name)
    }

    fn parse_call_args(&mut self, pre: &mut Vec<Stmt>) -> PResult<Vec<Expr>> {
        self.expect_punct("(")?;
        let mut args = Vec::new();
        while !self.is_punct(")") {
            args.push(self.parse_expr(pre)?);
            if !self.eat_punct(",") {
                break;
            }
        }
        self.expect_punct(")")?;
        Ok(args)
    }

    fn fresh_temp(&mut self, ty: CType, loc: Loc) -> PResult<Expr> {
        let n = {
            let s = self.scope();
            s.temp_counter += 1;
            s.temp_counter
        };
        let name = format!("__tmp{n}");
        self.declare_local(&name, ty, loc)?;
        Ok(Expr::Var(name, Scope::Local))
    }

    /// Lower a call by name into statements; pthread and allocation
    /// intrinsics become dedicated statement kinds.
    fn make_call(
        &mut self,
        name: &str,
        args: Vec<Expr>,
        result: Option<Expr>,
        loc: Loc,
    ) -> PResult<Vec<Stmt>> {
        let arity = |n: usize| -> PResult<()> {
            if args.len() == n {
                Ok(())
            } else {
                Err(FrontendError::parse(
                    loc,
                    format!("`{name}` expects {n} argument(s)"),
                ))
            }
        };
        let unsupported = |feature: &str| FrontendError::Unsupported {
            feature: feature.to_string(),
            loc,
        };
        let mut out = Vec::new();
        let mut zero_result = true;
        let kind = match name {
            "pthread_create" => {
                arity(4)?;
                let mut it = args.into_iter();
                let handle_ptr = it.next().unwrap();
                let attr = it.next().unwrap();
                let entry = it.next().unwrap();
                let arg = it.next().unwrap();
                if attr != Expr::Int(0) {
                    return Err(unsupported("thread attributes"));
                }
                let handle = match handle_ptr {
                    Expr::AddrOf(lv) => *lv,
                    other => Expr::Deref(Box::new(other)),
                };
                StmtKind::Create { handle, entry, arg }
            }
            "pthread_join" => {
                arity(2)?;
                if args[1] != Expr::Int(0) {
                    return Err(unsupported("thread return values"));
                }
                StmtKind::Join(args.into_iter().next().unwrap())
            }
            "pthread_mutex_lock" => {
                arity(1)?;
                StmtKind::Lock(args.into_iter().next().unwrap())
            }
            "pthread_mutex_unlock" => {
                arity(1)?;
                StmtKind::Unlock(args.into_iter().next().unwrap())
            }
            "pthread_mutex_trylock" => {
                arity(1)?;
                zero_result = false;
                let result = match result.clone() {
                    Some(r) => r,
                    None => self.fresh_temp(CType::Int, loc)?,
                };
                StmtKind::TryLock {
                    lock: args.into_iter().next().unwrap(),
                    result,
                }
            }
            "pthread_rwlock_rdlock" => {
                arity(1)?;
                StmtKind::RdLock(args.into_iter().next().unwrap())
            }
            "pthread_rwlock_wrlock" => {
                arity(1)?;
                StmtKind::WrLock(args.into_iter().next().unwrap())
            }
            "pthread_rwlock_unlock" => {
                arity(1)?;
                StmtKind::RwUnlock(args.into_iter().next().unwrap())
            }
            "malloc" => {
                arity(1)?;
                zero_result = false;
                let result = match result.clone() {
                    Some(r) => r,
                    None => self.fresh_temp(CType::Ptr(Box::new(CType::Void)), loc)?,
                };
                StmtKind::Alloc {
                    result,
                    size: args.into_iter().next().unwrap(),
                }
            }
            "pthread_mutex_init" | "pthread_mutex_destroy" | "pthread_rwlock_init"
            | "pthread_rwlock_destroy" | "free" | "assert_nonracing" => {
                StmtKind::Marker(name.to_string(), args)
            }
            n if unsupported_callee(n).is_some() => {
                return Err(unsupported(unsupported_callee(n).unwrap()))
            }
            _ => {
                self.calls.push((name.to_string(), args.len(), loc));
                zero_result = false;
                StmtKind::Call {
                    func: name.to_string(),
                    args,
                    result: result.clone(),
                }
            }
        };
        out.push(self.mk(loc, kind));
        if zero_result {
            if let Some(r) = result {
                out.push(self.mk(loc, StmtKind::Assign(r, Expr::Int(0))));
            }
        }
        Ok(out)
    }

    // ---- expressions ---------------------------------------------------

    fn parse_expr_nohoist(&mut self) -> PResult<Expr> {
        let loc = self.loc();
        let mut pre = Vec::new();
        let e = self.parse_expr(&mut pre)?;
        if !pre.is_empty() {
            return Err(FrontendError::parse(loc, "call not allowed here"));
        }
        Ok(e)
    }

    fn parse_expr(&mut self, pre: &mut Vec<Stmt>) -> PResult<Expr> {
        self.parse_or(pre)
    }

    fn parse_or(&mut self, pre: &mut Vec<Stmt>) -> PResult<Expr> {
        let mut lhs = self.parse_and(pre)?;
        while self.is_punct("||") {
            let loc = self.loc();
            self.next();
            let before = pre.len();
            let rhs = self.parse_and(pre)?;
            if pre.len() != before {
                return Err(FrontendError::Unsupported {
                    feature: "call under short-circuit operator".into(),
                    loc,
                });
            }
            lhs = Expr::Binary(BinOp::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_and(&mut self, pre: &mut Vec<Stmt>) -> PResult<Expr> {
        let mut lhs = self.parse_binary_level(pre, 0)?;
        while self.is_punct("&&") {
            let loc = self.loc();
            self.next();
            let before = pre.len();
            let rhs = self.parse_binary_level(pre, 0)?;
            if pre.len() != before {
                return Err(FrontendError::Unsupported {
                    feature: "call under short-circuit operator".into(),
                    loc,
                });
            }
            lhs = Expr::Binary(BinOp::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_binary_level(&mut self, pre: &mut Vec<Stmt>, level: usize) -> PResult<Expr> {
        const LEVELS: &[&[(&str, BinOp)]] = &[
            &[("==", BinOp::Eq), ("!=", BinOp::Ne)],
            &[
                ("<=", BinOp::Le),
                (">=", BinOp::Ge),
                ("<", BinOp::Lt),
                (">", BinOp::Gt),
            ],
            &[("+", BinOp::Add), ("-", BinOp::Sub)],
            &[("*", BinOp::Mul), ("/", BinOp::Div), ("%", BinOp::Rem)],
        ];
        if level == LEVELS.len() {
            return self.parse_unary(pre);
        }
        let mut lhs = self.parse_binary_level(pre, level + 1)?;
        loop {
            let op = LEVELS[level]
                .iter()
                .find(|(p, _)| self.is_punct(p))
                .map(|(_, op)| *op);
            match op {
                Some(op) => {
                    self.next();
                    let rhs = self.parse_binary_level(pre, level + 1)?;
                    lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
                }
                None => return Ok(lhs),
            }
        }
    }

    fn parse_unary(&mut self, pre: &mut Vec<Stmt>) -> PResult<Expr> {
        let loc = self.loc();
        match self.peek() {
            Tok::Punct("-") => {
                self.next();
                let e = self.parse_unary(pre)?;
                Ok(match e {
                    Expr::Int(v) => Expr::Int(-v),
                    e => Expr::Unary(UnOp::Neg, Box::new(e)),
                })
            }
            Tok::Punct("+") => {
                self.next();
                self.parse_unary(pre)
            }
            Tok::Punct("!") => {
                self.next();
                let e = self.parse_unary(pre)?;
                Ok(Expr::Unary(UnOp::Not, Box::new(e)))
            }
            Tok::Punct("*") => {
                self.next();
                let e = self.parse_unary(pre)?;
                Ok(Expr::Deref(Box::new(e)))
            }
            Tok::Punct("&") => {
                self.next();
                let e = self.parse_unary(pre)?;
                match e {
                    Expr::Func(_) => Ok(e),
                    e if e.is_lvalue() => Ok(Expr::AddrOf(Box::new(e))),
                    _ => Err(FrontendError::parse(loc, "cannot take the address of an rvalue")),
                }
            }
            Tok::Punct("~") | Tok::Punct("++") | Tok::Punct("--") => {
                Err(FrontendError::parse(loc, "operator not supported in expressions"))
            }
            Tok::Punct("(") if self.peek_is_type_at(1) => {
                self.next();
                let ty = self.parse_type_name()?;
                self.expect_punct(")")?;
                let e = self.parse_unary(pre)?;
                Ok(Expr::Cast(ty, Box::new(e)))
            }
            Tok::Ident(w) if w == "sizeof" => {
                self.next();
                self.expect_punct("(")?;
                let e = if self.starts_type() {
                    Expr::SizeOf(self.parse_type_name()?)
                } else {
                    return Err(FrontendError::parse(loc, "sizeof requires a type name"));
                };
                self.expect_punct(")")?;
                Ok(e)
            }
            _ => self.parse_postfix(pre),
        }
    }

    fn parse_postfix(&mut self, pre: &mut Vec<Stmt>) -> PResult<Expr> {
        let mut e = self.parse_primary(pre)?;
        loop {
            if self.eat_punct("[") {
                let idx = self.parse_expr(pre)?;
                self.expect_punct("]")?;
                e = Expr::Index(Box::new(e), Box::new(idx));
            } else if self.eat_punct(".") {
                let f = self.expect_ident()?;
                e = Expr::Field(Box::new(e), f);
            } else if self.eat_punct("->") {
                let f = self.expect_ident()?;
                e = Expr::Field(Box::new(Expr::Deref(Box::new(e))), f);
            } else {
                return Ok(e);
            }
        }
    }

    fn parse_primary(&mut self, pre: &mut Vec<Stmt>) -> PResult<Expr> {
        let loc = self.loc();
        match self.peek().clone() {
            Tok::Int(v) => {
                self.next();
                Ok(Expr::Int(v))
            }
            Tok::Punct("(") => {
                self.next();
                let e = self.parse_expr(pre)?;
                self.expect_punct(")")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.next();
                if name == "NULL" {
                    return Ok(Expr::Int(0));
                }
                if self.is_punct("(") && !self.is_local_or_global(&name) {
                    if let Some(f) = unsupported_callee(&name) {
                        return Err(FrontendError::Unsupported {
                            feature: f.to_string(),
                            loc,
                        });
                    }
                    // call inside an expression: hoist into a temporary
                    if self.scope.is_none() {
                        return Err(FrontendError::parse(loc, "call not allowed here"));
                    }
                    let args = self.parse_call_args(pre)?;
                    let ret_ty = match name.as_str() {
                        "pthread_mutex_trylock" => CType::Int,
                        "malloc" => CType::Ptr(Box::new(CType::Void)),
                        _ => match self.prototypes.get(&name) {
                            Some((ret, _, _)) => ret.clone(),
                            None if self.functions.contains_key(&name) => {
                                self.functions[&name].ret.clone()
                            }
                            None => CType::Int,
                        },
                    };
                    if matches!(ret_ty, CType::Void) {
                        return Err(FrontendError::parse(loc, format!("`{name}` returns void")));
                    }
                    let tmp = self.fresh_temp(ret_ty, loc)?;
                    let stmts = self.make_call(&name, args, Some(tmp.clone()), loc)?;
                    pre.extend(stmts);
                    return Ok(tmp);
                }
                self.resolve_name(&name, loc)
            }
            _ => Err(self.unexpected("expression")),
        }
    }

    fn resolve_name(&mut self, name: &str, loc: Loc) -> PResult<Expr> {
        if let Some(s) = &self.scope {
            if s.locals.iter().any(|d| d.name == name) {
                return Ok(Expr::Var(name.to_string(), Scope::Local));
            }
            if s.formals.iter().any(|d| d.name == name) {
                return Ok(Expr::Var(name.to_string(), Scope::Formal));
            }
        }
        if self.globals.iter().any(|g| g.name == name) {
            return Ok(Expr::Var(name.to_string(), Scope::Global));
        }
        if self.functions.contains_key(name) || self.prototypes.contains_key(name) {
            self.func_refs.push((name.to_string(), loc));
            return Ok(Expr::Func(name.to_string()));
        }
        if name.starts_with("__VERIFIER_atomic") {
            return Err(FrontendError::Unsupported {
                feature: "custom atomic function".into(),
                loc,
            });
        }
        Err(FrontendError::parse(loc, format!("undeclared identifier `{name}`")))
    }
}

/// Feature name for library calls outside the supported subset.
fn unsupported_callee(name: &str) -> Option<&str> {
    Some(match name {
        n if n.starts_with("sem_") => "semaphore",
        n if n.starts_with("pthread_cond_") => "condition variable",
        n if n.starts_with("__VERIFIER_atomic")
            || n.starts_with("atomic_")
            || n.starts_with("__atomic")
            || n.starts_with("__sync") =>
        {
            "custom atomic function"
        }
        n if n.starts_with("__VERIFIER_nondet") => "nondeterministic input",
        "pthread_exit" => "pthread_exit",
        "exit" | "abort" => "process termination",
        n if n.starts_with("pthread_") && !KNOWN_PTHREAD.contains(&n) => n,
        _ => return None,
    })
}

const KNOWN_PTHREAD: &[&str] = &[
    "pthread_create",
    "pthread_join",
    "pthread_mutex_lock",
    "pthread_mutex_unlock",
    "pthread_mutex_trylock",
    "pthread_mutex_init",
    "pthread_mutex_destroy",
    "pthread_rwlock_rdlock",
    "pthread_rwlock_wrlock",
    "pthread_rwlock_unlock",
    "pthread_rwlock_init",
    "pthread_rwlock_destroy",
];

fn atomic_of(ty: CType, loc: Loc) -> PResult<CType> {
    match ty {
        CType::Int | CType::AtomicInt => Ok(CType::AtomicInt),
        _ => Err(FrontendError::Unsupported {
            feature: "atomic non-int type".into(),
            loc,
        }),
    }
}

/// Compile-time integer constant, if `e` is one.
pub fn const_eval(e: &Expr, mm: MachineModel) -> Option<i64> {
    Some(match e {
        Expr::Int(v) => *v,
        Expr::SizeOf(t) => t.size(mm) as i64,
        Expr::Cast(_, e) => const_eval(e, mm)?,
        Expr::Unary(UnOp::Neg, e) => const_eval(e, mm)?.checked_neg()?,
        Expr::Unary(UnOp::Not, e) => (const_eval(e, mm)? == 0) as i64,
        Expr::Binary(op, a, b) => {
            let (a, b) = (const_eval(a, mm)?, const_eval(b, mm)?);
            match op {
                BinOp::Add => a.checked_add(b)?,
                BinOp::Sub => a.checked_sub(b)?,
                BinOp::Mul => a.checked_mul(b)?,
                BinOp::Div => a.checked_div(b)?,
                BinOp::Rem => a.checked_rem(b)?,
                BinOp::Lt => (a < b) as i64,
                BinOp::Le => (a <= b) as i64,
                BinOp::Gt => (a > b) as i64,
                BinOp::Ge => (a >= b) as i64,
                BinOp::Eq => (a == b) as i64,
                BinOp::Ne => (a != b) as i64,
                BinOp::And => (a != 0 && b != 0) as i64,
                BinOp::Or => (a != 0 || b != 0) as i64,
            }
        }
        _ => return None,
    })
}

/// Assign program-wide statement ids in source order.
fn number_statements(p: &mut Program) {
    fn walk(stmts: &mut [Stmt], next: &mut StmtId) {
        for s in stmts {
            s.id = *next;
            *next += 1;
            match &mut s.kind {
                StmtKind::If {
                    then_branch,
                    else_branch,
                    ..
                } => {
                    walk(then_branch, next);
                    walk(else_branch, next);
                }
                StmtKind::While { body, .. } => walk(body, next),
                _ => {}
            }
        }
    }
    let mut next = 1;
    for f in p.functions.values_mut() {
        walk(&mut f.body, &mut next);
    }
}
