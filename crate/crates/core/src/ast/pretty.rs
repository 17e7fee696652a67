use super::*;

/// Concrete syntax. Source expressions re-parse to themselves; runtime values use
/// a display notation (`bitv_S(1)`, `flipv^r(@0(1 0))`, `loc(3)`, `•`).
pub fn pretty<P: Payload>(e: &Expr<P>) -> String {
    let mut s = String::new();
    pp(e, 0, &mut s);
    s
}

pub fn pretty_type(t: &Type) -> String {
    let mut s = String::new();
    pt(t, 0, &mut s);
    s
}

fn region_suffix(r: &Region) -> String {
    match r {
        Region::Bot => String::new(),
        Region::Named(n) => format!("^{n}"),
    }
}

fn region_name(r: &Region) -> String {
    match r {
        Region::Bot => "bot".into(),
        Region::Named(n) => n.to_string(),
    }
}

fn pt(t: &Type, level: u8, s: &mut String) {
    match t {
        Type::Bit(l, r) => s.push_str(&format!("bit{l}{}", region_suffix(r))),
        Type::Nat(l, r) => s.push_str(&format!("nat{l}{}", region_suffix(r))),
        Type::Flip(r) => s.push_str(&format!("flip^{}", region_name(r))),
        Type::Rnd(r) => s.push_str(&format!("rnd^{}", region_name(r))),
        Type::Unit => s.push_str("unit"),
        Type::Spent => s.push_str("spent"),
        _ => {}
    }
    match t {
        Type::Ref(inner) => wrap1("ref", inner, s),
        Type::Array(inner) => wrap1("array", inner, s),
        Type::NonUni(inner) => wrap1("nu", inner, s),
        Type::Record(fs) => {
            s.push('{');
            for (i, (n, ft)) in fs.iter().enumerate() {
                if i > 0 {
                    s.push_str(", ");
                }
                s.push_str(n);
                s.push_str(": ");
                pt(ft, 0, s);
            }
            s.push('}');
        }
        Type::Prod(a, b) => {
            if level > 1 {
                s.push('(');
            }
            pt(a, 2, s);
            s.push_str(" * ");
            pt(b, 1, s);
            if level > 1 {
                s.push(')');
            }
        }
        Type::Arrow(a, b) => {
            if level > 0 {
                s.push('(');
            }
            pt(a, 1, s);
            s.push_str(" -> ");
            pt(b, 0, s);
            if level > 0 {
                s.push(')');
            }
        }
        Type::Poly(sc) => {
            if level > 0 {
                s.push('(');
            }
            s.push_str("forall[");
            s.push_str(&sc.rparams.join(", "));
            if !sc.constraints.is_empty() {
                s.push_str(" | ");
                let cs: Vec<String> = sc.constraints.iter().map(|(a, b)| format!("{a} < {b}")).collect();
                s.push_str(&cs.join(", "));
            }
            s.push_str("]. ");
            pt(&Type::arrow(sc.arg.clone(), sc.ret.clone()), 0, s);
            if level > 0 {
                s.push(')');
            }
        }
        _ => {}
    }
}

fn wrap1(head: &str, inner: &Type, s: &mut String) {
    s.push_str(head);
    s.push('(');
    pt(inner, 0, s);
    s.push(')');
}

const ATOM: u8 = 8;

fn prim_level(op: PrimOp) -> u8 {
    match op {
        PrimOp::Or => 2,
        PrimOp::And => 3,
        PrimOp::Eq | PrimOp::Ne | PrimOp::Lt | PrimOp::Le | PrimOp::Gt | PrimOp::Ge => 4,
        PrimOp::Add | PrimOp::Sub => 5,
        PrimOp::BitAnd | PrimOp::Div(_) | PrimOp::Mod(_) => 6,
        PrimOp::Not => 7,
    }
}

fn prim_sym(op: PrimOp) -> &'static str {
    match op {
        PrimOp::Or => "||",
        PrimOp::And => "&&",
        PrimOp::Eq => "==",
        PrimOp::Ne => "!=",
        PrimOp::Lt => "<",
        PrimOp::Le => "<=",
        PrimOp::Gt => ">",
        PrimOp::Ge => ">=",
        PrimOp::Add => "+",
        PrimOp::Sub => "-",
        PrimOp::BitAnd => "&",
        PrimOp::Div(_) => "/",
        PrimOp::Mod(_) => "%",
        PrimOp::Not => "!",
    }
}

fn payloads<P: Payload>(ps: &[P]) -> String {
    match nat_value(ps) {
        Some(n) => format!("({n})"),
        None => {
            let parts: Vec<String> = ps.iter().map(|p| p.render()).collect();
            format!("[{}]", parts.join(", "))
        }
    }
}

fn comma<P: Payload>(items: &[&Expr<P>], s: &mut String) {
    for (i, e) in items.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        pp(e, 0, s);
    }
}

fn flatten_tuple<P: Payload>(e: &Expr<P>) -> Vec<&Expr<P>> {
    let mut out = Vec::new();
    let mut cur = e;
    while let ExprKind::Tuple(a, b) = cur.kind() {
        out.push(a);
        cur = b;
    }
    out.push(cur);
    out
}

fn pp<P: Payload>(e: &Expr<P>, level: u8, s: &mut String) {
    use ExprKind::*;
    let open = |lvl: u8, s: &mut String| {
        if level > lvl {
            s.push('(');
        }
    };
    let close = |lvl: u8, s: &mut String| {
        if level > lvl {
            s.push(')');
        }
    };
    match e.kind() {
        Var(x) => s.push_str(x),
        Unit => s.push_str("()"),
        Bit(b, l) => s.push_str(&format!("{}{l}", *b as u8)),
        Nat(n, l) => {
            if *n == u64::MAX {
                s.push_str(&format!("-1n{l}"))
            } else {
                s.push_str(&format!("{n}n{l}"))
            }
        }
        Flip(r) => s.push_str(&format!("flip^{}()", region_name(r))),
        Rnd(r) => s.push_str(&format!("rnd^{}()", region_name(r))),
        Cast(op, x) => {
            s.push_str(match op {
                CastOp::S => "castS(",
                CastOp::P => "castP(",
                CastOp::NU => "castNU(",
                CastOp::U => "castU(",
            });
            pp(x, 0, s);
            s.push(')');
        }
        Mux(a, b, c) => {
            s.push_str("mux(");
            comma(&[a, b, c], s);
            s.push(')');
        }
        Xor(a, b) => {
            s.push_str("xor(");
            comma(&[a, b], s);
            s.push(')');
        }
        Write(a, b) => {
            s.push_str("write(");
            comma(&[a, b], s);
            s.push(')');
        }
        Ref(a) | Read(a) | Len(a) => {
            s.push_str(match e.kind() {
                Ref(_) => "ref(",
                Read(_) => "read(",
                _ => "len(",
            });
            pp(a, 0, s);
            s.push(')');
        }
        Tuple(..) => {
            s.push('(');
            comma(&flatten_tuple(e), s);
            s.push(')');
        }
        Record(fs) => {
            s.push('{');
            for (i, (n, x)) in fs.iter().enumerate() {
                if i > 0 {
                    s.push_str(", ");
                }
                s.push_str(n);
                s.push_str(" = ");
                pp(x, 0, s);
            }
            s.push('}');
        }
        Array(es) => {
            s.push('[');
            comma(&es.iter().collect::<Vec<_>>(), s);
            s.push(']');
        }
        App(f, a) => {
            pp(f, ATOM, s);
            s.push('(');
            match a.kind() {
                Unit => {}
                Tuple(..) => comma(&flatten_tuple(a), s),
                _ => pp(a, 0, s),
            }
            s.push(')');
        }
        Index(a, i) => {
            pp(a, ATOM, s);
            s.push('[');
            pp(i, 0, s);
            s.push(']');
        }
        Field(a, f) => {
            pp(a, ATOM, s);
            s.push('.');
            s.push_str(f);
        }
        Inst(a, rs) => {
            pp(a, ATOM, s);
            let names: Vec<String> = rs.iter().map(region_name).collect();
            s.push_str(&format!("::[{}]", names.join(", ")));
        }
        Prim(op, args) => {
            let lvl = prim_level(*op);
            open(lvl, s);
            match (op, args.as_slice()) {
                (PrimOp::Not, [x]) => {
                    s.push('!');
                    pp(x, lvl, s);
                }
                (PrimOp::Div(k) | PrimOp::Mod(k), [x]) => {
                    pp(x, lvl, s);
                    s.push_str(&format!(" {} {k}", prim_sym(*op)));
                }
                (_, [x, y]) => {
                    let cmp = lvl == 4;
                    pp(x, if cmp { lvl + 1 } else { lvl }, s);
                    s.push_str(&format!(" {} ", prim_sym(*op)));
                    pp(y, lvl + 1, s);
                }
                _ => s.push_str("<bad prim>"),
            }
            close(lvl, s);
        }
        Assign(a, i, v) => {
            open(1, s);
            pp(a, ATOM, s);
            s.push('[');
            pp(i, 0, s);
            s.push_str("] <- ");
            pp(v, 2, s);
            close(1, s);
        }
        Let(x, a, b) => {
            open(0, s);
            s.push_str(&format!("let {x} = "));
            pp(a, 0, s);
            s.push_str(" in ");
            pp(b, 0, s);
            close(0, s);
        }
        LetTup(x, y, a, b) => {
            open(0, s);
            s.push_str(&format!("let ({x}, {y}) = "));
            pp(a, 0, s);
            s.push_str(" in ");
            pp(b, 0, s);
            close(0, s);
        }
        If(c, a, b) => {
            open(0, s);
            s.push_str("if ");
            pp(c, 0, s);
            s.push_str(" then ");
            pp(a, 0, s);
            s.push_str(" else ");
            pp(b, 0, s);
            close(0, s);
        }
        Fun(d) => {
            open(0, s);
            s.push_str("fun ");
            s.push_str(&d.name);
            if !d.rparams.is_empty() {
                s.push('[');
                s.push_str(&d.rparams.join(", "));
                if !d.constraints.is_empty() {
                    let cs: Vec<String> = d.constraints.iter().map(|(a, b)| format!("{a} < {b}")).collect();
                    s.push_str(" | ");
                    s.push_str(&cs.join(", "));
                }
                s.push(']');
            }
            s.push_str(&format!("({} : ", d.param));
            pt(&d.pty, 0, s);
            s.push(')');
            if let Some(r) = &d.ret {
                s.push_str(" : ");
                pt(r, 0, s);
            }
            s.push_str(" . ");
            pp(&d.body, 0, s);
            close(0, s);
        }
        BitV(p, l, r) => s.push_str(&format!("bitv_{l}{}({})", region_suffix(r), p.render())),
        FlipV(p, r, u) => {
            let nu = if *u { "" } else { "_nu" };
            s.push_str(&format!("flipv{nu}{}({})", region_suffix(r), p.render()))
        }
        NatV(ps, l, r) => s.push_str(&format!("natv_{l}{}{}", region_suffix(r), payloads(ps))),
        RndV(ps, r, u) => {
            let nu = if *u { "" } else { "_nu" };
            s.push_str(&format!("rndv{nu}{}{}", region_suffix(r), payloads(ps)))
        }
        LocV(i) => s.push_str(&format!("loc({i})")),
        ArrV(ls) => {
            let parts: Vec<String> = ls.iter().map(|l| l.to_string()).collect();
            s.push_str(&format!("arr[{}]", parts.join(", ")));
        }
        Hidden => s.push('•'),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(src: &str) {
        let (_, e) = parse(src).unwrap();
        let printed = pretty(&e);
        let (_, e2) = parse(&printed).unwrap_or_else(|err| panic!("{printed}: {err}"));
        assert_eq!(e, e2, "{printed}");
    }

    #[test]
    fn round_trips() {
        roundtrip("let x = flip^r() in (castP(x), castS(x))");
        roundtrip("let (a, b) = mux(1S, 0S, 1S) in if castP(a) then b else 0S");
        roundtrip("fun f[R, R2 | R < R2](x : natS^R, y : rnd^R2) : natS^R . x + 1nS");
        roundtrip("let a = [1nP, 2nP] in a[0nP] <- 3nP; len(a)");
        roundtrip("{tag = 1nS, data = ()}.tag / 2 == 0nS && !(1S || 0S)");
        roundtrip("f::[r1, bot](x, (y, z), ())");
        roundtrip("let r = ref(1S) in write(r, read(r))");
        roundtrip("(let x = 1P in x, 2nP - -1nP)");
    }

    #[test]
    fn types_print() {
        let t = parse_type("(bitS^r * flip^r) -> ref(natP) * {a: unit}").unwrap();
        assert_eq!(pretty_type(&t), "bitS^r * flip^r -> ref(natP) * {a: unit}");
        let t2 = parse_type(&pretty_type(&t)).unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn runtime_values_print() {
        let e: SExpr = Expr::tuple(Expr::bitv(true, Label::P, Region::Bot), Expr::hidden());
        assert_eq!(pretty(&e), "(bitv_P(1), •)");
    }
}
