//! Model specification: term list, formula grammar and JSON form.
//!
//! Formula grammar:
//!
//! ```text
//! formula := name '~' term ('+' term)*
//! term    := '0' | '1' | name
//!          | 'fixed' '(' names ')'
//!          | 're' '(' name ')'
//!          | 'kernel' '(' names [';' option (',' option)*] ')'
//! option  := key '=' value
//! ```
//!
//! Kernel options: `sketch` (none, subsample, gaussian), `delta`, `size`,
//! `seed`, `bandwidth`, `standardize` (none, scale, mahalanobis). A bare name
//! is shorthand for `fixed(name)`. `0` removes the intercept. Names may be
//! quoted with backticks.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, StandardizeKind};
use crate::error::{GkrlsError, Result};
use crate::kernel::SketchMethod;

/// Per-term sketch settings; unset fields fall back to the fit defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SketchOptions {
    pub method: Option<SketchMethod>,
    pub delta: Option<f64>,
    pub size: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelTerm {
    pub vars: Vec<String>,
    #[serde(default)]
    pub sketch: SketchOptions,
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default)]
    pub standardize: Option<StandardizeKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TermSpec {
    Fixed { vars: Vec<String> },
    #[serde(alias = "re")]
    RandomIntercept { group: String },
    Kernel(KernelTerm),
}

impl TermSpec {
    pub fn is_penalized(&self) -> bool {
        !matches!(self, TermSpec::Fixed { .. })
    }

    pub fn label(&self) -> String {
        match self {
            TermSpec::Fixed { vars } => format!("fixed({})", vars.join(",")),
            TermSpec::RandomIntercept { group } => format!("re({group})"),
            TermSpec::Kernel(k) => format!("kernel({})", k.vars.join(",")),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub outcome: String,
    #[serde(default = "default_true")]
    pub intercept: bool,
    pub terms: Vec<TermSpec>,
}

impl ModelSpec {
    pub fn n_penalized(&self) -> usize {
        self.terms.iter().filter(|t| t.is_penalized()).count()
    }

    pub fn with_outcome(&self, outcome: &str) -> ModelSpec {
        ModelSpec {
            outcome: outcome.to_string(),
            ..self.clone()
        }
    }

    /// Formula text that parses back to this spec.
    pub fn to_formula(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        if !self.intercept {
            parts.push("0".into());
        }
        for t in &self.terms {
            parts.push(match t {
                TermSpec::Fixed { vars } => format!("fixed({})", quote_all(vars)),
                TermSpec::RandomIntercept { group } => format!("re({})", quote(group)),
                TermSpec::Kernel(k) => {
                    let mut opts = Vec::new();
                    if let Some(m) = k.sketch.method {
                        opts.push(format!("sketch={m}"));
                    }
                    if let Some(d) = k.sketch.delta {
                        opts.push(format!("delta={d}"));
                    }
                    if let Some(s) = k.sketch.size {
                        opts.push(format!("size={s}"));
                    }
                    if let Some(s) = k.sketch.seed {
                        opts.push(format!("seed={s}"));
                    }
                    if let Some(b) = k.bandwidth {
                        opts.push(format!("bandwidth={b}"));
                    }
                    if let Some(s) = k.standardize {
                        let name = match s {
                            StandardizeKind::None => "none",
                            StandardizeKind::Scale => "scale",
                            StandardizeKind::Mahalanobis => "mahalanobis",
                        };
                        opts.push(format!("standardize={name}"));
                    }
                    if opts.is_empty() {
                        format!("kernel({})", quote_all(&k.vars))
                    } else {
                        format!("kernel({}; {})", quote_all(&k.vars), opts.join(", "))
                    }
                }
            });
        }
        if parts.is_empty() {
            parts.push("1".into());
        }
        format!("{} ~ {}", quote(&self.outcome), parts.join(" + "))
    }

    /// Check every referenced column against a data set.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.terms.is_empty() && !self.intercept {
            return Err(GkrlsError::Spec("model has no terms".into()));
        }
        let known = |v: &str| data.column_index(v).is_some() || data.expansion(v).is_some();
        for t in &self.terms {
            match t {
                TermSpec::Fixed { vars } => {
                    for v in vars {
                        if !known(v) {
                            return Err(GkrlsError::Spec(format!("unknown column '{v}'")));
                        }
                    }
                }
                TermSpec::Kernel(k) => {
                    if k.vars.is_empty() {
                        return Err(GkrlsError::Spec("empty kernel term".into()));
                    }
                    for v in &k.vars {
                        if !known(v) {
                            return Err(GkrlsError::Spec(format!("unknown column '{v}'")));
                        }
                    }
                    if let Some(b) = k.bandwidth {
                        if !(b > 0.0 && b.is_finite()) {
                            return Err(GkrlsError::Spec(format!("bandwidth {b} must be positive")));
                        }
                    }
                }
                TermSpec::RandomIntercept { group } => {
                    let f = data.factor(group).ok_or_else(|| {
                        GkrlsError::Spec(format!("random intercept '{group}' is not a categorical column"))
                    })?;
                    if f.n_levels() < 2 {
                        return Err(GkrlsError::Spec(format!("group column '{group}' has one level")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn quote(name: &str) -> String {
    if !name.is_empty() && name.chars().all(is_ident_char) && !name.starts_with(|c: char| c.is_ascii_digit()) {
        name.to_string()
    } else {
        format!("`{name}`")
    }
}

fn quote_all(names: &[String]) -> String {
    names.iter().map(|n| quote(n)).collect::<Vec<_>>().join(", ")
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '.' | '[' | ']')
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Tilde,
    Plus,
    LParen,
    RParen,
    Comma,
    Semi,
    Eq,
    End,
}

struct Lexer {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Lexer {
    fn new(text: &str) -> Result<Self> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut toks = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let (p, c) = chars[i];
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            let single = match c {
                '~' => Some(Tok::Tilde),
                '+' => Some(Tok::Plus),
                '(' => Some(Tok::LParen),
                ')' => Some(Tok::RParen),
                ',' => Some(Tok::Comma),
                ';' => Some(Tok::Semi),
                '=' => Some(Tok::Eq),
                _ => None,
            };
            if let Some(t) = single {
                toks.push((t, p));
                i += 1;
            } else if c == '`' {
                let start = i + 1;
                let mut j = start;
                while j < chars.len() && chars[j].1 != '`' {
                    j += 1;
                }
                if j == chars.len() {
                    return Err(GkrlsError::Parse {
                        pos: p,
                        msg: "unterminated quoted name".into(),
                    });
                }
                toks.push((Tok::Ident(chars[start..j].iter().map(|x| x.1).collect()), p));
                i = j + 1;
            } else if c.is_ascii_digit() || (c == '-' && i + 1 < chars.len() && chars[i + 1].1.is_ascii_digit()) {
                let mut j = i + 1;
                while j < chars.len()
                    && (chars[j].1.is_ascii_alphanumeric() || matches!(chars[j].1, '.' | '-' | '+'))
                {
                    // allow exponents like 1e-3 but stop at a bare '+' between terms
                    if matches!(chars[j].1, '-' | '+') && !matches!(chars[j - 1].1, 'e' | 'E') {
                        break;
                    }
                    j += 1;
                }
                toks.push((Tok::Number(chars[i..j].iter().map(|x| x.1).collect()), p));
                i = j;
            } else if is_ident_char(c) {
                let mut j = i + 1;
                while j < chars.len() && is_ident_char(chars[j].1) {
                    j += 1;
                }
                toks.push((Tok::Ident(chars[i..j].iter().map(|x| x.1).collect()), p));
                i = j;
            } else {
                return Err(GkrlsError::Parse {
                    pos: p,
                    msg: format!("unexpected character '{c}'"),
                });
            }
        }
        toks.push((Tok::End, text.len()));
        Ok(Self { toks, pos: 0 })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn at(&self) -> usize {
        self.toks[self.pos].1
    }

    fn next(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(GkrlsError::Parse {
            pos: self.at(),
            msg: msg.into(),
        })
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<()> {
        if *self.peek() == t {
            self.next();
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.next();
                Ok(s)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    fn names(&mut self) -> Result<Vec<String>> {
        let mut out = vec![self.ident("a column name")?];
        while *self.peek() == Tok::Comma {
            self.next();
            out.push(self.ident("a column name")?);
        }
        Ok(out)
    }

    fn value(&mut self) -> Result<(String, usize)> {
        let p = self.at();
        match self.next().0 {
            Tok::Ident(s) | Tok::Number(s) => Ok((s, p)),
            _ => Err(GkrlsError::Parse {
                pos: p,
                msg: "expected an option value".into(),
            }),
        }
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, pos: usize, key: &str) -> Result<T> {
    s.parse().map_err(|_| GkrlsError::Parse {
        pos,
        msg: format!("invalid value '{s}' for {key}"),
    })
}

fn parse_kernel(lx: &mut Lexer) -> Result<KernelTerm> {
    lx.expect(Tok::LParen, "'('")?;
    if matches!(lx.peek(), Tok::RParen | Tok::Semi) {
        return lx.err("empty kernel: at least one column is required");
    }
    let vars = lx.names()?;
    let mut term = KernelTerm {
        vars,
        sketch: SketchOptions::default(),
        bandwidth: None,
        standardize: None,
    };
    if *lx.peek() == Tok::Semi {
        lx.next();
        loop {
            let kp = lx.at();
            let key = lx.ident("an option name")?;
            lx.expect(Tok::Eq, "'='")?;
            let (val, vp) = lx.value()?;
            match key.as_str() {
                "sketch" | "method" => {
                    term.sketch.method = Some(val.parse().map_err(|_| GkrlsError::Parse {
                        pos: vp,
                        msg: format!("unknown sketch method '{val}'"),
                    })?)
                }
                "delta" => term.sketch.delta = Some(parse_num(&val, vp, "delta")?),
                "size" | "m" => term.sketch.size = Some(parse_num(&val, vp, "size")?),
                "seed" => term.sketch.seed = Some(parse_num(&val, vp, "seed")?),
                "bandwidth" => term.bandwidth = Some(parse_num(&val, vp, "bandwidth")?),
                "standardize" => {
                    term.standardize = Some(val.parse().map_err(|_| GkrlsError::Parse {
                        pos: vp,
                        msg: format!("unknown standardization '{val}'"),
                    })?)
                }
                _ => {
                    return Err(GkrlsError::Parse {
                        pos: kp,
                        msg: format!("unknown kernel option '{key}'"),
                    })
                }
            }
            if *lx.peek() == Tok::Comma {
                lx.next();
            } else {
                break;
            }
        }
    }
    lx.expect(Tok::RParen, "')'")?;
    Ok(term)
}

fn parse_formula(text: &str) -> Result<ModelSpec> {
    let mut lx = Lexer::new(text)?;
    let outcome = lx.ident("the outcome name")?;
    lx.expect(Tok::Tilde, "'~'")?;
    let mut intercept = true;
    let mut terms = Vec::new();
    loop {
        let (tok, pos) = lx.next();
        match tok {
            Tok::Number(n) if n == "0" => intercept = false,
            Tok::Number(n) if n == "1" => intercept = true,
            Tok::Ident(name) if *lx.peek() == Tok::LParen => match name.as_str() {
                "fixed" => {
                    lx.next();
                    let vars = lx.names()?;
                    lx.expect(Tok::RParen, "')'")?;
                    terms.push(TermSpec::Fixed { vars });
                }
                "re" => {
                    lx.next();
                    let group = lx.ident("a grouping column")?;
                    lx.expect(Tok::RParen, "')' (re() takes exactly one column)")?;
                    terms.push(TermSpec::RandomIntercept { group });
                }
                "kernel" => terms.push(TermSpec::Kernel(parse_kernel(&mut lx)?)),
                _ => {
                    return Err(GkrlsError::Parse {
                        pos,
                        msg: format!("unknown term '{name}'"),
                    })
                }
            },
            Tok::Ident(name) => terms.push(TermSpec::Fixed { vars: vec![name] }),
            _ => {
                return Err(GkrlsError::Parse {
                    pos,
                    msg: "expected a term".into(),
                })
            }
        }
        match lx.peek() {
            Tok::Plus => {
                lx.next();
            }
            Tok::End => break,
            Tok::Tilde => return lx.err("duplicate outcome: only one '~' is allowed"),
            _ => return lx.err("expected '+' or end of formula"),
        }
    }
    Ok(ModelSpec {
        outcome,
        intercept,
        terms,
    })
}

/// Parse a formula or its JSON equivalent (text starting with `{`).
pub fn parse_spec(text: &str) -> Result<ModelSpec> {
    let trimmed = text.trim();
    let spec = if trimmed.starts_with('{') {
        let spec: ModelSpec = serde_json::from_str(trimmed)?;
        if spec.outcome.is_empty() {
            return Err(GkrlsError::Spec("missing outcome".into()));
        }
        spec
    } else {
        parse_formula(trimmed)?
    };
    for t in &spec.terms {
        match t {
            TermSpec::Kernel(k) if k.vars.is_empty() => {
                return Err(GkrlsError::Spec("empty kernel term".into()))
            }
            TermSpec::Fixed { vars } if vars.is_empty() => {
                return Err(GkrlsError::Spec("empty fixed term".into()))
            }
            _ => {}
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_and_kernel() {
        let s = parse_spec("y ~ fixed(x1) + kernel(x1,x2)").unwrap();
        assert_eq!(s.terms.len(), 2);
        assert_eq!(s.n_penalized(), 1);
        assert!(s.intercept);
    }

    #[test]
    fn three_penalized_terms() {
        let s = parse_spec("y ~ kernel(x1,x2) + re(state) + kernel(x3,x4)").unwrap();
        assert_eq!(s.n_penalized(), 3);
        assert_eq!(s.terms[1], TermSpec::RandomIntercept { group: "state".into() });
    }

    #[test]
    fn empty_kernel_reports_position() {
        match parse_spec("y ~ kernel()") {
            Err(GkrlsError::Parse { pos, .. }) => assert_eq!(pos, 11),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_outcome_rejected() {
        assert!(matches!(parse_spec("y ~ x ~ z"), Err(GkrlsError::Parse { .. })));
    }

    #[test]
    fn kernel_options() {
        let s = parse_spec(
            "y ~ 0 + kernel(a, `b c`; sketch=gaussian, delta=2.5, size=7, seed=3, bandwidth=1e-1, standardize=scale)",
        )
        .unwrap();
        assert!(!s.intercept);
        let TermSpec::Kernel(k) = &s.terms[0] else { panic!() };
        assert_eq!(k.vars, vec!["a".to_string(), "b c".to_string()]);
        assert_eq!(k.sketch.method, Some(SketchMethod::Gaussian));
        assert_eq!(k.sketch.delta, Some(2.5));
        assert_eq!(k.sketch.size, Some(7));
        assert_eq!(k.sketch.seed, Some(3));
        assert_eq!(k.bandwidth, Some(0.1));
        assert_eq!(k.standardize, Some(StandardizeKind::Scale));
        assert_eq!(parse_spec(&s.to_formula()).unwrap(), s);
    }

    #[test]
    fn unknown_option_and_term() {
        assert!(parse_spec("y ~ kernel(a; color=red)").is_err());
        assert!(parse_spec("y ~ spline(a)").is_err());
        assert!(parse_spec("y ~ re(a, b)").is_err());
    }

    #[test]
    fn json_form_matches_formula() {
        let j = r#"{"outcome":"y","terms":[{"kind":"fixed","vars":["x1"]},
            {"kind":"re","group":"g"},
            {"kind":"kernel","vars":["x1","x2"],"sketch":{"method":"subsample","delta":5}}]}"#;
        let a = parse_spec(j).unwrap();
        let b = parse_spec("y ~ fixed(x1) + re(g) + kernel(x1, x2; sketch=subsample, delta=5)").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_against_data() {
        let d = Dataset::builder("y", vec![1.0, 2.0, 3.0, 4.0])
            .numeric("x1", vec![0.0, 1.0, 2.0, 3.0])
            .categorical("g", &["a", "b", "a", "b"])
            .build()
            .unwrap();
        parse_spec("y ~ fixed(x1, g) + re(g) + kernel(x1)").unwrap().validate(&d).unwrap();
        assert!(parse_spec("y ~ kernel(zz)").unwrap().validate(&d).is_err());
        assert!(parse_spec("y ~ re(x1)").unwrap().validate(&d).is_err());
    }
}
