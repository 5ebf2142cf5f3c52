/// Boolean formula over concept nodes, written as an s-expression:
/// `NAME | (and e+) | (or e+) | (not e)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Formula {
    Ref(usize),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Not(Box<Formula>),
}

fn tokenize(src: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut atom = String::new();
    for ch in src.chars() {
        if ch == '(' || ch == ')' || ch.is_whitespace() {
            if !atom.is_empty() {
                tokens.push(std::mem::take(&mut atom));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        } else {
            atom.push(ch);
        }
    }
    if !atom.is_empty() {
        tokens.push(atom);
    }
    tokens
}

impl Formula {
    pub fn parse(src: &str, lookup: &dyn Fn(&str) -> Option<usize>) -> Result<Self, String> {
        let tokens = tokenize(src);
        let mut pos = 0;
        let f = Self::parse_expr(&tokens, &mut pos, lookup)?;
        if pos != tokens.len() {
            return Err(format!("unexpected trailing token '{}'", tokens[pos]));
        }
        Ok(f)
    }

    fn parse_expr(tokens: &[String], pos: &mut usize, lookup: &dyn Fn(&str) -> Option<usize>) -> Result<Self, String> {
        let tok = tokens.get(*pos).ok_or("unexpected end of formula")?;
        *pos += 1;
        match tok.as_str() {
            ")" => Err("unexpected ')'".into()),
            "(" => {
                let op = tokens.get(*pos).ok_or("missing operator")?.clone();
                *pos += 1;
                let mut args = Vec::new();
                while tokens.get(*pos).map(String::as_str) != Some(")") {
                    if *pos >= tokens.len() {
                        return Err("unbalanced parentheses".into());
                    }
                    args.push(Self::parse_expr(tokens, pos, lookup)?);
                }
                *pos += 1;
                match (op.as_str(), args.len()) {
                    ("and", n) if n > 0 => Ok(Formula::And(args)),
                    ("or", n) if n > 0 => Ok(Formula::Or(args)),
                    ("not", 1) => Ok(Formula::Not(Box::new(args.pop().unwrap()))),
                    (op, n) => Err(format!("bad operator '{op}' with {n} arguments")),
                }
            }
            name => lookup(name).map(Formula::Ref).ok_or_else(|| format!("unknown concept '{name}'")),
        }
    }

    pub fn eval(&self, values: &[bool]) -> bool {
        match self {
            Formula::Ref(i) => values[*i],
            Formula::And(xs) => xs.iter().all(|x| x.eval(values)),
            Formula::Or(xs) => xs.iter().any(|x| x.eval(values)),
            Formula::Not(x) => !x.eval(values),
        }
    }

    pub fn references(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect(&self, out: &mut Vec<usize>) {
        match self {
            Formula::Ref(i) => out.push(*i),
            Formula::And(xs) | Formula::Or(xs) => xs.iter().for_each(|x| x.collect(out)),
            Formula::Not(x) => x.collect(out),
        }
    }

    pub(crate) fn remap(self, map: &[usize]) -> Self {
        match self {
            Formula::Ref(i) => Formula::Ref(map[i]),
            Formula::And(xs) => Formula::And(xs.into_iter().map(|x| x.remap(map)).collect()),
            Formula::Or(xs) => Formula::Or(xs.into_iter().map(|x| x.remap(map)).collect()),
            Formula::Not(x) => Formula::Not(Box::new(x.remap(map))),
        }
    }
}
