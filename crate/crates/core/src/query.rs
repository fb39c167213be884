//! Boolean search queries: sanitizing, parsing, canonical rendering and
//! splitting into subqueries under a character budget.
//!
//! Splitting relies on union semantics: the result sets of the emitted
//! subqueries, merged by set union, equal the result set of the original
//! query. A disjunction can always be cut into pieces; a conjunction only by
//! distributing it over one of its disjunctive children, and `NOT (a AND b)`
//! counts as the disjunction `NOT a OR NOT b`.
//!
//! The exclusion expansion that pairs each positive term with a single
//! negated term, `(A OR B) AND NOT (C OR D)` to `A AND NOT C`, `A AND NOT D`,
//! `B AND NOT C`, `B AND NOT D`, is not union-equivalent: the assignment
//! A=1, C=0, D=1 satisfies `A AND NOT C` but not the original. It is kept as
//! [`ExpansionMode::Permutation`] and never used by [`split`].

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum QueryNode {
    Atom { field: String, phrase: String },
    And(Vec<QueryNode>),
    Or(Vec<QueryNode>),
    Not(Box<QueryNode>),
}

impl QueryNode {
    pub fn atom(field: impl Into<String>, phrase: impl Into<String>) -> Result<Self> {
        let (field, phrase) = (field.into(), phrase.into());
        if field.is_empty() || !field.chars().all(is_word_char) || is_operator(&field) {
            return Err(Error::invalid(format!("invalid field name `{field}`")));
        }
        if phrase.is_empty() || phrase.contains('"') {
            return Err(Error::invalid(format!("invalid phrase `{phrase}`")));
        }
        Ok(QueryNode::Atom { field, phrase })
    }

    /// Flattening conjunction; a single child is returned as is.
    pub fn and(children: Vec<QueryNode>) -> Self {
        Self::junction(children, true)
    }

    /// Flattening disjunction; a single child is returned as is.
    pub fn or(children: Vec<QueryNode>) -> Self {
        Self::junction(children, false)
    }

    fn junction(children: Vec<QueryNode>, is_and: bool) -> Self {
        assert!(!children.is_empty(), "junction needs at least one child");
        let mut flat = Vec::with_capacity(children.len());
        for c in children {
            match c {
                QueryNode::And(cs) if is_and => flat.extend(cs),
                QueryNode::Or(cs) if !is_and => flat.extend(cs),
                other => flat.push(other),
            }
        }
        if flat.len() == 1 {
            flat.pop().expect("one child")
        } else if is_and {
            QueryNode::And(flat)
        } else {
            QueryNode::Or(flat)
        }
    }

    /// Negation with double negatives removed.
    #[allow(clippy::should_implement_trait)]
    pub fn not(child: QueryNode) -> Self {
        match child {
            QueryNode::Not(inner) => *inner,
            other => QueryNode::Not(Box::new(other)),
        }
    }

    /// Distinct atoms in first-occurrence order.
    pub fn atoms(&self) -> Vec<(&str, &str)> {
        let mut out: Vec<(&str, &str)> = Vec::new();
        self.visit_atoms(&mut |f, p| {
            if !out.contains(&(f, p)) {
                out.push((f, p));
            }
        });
        out
    }

    fn visit_atoms<'a>(&'a self, f: &mut impl FnMut(&'a str, &'a str)) {
        match self {
            QueryNode::Atom { field, phrase } => f(field, phrase),
            QueryNode::And(cs) | QueryNode::Or(cs) => cs.iter().for_each(|c| c.visit_atoms(f)),
            QueryNode::Not(c) => c.visit_atoms(f),
        }
    }

    /// Truth value under an assignment of atoms.
    pub fn evaluate(&self, truth: &impl Fn(&str, &str) -> bool) -> bool {
        match self {
            QueryNode::Atom { field, phrase } => truth(field, phrase),
            QueryNode::And(cs) => cs.iter().all(|c| c.evaluate(truth)),
            QueryNode::Or(cs) => cs.iter().any(|c| c.evaluate(truth)),
            QueryNode::Not(c) => !c.evaluate(truth),
        }
    }

    fn eval(&self, index: &HashMap<(&str, &str), usize>, bits: u64) -> bool {
        match self {
            QueryNode::Atom { field, phrase } => bits >> index[&(field.as_str(), phrase.as_str())] & 1 == 1,
            QueryNode::And(cs) => cs.iter().all(|c| c.eval(index, bits)),
            QueryNode::Or(cs) => cs.iter().any(|c| c.eval(index, bits)),
            QueryNode::Not(c) => !c.eval(index, bits),
        }
    }
}

impl fmt::Display for QueryNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(self))
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '-' || c == '_'
}

fn is_operator(word: &str) -> bool {
    ["AND", "OR", "NOT"].iter().any(|op| op.eq_ignore_ascii_case(word))
}

fn syntax(offset: usize, message: impl Into<String>) -> Error {
    Error::QuerySyntax {
        offset,
        message: message.into(),
    }
}

/// Quotes bare field terms, `AUTHKEY(rural)` becoming `AUTHKEY("rural")`,
/// and collapses whitespace outside quotes. Offsets in errors count chars.
pub fn sanitize(raw: &str) -> Result<String> {
    let chars: Vec<char> = raw.chars().collect();
    let mut open_quote = None;
    let mut parens = Vec::new();
    for (i, &c) in chars.iter().enumerate() {
        match (open_quote, c) {
            (Some(_), '"') => open_quote = None,
            (Some(_), _) => {}
            (None, '"') => open_quote = Some(i),
            (None, '(') => parens.push(i),
            (None, ')') => {
                if parens.pop().is_none() {
                    return Err(syntax(i, "unmatched `)`"));
                }
            }
            _ => {}
        }
    }
    if let Some(q) = open_quote {
        return Err(syntax(q, "unterminated quote"));
    }
    if let Some(&p) = parens.last() {
        return Err(syntax(p, "unclosed `(`"));
    }

    let mut out = String::with_capacity(raw.len() + 8);
    let mut space = false;
    let mut i = 0;
    let push = |out: &mut String, space: &mut bool, s: &str| {
        if *space && !out.is_empty() {
            out.push(' ');
        }
        *space = false;
        out.push_str(s);
    };
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            space = true;
            i += 1;
        } else if c == '"' {
            let end = i + 1 + chars[i + 1..].iter().position(|&c| c == '"').expect("balanced");
            push(&mut out, &mut space, &chars[i..=end].iter().collect::<String>());
            i = end + 1;
        } else if is_word_char(c) {
            let end = chars[i..].iter().position(|&c| !is_word_char(c)).map_or(chars.len(), |k| i + k);
            let word: String = chars[i..end].iter().collect();
            push(&mut out, &mut space, &word);
            i = end;
            if chars.get(end) == Some(&'(') && !is_operator(&word) {
                let close = end + chars[end..].iter().position(|&c| c == ')').expect("balanced");
                let inner = &chars[end + 1..close];
                if !inner.iter().any(|&c| c == '"' || c == '(') {
                    let term = inner.iter().collect::<String>();
                    let term = term.split_whitespace().collect::<Vec<_>>().join(" ");
                    if !term.is_empty() {
                        out.push_str(&format!("(\"{term}\")"));
                        i = close + 1;
                    }
                }
            }
        } else {
            push(&mut out, &mut space, &c.to_string());
            i += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    LParen,
    RParen,
    Phrase(String),
    Field(String),
    And,
    Or,
    Not,
}

fn lex(s: &str) -> Result<Vec<(Tok, usize)>> {
    let chars: Vec<char> = s.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            _ if c.is_whitespace() => i += 1,
            '(' => {
                toks.push((Tok::LParen, i));
                i += 1;
            }
            ')' => {
                toks.push((Tok::RParen, i));
                i += 1;
            }
            '"' => {
                let end = chars[i + 1..]
                    .iter()
                    .position(|&c| c == '"')
                    .map(|k| i + 1 + k)
                    .ok_or_else(|| syntax(i, "unterminated quote"))?;
                toks.push((Tok::Phrase(chars[i + 1..end].iter().collect()), i));
                i = end + 1;
            }
            _ if is_word_char(c) => {
                let end = chars[i..].iter().position(|&c| !is_word_char(c)).map_or(chars.len(), |k| i + k);
                let word: String = chars[i..end].iter().collect();
                let tok = match word.to_ascii_uppercase().as_str() {
                    "AND" => Tok::And,
                    "OR" => Tok::Or,
                    "NOT" => Tok::Not,
                    _ if chars.get(end) == Some(&'(') => Tok::Field(word),
                    _ => return Err(syntax(i, format!("bare term `{word}`; quote it inside a field"))),
                };
                toks.push((tok, i));
                i = end;
            }
            _ => return Err(syntax(i, format!("unexpected character `{c}`"))),
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |t| t.1)
    }

    fn expect_close(&mut self, open: usize) -> Result<()> {
        match self.peek() {
            Some(Tok::RParen) => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(syntax(self.offset(), format!("expected `)` closing the `(` at {open}"))),
        }
    }

    fn or(&mut self, field: Option<&str>) -> Result<QueryNode> {
        let mut items = vec![self.and(field)?];
        while self.peek() == Some(&Tok::Or) {
            self.pos += 1;
            items.push(self.and(field)?);
        }
        Ok(QueryNode::or(items))
    }

    fn and(&mut self, field: Option<&str>) -> Result<QueryNode> {
        let mut items = vec![self.unary(field)?];
        loop {
            match self.peek() {
                Some(Tok::And) => {
                    self.pos += 1;
                    items.push(self.unary(field)?);
                }
                Some(Tok::Not) => {
                    self.pos += 1;
                    items.push(QueryNode::not(self.unary(field)?));
                }
                _ => break,
            }
        }
        Ok(QueryNode::and(items))
    }

    fn unary(&mut self, field: Option<&str>) -> Result<QueryNode> {
        if self.peek() == Some(&Tok::Not) {
            self.pos += 1;
            return Ok(QueryNode::not(self.unary(field)?));
        }
        self.primary(field)
    }

    fn group(&mut self, open: usize, field: Option<&str>) -> Result<QueryNode> {
        if self.peek() == Some(&Tok::RParen) {
            return Err(syntax(open, "empty parentheses"));
        }
        let node = self.or(field)?;
        self.expect_close(open)?;
        Ok(node)
    }

    fn primary(&mut self, field: Option<&str>) -> Result<QueryNode> {
        let offset = self.offset();
        let Some((tok, _)) = self.toks.get(self.pos).cloned() else {
            return Err(syntax(offset, "expected a term, found end of query"));
        };
        self.pos += 1;
        match (tok, field) {
            (Tok::LParen, _) => self.group(offset, field),
            (Tok::Field(name), None) => {
                // The lexer only emits a field when `(` follows directly.
                let open = self.offset();
                self.pos += 1;
                self.group(open, Some(&name))
            }
            (Tok::Field(name), Some(outer)) => Err(syntax(
                offset,
                format!("field `{name}` nested inside field `{outer}`"),
            )),
            (Tok::Phrase(p), Some(f)) => {
                if p.is_empty() {
                    return Err(syntax(offset, "empty phrase"));
                }
                QueryNode::atom(f, p)
            }
            (Tok::Phrase(p), None) => Err(syntax(offset, format!("phrase \"{p}\" outside a field"))),
            (Tok::RParen, _) => Err(syntax(offset, "expected a term, found `)`")),
            (_, _) => Err(syntax(offset, "dangling operator")),
        }
    }
}

/// Parses a sanitized query. `NOT` binds tighter than `AND`, which binds
/// tighter than `OR`; `x AND NOT y` and `x NOT y` both mean `x AND (NOT y)`.
/// A field may wrap a sub-expression of phrases, `F("a" OR "b")`, which
/// distributes the field over its phrases.
pub fn parse(s: &str) -> Result<QueryNode> {
    let toks = lex(s)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: s.chars().count(),
    };
    let node = p.or(None)?;
    if p.pos < p.toks.len() {
        return Err(syntax(p.offset(), "unexpected token after complete query"));
    }
    Ok(node)
}

/// Canonical text form; `parse(&render(n)) == n`.
pub fn render(n: &QueryNode) -> String {
    let mut out = String::new();
    write_node(n, &mut out);
    out
}

fn write_node(n: &QueryNode, out: &mut String) {
    match n {
        QueryNode::Atom { field, phrase } => {
            out.push_str(field);
            out.push_str("(\"");
            out.push_str(phrase);
            out.push_str("\")");
        }
        QueryNode::Or(cs) => {
            for (i, c) in cs.iter().enumerate() {
                if i > 0 {
                    out.push_str(" OR ");
                }
                write_node(c, out);
            }
        }
        QueryNode::And(cs) => {
            for (i, c) in cs.iter().enumerate() {
                if i > 0 {
                    out.push_str(" AND ");
                }
                write_operand(c, out);
            }
        }
        QueryNode::Not(c) => {
            out.push_str("NOT ");
            write_operand(c, out);
        }
    }
}

fn write_operand(n: &QueryNode, out: &mut String) {
    match n {
        QueryNode::Atom { .. } | QueryNode::Not(_) => write_node(n, out),
        _ => {
            out.push('(');
            write_node(n, out);
            out.push(')');
        }
    }
}

fn chars(n: &QueryNode) -> usize {
    render(n).chars().count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExpansionMode {
    /// `(A OR B) AND NOT (C OR D)` to `A AND NOT C AND NOT D`,
    /// `B AND NOT C AND NOT D`; union-equivalent.
    #[default]
    Conjunctive,
    /// One negated term per subquery; not union-equivalent.
    Permutation,
}

/// Distributes a conjunction of positive blocks and exclusions over its
/// positive disjunctions.
pub fn expand_exclusions(n: &QueryNode, mode: ExpansionMode) -> Result<Vec<QueryNode>> {
    let unsupported = || {
        Error::invalid(format!(
            "expand_exclusions expects a conjunction of terms, disjunctions and exclusions; use split for `{}`",
            truncate(&render(n))
        ))
    };
    let children = match n {
        QueryNode::Atom { .. } | QueryNode::Not(_) => return Ok(vec![n.clone()]),
        QueryNode::And(cs) => cs,
        QueryNode::Or(_) => return Err(unsupported()),
    };
    let mut positives: Vec<Vec<QueryNode>> = Vec::new();
    let mut exclusions: Vec<Vec<QueryNode>> = Vec::new();
    for c in children {
        match c {
            QueryNode::Or(alts) => positives.push(alts.clone()),
            QueryNode::Not(inner) => match inner.as_ref() {
                QueryNode::Or(alts) => exclusions.push(alts.iter().cloned().map(QueryNode::not).collect()),
                QueryNode::Atom { .. } => exclusions.push(vec![QueryNode::not((**inner).clone())]),
                _ => return Err(unsupported()),
            },
            QueryNode::Atom { .. } => positives.push(vec![c.clone()]),
            QueryNode::And(_) => return Err(unsupported()),
        }
    }

    let mut blocks = positives;
    match mode {
        ExpansionMode::Conjunctive => {
            blocks.extend(exclusions.into_iter().map(|e| vec![QueryNode::and(e)]));
        }
        ExpansionMode::Permutation => blocks.extend(exclusions),
    }
    let mut out: Vec<Vec<QueryNode>> = vec![Vec::new()];
    for block in &blocks {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                block.iter().map(move |alt| {
                    let mut next = prefix.clone();
                    next.push(alt.clone());
                    next
                })
            })
            .collect();
    }
    Ok(out.into_iter().map(QueryNode::and).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitConfig {
    pub max_chars: usize,
    /// Most alternatives distributed into one conjunction.
    pub max_and_chain: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            max_chars: 2000,
            max_and_chain: 100,
        }
    }
}

fn truncate(s: &str) -> String {
    const MAX: usize = 80;
    if s.chars().count() <= MAX {
        s.to_string()
    } else {
        format!("{}...", s.chars().take(MAX).collect::<String>())
    }
}

/// Alternatives of a child usable for distribution, if it is disjunctive.
fn disjuncts(n: &QueryNode) -> Option<Vec<QueryNode>> {
    match n {
        QueryNode::Or(cs) => Some(cs.clone()),
        QueryNode::Not(inner) => match inner.as_ref() {
            QueryNode::And(cs) => Some(cs.iter().cloned().map(QueryNode::not).collect()),
            _ => None,
        },
        _ => None,
    }
}

fn split_node(n: &QueryNode, cfg: &SplitConfig) -> Result<Vec<QueryNode>> {
    if chars(n) <= cfg.max_chars {
        return Ok(vec![n.clone()]);
    }
    match n {
        QueryNode::Atom { .. } => Err(Error::Unsplittable(format!(
            "atom `{}` is longer than {} characters",
            truncate(&render(n)),
            cfg.max_chars
        ))),
        QueryNode::Or(cs) => {
            let mut parts = Vec::new();
            for c in cs {
                parts.extend(split_node(c, cfg)?);
            }
            Ok(parts)
        }
        QueryNode::Not(inner) => match inner.as_ref() {
            QueryNode::And(cs) => split_node(&QueryNode::or(cs.iter().cloned().map(QueryNode::not).collect()), cfg),
            QueryNode::Or(cs) => split_node(&QueryNode::and(cs.iter().cloned().map(QueryNode::not).collect()), cfg),
            _ => Err(Error::Unsplittable(format!(
                "negation `{}` is longer than {} characters",
                truncate(&render(n)),
                cfg.max_chars
            ))),
        },
        QueryNode::And(cs) => {
            let pivot = cs
                .iter()
                .enumerate()
                .filter_map(|(i, c)| disjuncts(c).map(|d| (i, d, chars(c))))
                .max_by(|a, b| a.2.cmp(&b.2).then(b.0.cmp(&a.0)));
            let Some((pivot, alternatives, _)) = pivot else {
                return Err(Error::Unsplittable(format!(
                    "conjunct `{}` ({} characters) exceeds the {} character budget and contains no disjunction to split on",
                    truncate(&render(n)),
                    chars(n),
                    cfg.max_chars
                )));
            };
            let rest: Vec<QueryNode> = cs
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != pivot)
                .map(|(_, c)| c.clone())
                .collect();
            let with = |group: &[QueryNode]| {
                let mut children = rest.clone();
                children.push(QueryNode::or(group.to_vec()));
                QueryNode::and(children)
            };

            let mut parts = Vec::new();
            let mut group: Vec<QueryNode> = Vec::new();
            for alt in alternatives {
                group.push(alt);
                let fits = group.len() <= cfg.max_and_chain && chars(&with(&group)) <= cfg.max_chars;
                if fits {
                    continue;
                }
                let alt = group.pop().expect("just pushed");
                if !group.is_empty() {
                    parts.push(with(&group));
                    group.clear();
                }
                let single = with(std::slice::from_ref(&alt));
                if chars(&single) <= cfg.max_chars {
                    group.push(alt);
                } else {
                    parts.extend(split_node(&single, cfg)?);
                }
            }
            if !group.is_empty() {
                parts.push(with(&group));
            }
            Ok(parts)
        }
    }
}

/// Most distinct atoms for which splitting falls back to a truth-table cover.
const MAX_COVER_ATOMS: usize = 12;

/// Covers the satisfying assignments of `n` with conjunctions of literals,
/// taking for each uncovered assignment the shortest implicant containing it.
/// `None` when `n` has too many atoms to tabulate.
fn cover(n: &QueryNode, cfg: &SplitConfig) -> Result<Option<Vec<QueryNode>>> {
    let atoms = n.atoms();
    let k = atoms.len();
    if k > MAX_COVER_ATOMS {
        return Ok(None);
    }
    let index: HashMap<(&str, &str), usize> = atoms.iter().enumerate().map(|(i, &a)| (a, i)).collect();
    let literal = |i: usize| QueryNode::Atom {
        field: atoms[i].0.to_string(),
        phrase: atoms[i].1.to_string(),
    };
    let len: Vec<usize> = (0..k).map(|i| chars(&literal(i))).collect();
    let full = (1usize << k) - 1;
    let truth: Vec<bool> = (0..=full).map(|b| n.eval(&index, b as u64)).collect();

    // implicant[mask << k | val]: fixing the atoms in `mask` to `val` forces `n`.
    let mut implicant = vec![false; 1 << (2 * k)];
    let mut masks: Vec<usize> = (0..=full).collect();
    masks.sort_by_key(|m| std::cmp::Reverse(m.count_ones()));
    for &mask in &masks {
        let mut val = mask;
        loop {
            implicant[mask << k | val] = if mask == full {
                truth[val]
            } else {
                let free = 1 << (!mask & full).trailing_zeros();
                implicant[(mask | free) << k | val] && implicant[(mask | free) << k | val | free]
            };
            if val == 0 {
                break;
            }
            val = (val - 1) & mask;
        }
    }
    // Length of `P1 AND .. AND Pp AND NOT (N1 OR .. OR Nq)`, as built below.
    let cost = |mask: usize, val: usize| {
        let positive = (mask & val).count_ones() as usize;
        let negated = (mask & !val).count_ones() as usize;
        let spelled: usize = (0..k).filter(|i| mask >> i & 1 == 1).map(|i| len[i]).sum();
        let exclusion = match negated {
            0 => 0,
            1 => 4,
            q => 6 + 4 * (q - 1),
        };
        let joins = positive + usize::from(negated > 0) - 1;
        spelled + 5 * joins + exclusion
    };

    let mut covered = vec![false; full + 1];
    let mut parts = Vec::new();
    for x in 0..=full {
        if !truth[x] || covered[x] {
            continue;
        }
        let (best, best_cost) = (1..=full)
            .filter(|&mask| implicant[mask << k | (x & mask)])
            .map(|mask| (mask, cost(mask, x & mask)))
            .min_by_key(|&(mask, c)| (c, mask.count_ones(), mask))
            .expect("a full assignment is always an implicant");
        if best_cost > cfg.max_chars {
            let witness: Vec<String> = (0..k)
                .map(|i| format!("{}={}", render(&literal(i)), u8::from(x >> i & 1 == 1)))
                .collect();
            return Err(Error::Unsplittable(format!(
                "no conjunction matching {} fits in {} characters (shortest is {best_cost})",
                truncate(&witness.join(", ")),
                cfg.max_chars
            )));
        }
        for (y, c) in covered.iter_mut().enumerate() {
            if y & best == x & best {
                *c = true;
            }
        }
        let fixed = || (0..k).filter(|i| best >> i & 1 == 1);
        let mut conjuncts: Vec<QueryNode> = fixed().filter(|i| x >> i & 1 == 1).map(literal).collect();
        let excluded: Vec<QueryNode> = fixed().filter(|i| x >> i & 1 == 0).map(literal).collect();
        if !excluded.is_empty() {
            conjuncts.push(QueryNode::not(QueryNode::or(excluded)));
        }
        let part = QueryNode::and(conjuncts);
        debug_assert_eq!(chars(&part), best_cost);
        parts.push(part);
    }
    Ok(Some(parts))
}

/// Splits `n` into subqueries of at most `cfg.max_chars` characters whose
/// union is equivalent to `n`, then packs them first-fit into as few
/// disjunctions as the budget allows.
pub fn split(n: &QueryNode, cfg: &SplitConfig) -> Result<Vec<String>> {
    if cfg.max_chars == 0 || cfg.max_and_chain == 0 {
        return Err(Error::config("max_chars/max_and_chain", "must be positive"));
    }
    let whole = render(n);
    if whole.chars().count() <= cfg.max_chars {
        return Ok(vec![whole]);
    }
    let parts = match split_node(n, cfg) {
        Err(Error::Unsplittable(structural)) => match cover(n, cfg)? {
            Some(parts) => parts,
            None => return Err(Error::Unsplittable(structural)),
        },
        other => other?,
    };
    if parts.is_empty() {
        log::warn!("query matches no assignment of its atoms; nothing to emit");
    }

    let mut groups: Vec<(Vec<String>, usize)> = Vec::new();
    for part in &parts {
        let text = render(part);
        let len = text.chars().count();
        match groups.iter_mut().find(|(_, used)| used + 4 + len <= cfg.max_chars) {
            Some((texts, used)) => {
                texts.push(text);
                *used += 4 + len;
            }
            None => groups.push((vec![text], len)),
        }
    }
    let out: Vec<String> = groups.into_iter().map(|(texts, _)| texts.join(" OR ")).collect();
    debug_assert!(out.iter().all(|s| s.chars().count() <= cfg.max_chars));
    Ok(out)
}

/// Sanitizes, parses and splits a raw query.
pub fn split_query(raw: &str, cfg: &SplitConfig) -> Result<Vec<String>> {
    split(&parse(&sanitize(raw)?)?, cfg)
}

pub const MAX_ORACLE_ATOMS: usize = 20;

/// An assignment on which `Or(parts)` and `original` disagree, as
/// `(field, phrase, value)` triples, or `None` if they are equivalent.
pub fn counterexample(parts: &[QueryNode], original: &QueryNode) -> Result<Option<Vec<(String, String, bool)>>> {
    let mut atoms = original.atoms();
    for p in parts {
        for a in p.atoms() {
            if !atoms.contains(&a) {
                atoms.push(a);
            }
        }
    }
    if atoms.len() > MAX_ORACLE_ATOMS {
        return Err(Error::invalid(format!(
            "{} distinct atoms exceed the truth-table limit of {MAX_ORACLE_ATOMS}",
            atoms.len()
        )));
    }
    let index: HashMap<(&str, &str), usize> = atoms.iter().enumerate().map(|(i, &a)| (a, i)).collect();
    for bits in 0..1u64 << atoms.len() {
        let lhs = parts.iter().any(|p| p.eval(&index, bits));
        if lhs != original.eval(&index, bits) {
            return Ok(Some(
                atoms
                    .iter()
                    .enumerate()
                    .map(|(i, (f, p))| (f.to_string(), p.to_string(), bits >> i & 1 == 1))
                    .collect(),
            ));
        }
    }
    Ok(None)
}

/// Truth-table check that the union of `parts` is equivalent to `original`.
pub fn equivalent(parts: &[QueryNode], original: &QueryNode) -> Result<bool> {
    Ok(counterexample(parts, original)?.is_none())
}
