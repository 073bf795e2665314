use std::fmt;

use crate::error::{Error, Result};

/// Labeled constituency tree. The root is always a nonterminal and every
/// nonterminal has at least one child.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Tree {
    Node { label: String, children: Vec<Tree> },
    Leaf(String),
}

impl Tree {
    pub fn node(label: impl Into<String>, children: Vec<Tree>) -> Self {
        Tree::Node {
            label: label.into(),
            children,
        }
    }

    pub fn leaf(token: impl Into<String>) -> Self {
        Tree::Leaf(token.into())
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Tree::Leaf(_))
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            Tree::Node { label, .. } => Some(label),
            Tree::Leaf(_) => None,
        }
    }

    /// Terminal tokens, left to right.
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Tree::Leaf(t) => out.push(t),
            Tree::Node { children, .. } => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    pub fn num_nonterminals(&self) -> usize {
        match self {
            Tree::Leaf(_) => 0,
            Tree::Node { children, .. } => 1 + children.iter().map(Tree::num_nonterminals).sum::<usize>(),
        }
    }

    pub fn labels(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.visit_nodes(&mut |label| out.push(label));
        out
    }

    fn visit_nodes<'a>(&'a self, f: &mut impl FnMut(&'a str)) {
        if let Tree::Node { label, children } = self {
            f(label);
            children.iter().for_each(|c| c.visit_nodes(f));
        }
    }

    /// Replaces every terminal, keeping the skeleton.
    pub fn map_leaves(&self, f: &mut impl FnMut(&str) -> Vec<String>) -> Tree {
        match self {
            Tree::Leaf(t) => {
                // Only reachable for a bare leaf; callers start from a node.
                let mut parts = f(t);
                Tree::Leaf(std::mem::take(&mut parts).join(""))
            }
            Tree::Node { label, children } => {
                let mut out = Vec::with_capacity(children.len());
                for c in children {
                    match c {
                        Tree::Leaf(t) => out.extend(f(t).into_iter().map(Tree::Leaf)),
                        node => out.push(node.map_leaves(f)),
                    }
                }
                Tree::node(label.clone(), out)
            }
        }
    }

    /// Labeled spans `(label, start, end)` over terminal positions, root
    /// included, in pre-order.
    pub fn spans(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        self.collect_spans(0, &mut out);
        out
    }

    fn collect_spans(&self, start: usize, out: &mut Vec<(String, usize, usize)>) -> usize {
        match self {
            Tree::Leaf(_) => start + 1,
            Tree::Node { label, children } => {
                let slot = out.len();
                out.push((label.clone(), start, start));
                let mut end = start;
                for c in children {
                    end = c.collect_spans(end, out);
                }
                out[slot].2 = end;
                end
            }
        }
    }
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tree::Leaf(t) => write!(f, "{t}"),
            Tree::Node { label, children } => {
                write!(f, "({label}")?;
                for c in children {
                    write!(f, " {c}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, PartialEq)]
enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn tokenize(line: &str) -> Vec<(usize, Tok<'_>)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in line.char_indices() {
        if ch == '(' || ch == ')' || ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s, Tok::Atom(&line[s..i])));
            }
            match ch {
                '(' => out.push((i, Tok::Open)),
                ')' => out.push((i, Tok::Close)),
                _ => {}
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, Tok::Atom(&line[s..])));
    }
    out
}

/// Parses one bracketed tree such as `(S (NP the dog) (VP barks))`.
pub fn parse_tree(line: &str) -> Result<Tree> {
    let toks = tokenize(line);
    if toks.is_empty() {
        return Err(Error::Parse {
            pos: 0,
            msg: "empty input".into(),
        });
    }
    let mut pos = 0;
    let tree = parse_node(&toks, &mut pos, line.len())?;
    if let Some((at, _)) = toks.get(pos) {
        return Err(Error::Parse {
            pos: *at,
            msg: "trailing input after the tree".into(),
        });
    }
    Ok(tree)
}

fn parse_node(toks: &[(usize, Tok<'_>)], pos: &mut usize, end: usize) -> Result<Tree> {
    let err = |at: usize, msg: &str| Error::Parse {
        pos: at,
        msg: msg.to_string(),
    };
    match toks.get(*pos) {
        Some((_, Tok::Open)) => *pos += 1,
        Some((at, _)) => return Err(err(*at, "expected '('")),
        None => return Err(err(end, "unexpected end of input")),
    }
    let label = match toks.get(*pos) {
        Some((_, Tok::Atom(l))) => {
            *pos += 1;
            l.to_string()
        }
        Some((at, _)) => return Err(err(*at, "expected a nonterminal label")),
        None => return Err(err(end, "unbalanced parentheses")),
    };
    let mut children = Vec::new();
    loop {
        match toks.get(*pos) {
            Some((_, Tok::Close)) => {
                *pos += 1;
                break;
            }
            Some((_, Tok::Atom(t))) => {
                children.push(Tree::leaf(*t));
                *pos += 1;
            }
            Some((_, Tok::Open)) => children.push(parse_node(toks, pos, end)?),
            None => return Err(err(end, "unbalanced parentheses")),
        }
    }
    if children.is_empty() {
        return Err(err(end, &format!("nonterminal {label} has no children")));
    }
    Ok(Tree::Node { label, children })
}

/// Whitespace-normalized bracket string, the canonical serialized form.
pub fn normalize(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    for (_, tok) in tokenize(line) {
        match tok {
            Tok::Open => {
                if !out.is_empty() && !out.ends_with('(') {
                    out.push(' ');
                }
                out.push('(');
            }
            Tok::Close => out.push(')'),
            Tok::Atom(a) => {
                if !out.is_empty() && !out.ends_with('(') {
                    out.push(' ');
                }
                out.push_str(a);
            }
        }
    }
    out
}

/// Reads a treebank: one bracketed tree per non-empty line.
pub fn read_treebank(text: &str) -> Result<Vec<Tree>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_tree(l).map_err(|e| match e {
                Error::Parse { pos, msg } => Error::Parse {
                    pos,
                    msg: format!("line {}: {msg}", i + 1),
                },
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_tree() {
        let t = parse_tree("(S (NP the dog) (VP barks))").unwrap();
        let want = Tree::node(
            "S",
            vec![
                Tree::node("NP", vec![Tree::leaf("the"), Tree::leaf("dog")]),
                Tree::node("VP", vec![Tree::leaf("barks")]),
            ],
        );
        assert_eq!(t, want);
        assert_eq!(t.to_string(), "(S (NP the dog) (VP barks))");
        assert_eq!(t.leaves(), vec!["the", "dog", "barks"]);
        assert_eq!(t.num_nonterminals(), 3);
    }

    #[test]
    fn parses_single_nonterminal() {
        let t = parse_tree("(NP dog)").unwrap();
        assert_eq!(t, Tree::node("NP", vec![Tree::leaf("dog")]));
    }

    #[test]
    fn rejects_malformed_input() {
        for bad in ["", "   ", "(S (NP a)", "(S a))", "dog", "(S)", "((S a))", "(S a) (S b)"] {
            assert!(parse_tree(bad).is_err(), "{bad:?} should fail");
        }
    }

    #[test]
    fn spans_cover_terminals() {
        let t = parse_tree("(S (NP a) (VP b (PP c d)))").unwrap();
        assert_eq!(
            t.spans(),
            vec![
                ("S".to_string(), 0, 4),
                ("NP".to_string(), 0, 1),
                ("VP".to_string(), 1, 4),
                ("PP".to_string(), 2, 4),
            ]
        );
    }

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(normalize("  (S\n(NP  a )(VP b))"), "(S (NP a) (VP b))");
    }
}
