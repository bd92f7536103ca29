//! Guidance-spec parsing from flags and files.

use plaid_core::corpus::Vocabulary;
use plaid_core::{GuidanceSpec, GuidanceTerm};

use crate::BadConfig;

/// Unescapes `\n`, `\t` and `\\` so multi-line spans fit on a command line.
fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// `START:END:TEXT`; TEXT must encode to exactly `END - START` tokens.
pub fn parse_span(arg: &str, vocab: &Vocabulary) -> Result<GuidanceTerm, BadConfig> {
    let mut parts = arg.splitn(3, ':');
    let (Some(a), Some(b), Some(text)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(BadConfig(format!("--span {arg:?}: expected START:END:TEXT")));
    };
    let start: usize = a.trim().parse().map_err(|_| BadConfig(format!("--span {arg:?}: bad start {a:?}")))?;
    let end: usize = b.trim().parse().map_err(|_| BadConfig(format!("--span {arg:?}: bad end {b:?}")))?;
    if end <= start {
        return Err(BadConfig(format!("--span {arg:?}: end must exceed start")));
    }
    let tokens = vocab.encode(unescape(text).as_bytes());
    if tokens.len() != end - start {
        return Err(BadConfig(format!("--span {arg:?}: text encodes to {} tokens but the span covers {}", tokens.len(), end - start)));
    }
    Ok(GuidanceTerm::span(start, tokens))
}

/// A single vocabulary token given by its text.
pub fn parse_lexical(arg: &str, vocab: &Vocabulary) -> Result<GuidanceTerm, BadConfig> {
    let text = unescape(arg);
    let id = vocab.id_of(text.as_bytes()).ok_or_else(|| BadConfig(format!("--lexical {arg:?} is not a single vocabulary token")))?;
    Ok(GuidanceTerm::lexical(id))
}

/// Spec file: one term per line, `span START:END:TEXT` or `lexical TOKEN`, optionally
/// followed by `| weight=W` and/or `| negate`.
pub fn parse_file(text: &str, vocab: &Vocabulary) -> Result<Vec<GuidanceTerm>, BadConfig> {
    let mut terms = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut fields = line.split(" | ");
        let head = fields.next().unwrap_or_default();
        let (kind, arg) = head.split_once(' ').ok_or_else(|| BadConfig(format!("guide line {}: {line:?}", i + 1)))?;
        let mut term = match kind {
            "span" => parse_span(arg, vocab)?,
            "lexical" => parse_lexical(arg, vocab)?,
            _ => return Err(BadConfig(format!("guide line {}: unknown term kind {kind:?}", i + 1))),
        };
        for f in fields {
            let f = f.trim();
            if f == "negate" {
                term = term.negate();
            } else if let Some(w) = f.strip_prefix("weight=") {
                let w: f64 = w.parse().map_err(|_| BadConfig(format!("guide line {}: bad weight {w:?}", i + 1)))?;
                term = term.weighted(w);
            } else {
                return Err(BadConfig(format!("guide line {}: unknown modifier {f:?}", i + 1)));
            }
        }
        terms.push(term);
    }
    Ok(terms)
}

/// Builds the spec from flags; `negate` complements every term.
pub fn build_spec(
    spans: &[String],
    lexical: &[String],
    file: Option<&str>,
    negate: bool,
    vocab: &Vocabulary,
) -> Result<GuidanceSpec, BadConfig> {
    let mut terms = Vec::new();
    if let Some(text) = file {
        terms.extend(parse_file(text, vocab)?);
    }
    for s in spans {
        terms.push(parse_span(s, vocab)?);
    }
    for l in lexical {
        terms.push(parse_lexical(l, vocab)?);
    }
    if terms.is_empty() {
        return Err(BadConfig("guide needs at least one --span, --lexical or --guide-file term".into()));
    }
    if negate {
        terms = terms.into_iter().map(GuidanceTerm::negate).collect();
    }
    Ok(GuidanceSpec::new(terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_and_lexical() {
        let v = Vocabulary::byte_level();
        let s = build_spec(&["2:5:abc".into()], &["e".into()], None, false, &v).unwrap();
        assert_eq!(s.terms.len(), 2);
        assert!(parse_span("2:4:abc", &v).is_err());
        assert!(parse_span("4:2:ab", &v).is_err());
        assert!(parse_span("0:2:a\\n", &v).is_ok());
        assert!(parse_lexical("ab", &v).is_err());
        assert!(build_spec(&[], &[], None, false, &v).is_err());
    }

    #[test]
    fn file_terms() {
        let v = Vocabulary::byte_level();
        let t = parse_file("# terms\nspan 0:2:to | weight=2\nlexical q | negate\n", &v).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].weight, 2.0);
        assert!(t[1].negated);
        assert!(parse_file("frob x\n", &v).is_err());
    }
}
