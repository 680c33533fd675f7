//! Event tokenizer for the supported XML subset: elements and character
//! data only, UTF-8, no attributes. Tags and text become a forward-only
//! stream of [`XmlEvent`]s; nesting is checked downstream by the validator.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum XmlEvent {
    Start(String),
    End(String),
    /// Character data, entity references already decoded.
    Text(String),
}

impl XmlEvent {
    /// Serialized byte length; used for buffer byte estimates.
    pub fn byte_size(&self) -> usize {
        match self {
            XmlEvent::Start(t) => t.len() + 2,
            XmlEvent::End(t) => t.len() + 3,
            XmlEvent::Text(s) => s.len(),
        }
    }
}

impl fmt::Display for XmlEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        write_event(self, &mut out);
        f.write_str(&out)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed XML at byte {offset}: {detail}")]
pub struct TokenError {
    pub offset: usize,
    pub detail: String,
}

/// Escapes `&`, `<` and `>` for output as character data.
pub fn escape_text(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            c => out.push(c),
        }
    }
}

/// Serializes one event. Elements are never self-closed so that replayed
/// buffers are byte-identical to pass-through copies.
pub fn write_event(ev: &XmlEvent, out: &mut String) {
    match ev {
        XmlEvent::Start(tag) => {
            out.push('<');
            out.push_str(tag);
            out.push('>');
        }
        XmlEvent::End(tag) => {
            out.push_str("</");
            out.push_str(tag);
            out.push('>');
        }
        XmlEvent::Text(s) => escape_text(s, out),
    }
}

/// Pull tokenizer over a complete in-memory document.
pub struct Tokenizer<'a> {
    input: &'a str,
    pos: usize,
    /// End event still owed for a self-closing tag.
    pending_end: Option<String>,
    failed: bool,
}

impl<'a> Tokenizer<'a> {
    pub fn new(input: &'a str) -> Tokenizer<'a> {
        let mut t = Tokenizer {
            input,
            pos: 0,
            pending_end: None,
            failed: false,
        };
        t.skip_ws();
        // An optional XML declaration may lead the document.
        if t.rest().starts_with("<?xml") {
            match t.rest().find("?>") {
                Some(i) => t.pos += i + 2,
                None => t.pos = input.len(), // next() will report the error
            }
        }
        t
    }

    fn rest(&self) -> &'a str {
        &self.input[self.pos..]
    }

    fn peek(&self) -> Option<u8> {
        self.input.as_bytes().get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        let bytes = self.input.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn err<T>(&mut self, offset: usize, detail: impl Into<String>) -> Option<Result<T, TokenError>> {
        self.failed = true;
        Some(Err(TokenError {
            offset,
            detail: detail.into(),
        }))
    }

    fn read_name(&mut self) -> Result<String, TokenError> {
        let bytes = self.input.as_bytes();
        let start = self.pos;
        if self
            .peek()
            .is_some_and(|b| b.is_ascii_alphabetic() || b == b'_')
        {
            self.pos += 1;
            while self
                .peek()
                .is_some_and(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
            {
                self.pos += 1;
            }
            Ok(std::str::from_utf8(&bytes[start..self.pos])
                .expect("name bytes are ASCII")
                .to_string())
        } else {
            Err(TokenError {
                offset: start,
                detail: "expected an element name".into(),
            })
        }
    }

    /// Decodes one entity reference; `pos` is at `&`.
    fn read_entity(&mut self) -> Result<char, TokenError> {
        let start = self.pos;
        let rest = self.rest();
        let Some(semi) = rest[..rest.len().min(12)].find(';') else {
            return Err(TokenError {
                offset: start,
                detail: "unterminated entity reference".into(),
            });
        };
        let name = &rest[1..semi];
        self.pos += semi + 1;
        match name {
            "amp" => Ok('&'),
            "lt" => Ok('<'),
            "gt" => Ok('>'),
            "quot" => Ok('"'),
            "apos" => Ok('\''),
            _ => {
                let code = name
                    .strip_prefix("#x")
                    .map(|h| u32::from_str_radix(h, 16))
                    .or_else(|| name.strip_prefix('#').map(|d| d.parse::<u32>()))
                    .and_then(Result::ok)
                    .and_then(char::from_u32);
                code.ok_or(TokenError {
                    offset: start,
                    detail: format!("unknown entity `&{name};`"),
                })
            }
        }
    }

    fn next_tag(&mut self) -> Option<Result<XmlEvent, TokenError>> {
        let tag_start = self.pos;
        self.pos += 1; // consume `<`
        match self.peek() {
            Some(b'/') => {
                self.pos += 1;
                let name = match self.read_name() {
                    Ok(n) => n,
                    Err(e) => return self.err(e.offset, e.detail),
                };
                self.skip_ws();
                if self.peek() != Some(b'>') {
                    return self.err(self.pos, format!("malformed closing tag `</{name}`"));
                }
                self.pos += 1;
                Some(Ok(XmlEvent::End(name)))
            }
            Some(b'!') => self.err(
                tag_start,
                "comments, CDATA sections, and DOCTYPE declarations are not supported",
            ),
            Some(b'?') => self.err(
                tag_start,
                "processing instructions are only allowed as the leading XML declaration",
            ),
            _ => {
                let name = match self.read_name() {
                    Ok(n) => n,
                    Err(e) => return self.err(e.offset, e.detail),
                };
                match self.peek() {
                    Some(b'>') => {
                        self.pos += 1;
                        Some(Ok(XmlEvent::Start(name)))
                    }
                    Some(b'/') if self.input.as_bytes().get(self.pos + 1) == Some(&b'>') => {
                        self.pos += 2;
                        self.pending_end = Some(name.clone());
                        Some(Ok(XmlEvent::Start(name)))
                    }
                    Some(b) if b.is_ascii_whitespace() => self.err(
                        self.pos,
                        format!(
                            "attributes are not supported (in `<{name}`); \
                             the data model has element and text nodes only"
                        ),
                    ),
                    _ => self.err(self.pos, format!("malformed tag `<{name}`")),
                }
            }
        }
    }

    fn next_text(&mut self) -> Option<Result<XmlEvent, TokenError>> {
        let mut text = String::new();
        let mut all_ws = true;
        loop {
            match self.peek() {
                None | Some(b'<') => break,
                Some(b'&') => {
                    match self.read_entity() {
                        Ok(c) => {
                            all_ws &= c.is_whitespace();
                            text.push(c);
                        }
                        Err(e) => return self.err(e.offset, e.detail),
                    };
                }
                Some(b) => {
                    all_ws &= b.is_ascii_whitespace();
                    // Take the full UTF-8 scalar, not just one byte.
                    let c = self.rest().chars().next().expect("non-empty rest");
                    text.push(c);
                    self.pos += c.len_utf8();
                }
            }
        }
        if all_ws {
            // Whitespace-only runs between elements are formatting, not data.
            None
        } else {
            Some(Ok(XmlEvent::Text(text)))
        }
    }
}

impl Iterator for Tokenizer<'_> {
    type Item = Result<XmlEvent, TokenError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if let Some(name) = self.pending_end.take() {
            return Some(Ok(XmlEvent::End(name)));
        }
        loop {
            match self.peek() {
                None => return None,
                Some(b'<') => return self.next_tag(),
                _ => match self.next_text() {
                    Some(item) => return Some(item),
                    None => continue, // skipped whitespace; look again
                },
            }
        }
    }
}

/// Tokenizes a whole document into a vector.
pub fn tokenize(input: &str) -> Result<Vec<XmlEvent>, TokenError> {
    Tokenizer::new(input).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(input: &str) -> Vec<XmlEvent> {
        tokenize(input).expect("tokenizes")
    }

    fn s(t: &str) -> XmlEvent {
        XmlEvent::Start(t.into())
    }
    fn e(t: &str) -> XmlEvent {
        XmlEvent::End(t.into())
    }
    fn x(t: &str) -> XmlEvent {
        XmlEvent::Text(t.into())
    }

    #[test]
    fn elements_and_text() {
        assert_eq!(
            ev("<a><b>x</b></a>"),
            vec![s("a"), s("b"), x("x"), e("b"), e("a")]
        );
    }

    #[test]
    fn self_closing_tag_opens_and_closes() {
        assert_eq!(ev("<a><b/></a>"), vec![s("a"), s("b"), e("b"), e("a")]);
    }

    #[test]
    fn inter_element_whitespace_is_dropped_but_data_whitespace_kept() {
        assert_eq!(
            ev("<a>\n  <b> x y </b>\n</a>"),
            vec![s("a"), s("b"), x(" x y "), e("b"), e("a")]
        );
    }

    #[test]
    fn entities_decode() {
        assert_eq!(
            ev("<a>&lt;tag&gt; &amp; &quot;q&quot; &apos;s&apos; &#65;&#x42;</a>"),
            vec![s("a"), x("<tag> & \"q\" 's' AB"), e("a")]
        );
    }

    #[test]
    fn unknown_entity_is_an_error() {
        let err = tokenize("<a>&nbsp;</a>").unwrap_err();
        assert_eq!(err.offset, 3);
        assert!(err.detail.contains("&nbsp;"));
    }

    #[test]
    fn attributes_are_rejected_with_offset() {
        let err = tokenize("<a b=\"1\"/>").unwrap_err();
        assert!(err.detail.contains("attributes are not supported"));
        assert_eq!(err.offset, 2);
    }

    #[test]
    fn comments_and_doctype_are_rejected() {
        assert!(tokenize("<!-- hi --><a></a>")
            .unwrap_err()
            .detail
            .contains("not supported"));
        assert!(tokenize("<!DOCTYPE a><a></a>").is_err());
    }

    #[test]
    fn xml_declaration_is_skipped() {
        assert_eq!(
            ev("<?xml version=\"1.0\"?>\n<a></a>"),
            vec![s("a"), e("a")]
        );
    }

    #[test]
    fn malformed_tags_report_positions() {
        assert!(tokenize("<a").is_err());
        assert!(tokenize("< a>").is_err());
        assert!(tokenize("<a></a >x").is_ok(), "space before > in end tag ok");
        assert!(tokenize("<a>text").is_ok(), "nesting checked downstream");
    }

    #[test]
    fn escaping_round_trips() {
        let evs = ev("<a>a &lt; b &amp; c</a>");
        let mut out = String::new();
        for e in &evs {
            write_event(e, &mut out);
        }
        assert_eq!(out, "<a>a &lt; b &amp; c</a>");
    }

    #[test]
    fn multibyte_text_survives() {
        assert_eq!(ev("<a>héllo wörld</a>"), vec![s("a"), x("héllo wörld"), e("a")]);
    }
}
