//! Parser for the supported DTD subset: `<!ELEMENT name model>` declarations
//! with sequence/choice/repetition content models, `(#PCDATA)` leaves and
//! `EMPTY`. Attribute lists are skipped (attributes are out of scope);
//! entity and notation declarations are rejected.

use indexmap::IndexMap;
use thiserror::Error;

use super::regex::RegExpr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentModel {
    /// `(#PCDATA)`: text only, no element children.
    Text,
    /// Element content; `EMPTY` is the epsilon model.
    Children(RegExpr),
}

impl ContentModel {
    pub fn is_text(&self) -> bool {
        matches!(self, ContentModel::Text)
    }
}

#[derive(Debug, Clone)]
pub struct Dtd {
    /// Declarations in source order; the first one is the root element
    /// unless a caller overrides it.
    pub elements: IndexMap<String, ContentModel>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DtdError {
    #[error("DTD syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("duplicate declaration of element `{name}`")]
    DuplicateElement { name: String },
    #[error("content model of `{referenced_in}` references undeclared element `{name}`")]
    UndeclaredElement { name: String, referenced_in: String },
    #[error("unsupported declaration `{what}` at byte {pos}")]
    Unsupported { pos: usize, what: String },
    #[error("element `{name}` mixes #PCDATA with element content; not supported")]
    MixedContent { name: String },
    #[error("DTD declares no elements")]
    NoElements,
}

pub fn parse_dtd(text: &str) -> Result<Dtd, DtdError> {
    parse(text, false)
}

/// Like [`parse_dtd`] but references to undeclared elements are errors
/// instead of warnings.
pub fn parse_dtd_strict(text: &str) -> Result<Dtd, DtdError> {
    parse(text, true)
}

impl Dtd {
    pub fn root(&self) -> &str {
        self.elements
            .get_index(0)
            .map(|(name, _)| name.as_str())
            .expect("a parsed DTD declares at least one element")
    }

    pub fn content_model(&self, element: &str) -> Option<&ContentModel> {
        self.elements.get(element)
    }
}

fn parse(text: &str, strict: bool) -> Result<Dtd, DtdError> {
    let mut sc = Scanner { text, pos: 0 };
    let mut elements: IndexMap<String, ContentModel> = IndexMap::new();
    let mut warnings = Vec::new();

    loop {
        sc.skip_trivia()?;
        if sc.at_end() {
            break;
        }
        let decl_pos = sc.pos;
        if sc.eat("<!ELEMENT") {
            sc.require_ws()?;
            let name = sc.name()?;
            sc.require_ws()?;
            let model = parse_model(&mut sc, &name)?;
            sc.skip_ws();
            sc.expect(">")?;
            if elements.insert(name.clone(), model).is_some() {
                return Err(DtdError::DuplicateElement { name });
            }
        } else if sc.eat("<!ATTLIST") {
            // Attributes are out of scope; tolerate the declaration so real
            // DTDs still load, but surface that it was ignored.
            let rest_start = sc.pos;
            sc.skip_until_gt()?;
            let body: String = text[rest_start..sc.pos - 1]
                .split_whitespace()
                .take(1)
                .collect();
            warnings.push(format!("ignoring attribute list for `{body}`"));
        } else {
            let what: String = text[decl_pos..]
                .chars()
                .take_while(|c| !c.is_whitespace() && *c != '>')
                .take(24)
                .collect();
            return Err(DtdError::Unsupported {
                pos: decl_pos,
                what,
            });
        }
    }

    if elements.is_empty() {
        return Err(DtdError::NoElements);
    }

    for (name, model) in &elements {
        if let ContentModel::Children(re) = model {
            for sym in re.symbols() {
                if !elements.contains_key(&sym) {
                    if strict {
                        return Err(DtdError::UndeclaredElement {
                            name: sym,
                            referenced_in: name.clone(),
                        });
                    }
                    warnings.push(format!(
                        "content model of `{name}` references undeclared element `{sym}`"
                    ));
                }
            }
        }
    }

    Ok(Dtd { elements, warnings })
}

fn parse_model(sc: &mut Scanner, element: &str) -> Result<ContentModel, DtdError> {
    if sc.eat("EMPTY") {
        return Ok(ContentModel::Children(RegExpr::Epsilon));
    }
    if sc.eat("ANY") {
        return Err(DtdError::Unsupported {
            pos: sc.pos - 3,
            what: "ANY content".into(),
        });
    }
    if !sc.peek_is('(') {
        return Err(sc.syntax("expected `(`, EMPTY, or ANY in content model"));
    }
    // Peek for a text-only model before committing to a group.
    let save = sc.pos;
    sc.expect("(")?;
    sc.skip_ws();
    if sc.eat("#PCDATA") {
        sc.skip_ws();
        if sc.peek_is('|') {
            return Err(DtdError::MixedContent {
                name: element.to_string(),
            });
        }
        sc.expect(")")?;
        // `(#PCDATA)*` is legal XML; the star is meaningless here.
        sc.eat("*");
        return Ok(ContentModel::Text);
    }
    sc.pos = save;
    let re = parse_postfix(sc, element)?;
    Ok(ContentModel::Children(re))
}

/// `item := ( alt ) postfix? | name postfix?`
fn parse_postfix(sc: &mut Scanner, element: &str) -> Result<RegExpr, DtdError> {
    sc.skip_ws();
    let base = if sc.eat("(") {
        let inner = parse_alt(sc, element)?;
        sc.skip_ws();
        sc.expect(")")?;
        inner
    } else {
        if sc.peek_is('#') {
            return Err(DtdError::MixedContent {
                name: element.to_string(),
            });
        }
        RegExpr::Atom(sc.name()?)
    };
    Ok(match sc.peek() {
        Some('*') => {
            sc.pos += 1;
            RegExpr::star(base)
        }
        Some('+') => {
            sc.pos += 1;
            RegExpr::plus(base)
        }
        Some('?') => {
            sc.pos += 1;
            RegExpr::opt(base)
        }
        _ => base,
    })
}

/// `alt := seq ( | seq )*` — choice binds loosest.
fn parse_alt(sc: &mut Scanner, element: &str) -> Result<RegExpr, DtdError> {
    let mut items = vec![parse_seq(sc, element)?];
    loop {
        sc.skip_ws();
        if sc.eat("|") {
            items.push(parse_seq(sc, element)?);
        } else {
            return Ok(RegExpr::alt(items));
        }
    }
}

/// `seq := item ( , item )*`
fn parse_seq(sc: &mut Scanner, element: &str) -> Result<RegExpr, DtdError> {
    let mut items = vec![parse_postfix(sc, element)?];
    loop {
        sc.skip_ws();
        if sc.eat(",") {
            items.push(parse_postfix(sc, element)?);
        } else {
            return Ok(RegExpr::seq(items));
        }
    }
}

struct Scanner<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.text.len()
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn peek_is(&self, c: char) -> bool {
        self.peek() == Some(c)
    }

    fn eat(&mut self, prefix: &str) -> bool {
        if self.text[self.pos..].starts_with(prefix) {
            self.pos += prefix.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, prefix: &str) -> Result<(), DtdError> {
        if self.eat(prefix) {
            Ok(())
        } else {
            Err(self.syntax(&format!("expected `{prefix}`")))
        }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn require_ws(&mut self) -> Result<(), DtdError> {
        match self.peek() {
            Some(c) if c.is_whitespace() => {
                self.skip_ws();
                Ok(())
            }
            _ => Err(self.syntax("expected whitespace")),
        }
    }

    fn skip_trivia(&mut self) -> Result<(), DtdError> {
        loop {
            self.skip_ws();
            if self.text[self.pos..].starts_with("<!--") {
                match self.text[self.pos..].find("-->") {
                    Some(end) => self.pos += end + 3,
                    None => return Err(self.syntax("unterminated comment")),
                }
            } else {
                return Ok(());
            }
        }
    }

    fn skip_until_gt(&mut self) -> Result<(), DtdError> {
        match self.text[self.pos..].find('>') {
            Some(i) => {
                self.pos += i + 1;
                Ok(())
            }
            None => Err(self.syntax("unterminated declaration")),
        }
    }

    fn name(&mut self) -> Result<String, DtdError> {
        let start = self.pos;
        let mut chars = self.text[self.pos..].char_indices();
        match chars.next() {
            Some((_, c)) if c.is_ascii_alphabetic() || c == '_' => {}
            _ => return Err(self.syntax("expected an element name")),
        }
        let mut len = 1;
        for (i, c) in chars {
            if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.') {
                len = i + c.len_utf8();
            } else {
                len = i;
                break;
            }
        }
        // `len` is the byte length of the name within the remainder.
        let end = if self.text[self.pos + len..]
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        {
            self.text.len()
        } else {
            self.pos + len
        };
        self.pos = end;
        Ok(self.text[start..end].to_string())
    }

    fn syntax(&self, msg: &str) -> DtdError {
        DtdError::Syntax {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }
}
