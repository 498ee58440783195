//! Coordinate-aware tokenization.
//!
//! Prompts are word-level. Parenthesized coordinate expressions such as
//! `(12.4, -3.1)` or `(1.0, 2.0, 0.5)` are detected by [`scan_coordinates`] and
//! replaced by an indicator token followed by a spatial slot that the model
//! fills with a positional encoding. Everything else is looked up in a closed
//! [`Vocab`]; words made only of digits and `.-(),` are split into single
//! characters so the digit-token baseline can read and write numbers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::geometry::Coordinate3D;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const IND_TOKEN: &str = "<ind>";
pub const MAX_VOCAB: usize = 512;

const NUMERIC_CHARS: &str = "0123456789.-(),";

fn is_numeric_word(w: &str) -> bool {
    !w.is_empty() && w.chars().all(|c| NUMERIC_CHARS.contains(c))
}

/// Word table `V`; the indicator is the extra id `len()` of `V' = V ∪ {IND}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens, then every numeric character, then corpus words in
    /// order of first appearance. Coordinate spans contribute no words.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(NUMERIC_CHARS.chars().map(String::from));
        let mut index: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for text in texts {
            for word in text.split_whitespace() {
                if is_numeric_word(word) || index.contains_key(word) {
                    continue;
                }
                if word == IND_TOKEN {
                    return Err(Error::Tokens(format!("`{IND_TOKEN}` is reserved for the indicator")));
                }
                index.insert(word.to_string(), tokens.len());
                tokens.push(word.to_string());
            }
        }
        if tokens.len() > MAX_VOCAB {
            return Err(Error::Tokens(format!("vocabulary has {} entries (limit {MAX_VOCAB})", tokens.len())));
        }
        Ok(Self { tokens, index })
    }

    /// `|V|`, excluding the indicator.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `|V'|`: output width of the language head.
    pub fn extended_len(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn ind(&self) -> usize {
        self.tokens.len()
    }

    /// Word id, or [`UNK`].
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id == self.ind() {
            Some(IND_TOKEN)
        } else {
            self.tokens.get(id).map(String::as_str)
        }
    }

    /// Splits a coordinate-free text segment into token ids.
    pub fn tokenize(&self, segment: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for word in segment.split_whitespace() {
            if is_numeric_word(word) {
                ids.extend(word.chars().map(|c| self.id(c.encode_utf8(&mut [0; 4]))));
            } else {
                ids.push(self.id(word));
            }
        }
        ids
    }

    pub fn to_json(&self) -> Result<String> {
        let map: IndexMap<&str, usize> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: IndexMap<String, usize> = serde_json::from_str(text)?;
        let mut tokens = vec![None; map.len()];
        for (tok, id) in &map {
            if tok == IND_TOKEN {
                return Err(Error::Tokens("vocabulary file must not contain the indicator".into()));
            }
            let slot = tokens.get_mut(*id).ok_or_else(|| Error::Tokens(format!("id {id} out of range")))?;
            if slot.replace(tok.clone()).is_some() {
                return Err(Error::Tokens(format!("id {id} assigned twice")));
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("ids form a permutation")).collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Tokens(format!("reserved token `{r}` must have id {i}")));
            }
        }
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Ok(Self { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).at(path)?)
    }
}

/// One position of a model input or target sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StreamElement {
    Text(usize),
    Indicator,
    Spatial { coord: Coordinate3D, bev: bool },
    /// Slot filled from the ego-status record; only in the leading prefix.
    EgoStatus,
}

/// Validated sequence of [`StreamElement`]s: every spatial slot sits right
/// after an indicator, every indicator is followed by a spatial slot, and ego
/// slots only appear before anything else.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenStream {
    elements: Vec<StreamElement>,
}

impl TokenStream {
    pub fn new(elements: Vec<StreamElement>) -> Result<Self> {
        let mut prefix = true;
        for (i, el) in elements.iter().enumerate() {
            match el {
                StreamElement::EgoStatus if !prefix => {
                    return Err(Error::Tokens(format!("ego slot at position {i} is outside the prefix")));
                }
                StreamElement::EgoStatus => {}
                _ => prefix = false,
            }
            let prev_is_ind = i > 0 && elements[i - 1] == StreamElement::Indicator;
            let next_is_spatial = matches!(elements.get(i + 1), Some(StreamElement::Spatial { .. }));
            match el {
                StreamElement::Spatial { .. } if !prev_is_ind => {
                    return Err(Error::Tokens(format!("spatial slot at position {i} lacks an indicator")));
                }
                StreamElement::Indicator if !next_is_spatial => {
                    return Err(Error::Tokens(format!("indicator at position {i} is not followed by a spatial slot")));
                }
                _ => {}
            }
        }
        Ok(Self { elements })
    }

    pub fn builder() -> StreamBuilder {
        StreamBuilder::default()
    }

    pub fn elements(&self) -> &[StreamElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn indicator_count(&self) -> usize {
        self.elements.iter().filter(|e| matches!(e, StreamElement::Indicator)).count()
    }

    pub fn spatial_count(&self) -> usize {
        self.elements.iter().filter(|e| matches!(e, StreamElement::Spatial { .. })).count()
    }

    pub fn ego_count(&self) -> usize {
        self.elements.iter().take_while(|e| matches!(e, StreamElement::EgoStatus)).count()
    }

    /// Concatenation; the result is re-validated.
    pub fn concat(&self, other: &TokenStream) -> Result<TokenStream> {
        let mut elements = self.elements.clone();
        elements.extend_from_slice(&other.elements);
        TokenStream::new(elements)
    }
}

/// Append-only construction that cannot break stream invariants.
#[derive(Clone, Debug, Default)]
pub struct StreamBuilder {
    elements: Vec<StreamElement>,
}

impl StreamBuilder {
    pub fn ego(mut self, slots: usize) -> Result<Self> {
        if self.elements.iter().any(|e| !matches!(e, StreamElement::EgoStatus)) {
            return Err(Error::Tokens("ego slots must precede all other elements".into()));
        }
        self.elements.extend(std::iter::repeat(StreamElement::EgoStatus).take(slots));
        Ok(self)
    }

    pub fn text(mut self, id: usize) -> Self {
        self.elements.push(StreamElement::Text(id));
        self
    }

    pub fn texts(mut self, ids: impl IntoIterator<Item = usize>) -> Self {
        self.elements.extend(ids.into_iter().map(StreamElement::Text));
        self
    }

    pub fn coordinate(mut self, coord: Coordinate3D, bev: bool) -> Self {
        self.elements.push(StreamElement::Indicator);
        self.elements.push(StreamElement::Spatial { coord, bev });
        self
    }

    pub fn build(self) -> TokenStream {
        TokenStream { elements: self.elements }
    }
}

/// A coordinate expression found in text.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordSpan {
    /// Byte offsets into the scanned text, `start..end`.
    pub start: usize,
    pub end: usize,
    pub coord: Coordinate3D,
    /// Two components: a ground-plane coordinate.
    pub bev: bool,
}

fn coordinate_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"([+-]?\d+(?:\.\d+)?)";
        Regex::new(&format!(r"\(\s*{num}\s*,\s*{num}\s*(?:,\s*{num}\s*)?\)")).expect("static pattern")
    })
}

/// Finds `(x, y)` and `(x, y, z)` expressions, left to right.
pub fn scan_coordinates(text: &str) -> Vec<CoordSpan> {
    coordinate_regex()
        .captures_iter(text)
        .filter_map(|cap| {
            let whole = cap.get(0)?;
            let parse = |i: usize| cap.get(i).and_then(|m| m.as_str().parse::<f64>().ok());
            let (x, y) = (parse(1)?, parse(2)?);
            let z = parse(3);
            Some(CoordSpan {
                start: whole.start(),
                end: whole.end(),
                coord: Coordinate3D::new(x, y, z.unwrap_or(0.0)),
                bev: z.is_none(),
            })
        })
        .collect()
}

/// Replaces each span with `[Indicator, Spatial]`; other text becomes word tokens.
pub fn build_stream(text: &str, spans: &[CoordSpan], vocab: &Vocab) -> Result<TokenStream> {
    let mut builder = TokenStream::builder();
    let mut cursor = 0;
    for span in spans {
        if span.start < cursor || span.end < span.start || span.end > text.len() {
            return Err(Error::Tokens(format!("span {}..{} is out of order or out of bounds", span.start, span.end)));
        }
        let segment = text
            .get(cursor..span.start)
            .ok_or_else(|| Error::Tokens(format!("span start {} is not a character boundary", span.start)))?;
        builder = builder.texts(vocab.tokenize(segment)).coordinate(span.coord, span.bev);
        cursor = span.end;
    }
    let tail = text.get(cursor..).ok_or_else(|| Error::Tokens("span end is not a character boundary".into()))?;
    Ok(builder.texts(vocab.tokenize(tail)).build())
}

/// Scan then build.
pub fn encode_prompt(text: &str, vocab: &Vocab) -> Result<TokenStream> {
    build_stream(text, &scan_coordinates(text), vocab)
}

pub const TARGET_PREAMBLE: &str = "trajectory :";
pub const DEFAULT_HORIZON: usize = 6;

/// `preamble, H × [Indicator, Spatial(bev)], EOS`.
pub fn build_target_stream(waypoints: &[Coordinate3D], horizon: usize, vocab: &Vocab) -> Result<TokenStream> {
    if waypoints.len() != horizon {
        return Err(Error::Tokens(format!("expected {horizon} waypoints, got {}", waypoints.len())));
    }
    let mut b = TokenStream::builder().texts(vocab.tokenize(TARGET_PREAMBLE));
    for w in waypoints {
        b = b.coordinate(Coordinate3D::bev(w.x, w.y), true);
    }
    Ok(b.text(EOS).build())
}

/// Digit-token form of the same target: coordinates spelled out as text.
pub fn build_digit_target_stream(waypoints: &[Coordinate3D], horizon: usize, vocab: &Vocab) -> Result<TokenStream> {
    if waypoints.len() != horizon {
        return Err(Error::Tokens(format!("expected {horizon} waypoints, got {}", waypoints.len())));
    }
    let mut text = String::from(TARGET_PREAMBLE);
    for w in waypoints {
        text.push(' ');
        text.push_str(&format_coordinate(Coordinate3D::bev(w.x, w.y), true));
    }
    Ok(TokenStream::builder().texts(vocab.tokenize(&text)).text(EOS).build())
}

/// `(x, y)` or `(x, y, z)` at 0.1 m resolution.
pub fn format_coordinate(c: Coordinate3D, bev: bool) -> String {
    let one = |v: f64| {
        let t = format!("{v:.1}");
        if t == "-0.0" {
            "0.0".to_string()
        } else {
            t
        }
    };
    let mut s = String::new();
    if bev {
        let _ = write!(s, "({}, {})", one(c.x), one(c.y));
    } else {
        let _ = write!(s, "({}, {}, {})", one(c.x), one(c.y), one(c.z));
    }
    s
}

enum Piece<'a> {
    Word(&'a str),
    Unit(String),
}

/// Joins pieces with single spaces, except between adjacent numeric
/// characters of one spelled-out number (no space, but a space after `,` and
/// between `)` and `(`).
fn join_pieces(pieces: &[Piece<'_>]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for piece in pieces {
        let (text, glued) = match piece {
            Piece::Word(w) => (*w, is_numeric_word(w)),
            Piece::Unit(u) => (u.as_str(), false),
        };
        let attach = match prev {
            Some(p) if glued && is_numeric_word(p) => p != "," && !(p == ")" && text == "("),
            _ => false,
        };
        if prev.is_some() && !attach {
            out.push(' ');
        }
        out.push_str(text);
        prev = Some(if glued { text } else { "" });
    }
    out
}

fn is_control(id: usize) -> bool {
    matches!(id, PAD | BOS | EOS)
}

/// Text form of a stream; coordinates reprinted at 0.1 m.
pub fn render_stream(stream: &TokenStream, vocab: &Vocab) -> String {
    let pieces: Vec<Piece<'_>> = stream
        .elements()
        .iter()
        .filter_map(|el| match *el {
            StreamElement::Text(id) if !is_control(id) => vocab.token(id).map(Piece::Word),
            StreamElement::Spatial { coord, bev } => Some(Piece::Unit(format_coordinate(coord, bev))),
            _ => None,
        })
        .collect();
    join_pieces(&pieces)
}

/// One generated step: a token id and, for the indicator, the decoded coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emitted {
    pub id: usize,
    pub coord: Option<Coordinate3D>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedOutput {
    pub text: String,
    /// Indicators that had no coordinate (rendered as `(?)`).
    pub missing_coordinates: usize,
}

/// Text of a generated sequence; each indicator prints its coordinate as `(x, y)`.
pub fn render_output(emitted: &[Emitted], vocab: &Vocab) -> RenderedOutput {
    let mut missing = 0;
    let pieces: Vec<Piece<'_>> = emitted
        .iter()
        .filter_map(|e| {
            if e.id == vocab.ind() {
                Some(Piece::Unit(match e.coord {
                    Some(c) => format_coordinate(c, true),
                    None => {
                        missing += 1;
                        "(?)".to_string()
                    }
                }))
            } else if is_control(e.id) {
                None
            } else {
                vocab.token(e.id).map(Piece::Word)
            }
        })
        .collect();
    RenderedOutput { text: join_pieces(&pieces), missing_coordinates: missing }
}
