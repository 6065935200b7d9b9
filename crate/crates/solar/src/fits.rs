//! Reader and writer for single-HDU, two-dimensional FITS images.
//!
//! Only the primary HDU is decoded. Samples are big-endian and physical values
//! follow `BSCALE * stored + BZERO`. When the scaling is the identity the
//! stored value is passed through untouched, so 64-bit real images survive a
//! round trip bit for bit (negative zero and NaN payloads included).

use std::fmt;

use ndarray::Array2;

pub const BLOCK: usize = 2880;
pub const CARD: usize = 80;

/// Keywords the writer generates itself and drops from the user header.
const STRUCTURAL: [&str; 9] = ["SIMPLE", "BITPIX", "NAXIS", "NAXIS1", "NAXIS2", "BSCALE", "BZERO", "BLANK", "END"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitsError {
    #[error("stream length {0} is not a positive multiple of 2880")]
    BadBlock(usize),
    #[error("not a FITS file: first card is not SIMPLE = T")]
    NotFits,
    #[error("unsupported BITPIX {0}")]
    UnsupportedBitpix(i64),
    #[error("unsupported NAXIS {0}: only 2-D images are handled")]
    UnsupportedNaxis(i64),
    #[error("data truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("malformed header card {index}: {reason}")]
    MalformedHeader { index: usize, reason: String },
    #[error("BLANK is not supported for integer images")]
    BlankUnsupported,
    #[error("value {value} at row {row}, col {col} does not fit BITPIX {bitpix}")]
    RangeOverflow { value: f64, row: usize, col: usize, bitpix: i64 },
    #[error("invalid card {keyword:?}: {reason}")]
    InvalidCard { keyword: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bitpix {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Bitpix {
    pub const ALL: [Bitpix; 5] = [Bitpix::U8, Bitpix::I16, Bitpix::I32, Bitpix::F32, Bitpix::F64];

    pub fn from_code(code: i64) -> Result<Bitpix, FitsError> {
        match code {
            8 => Ok(Bitpix::U8),
            16 => Ok(Bitpix::I16),
            32 => Ok(Bitpix::I32),
            -32 => Ok(Bitpix::F32),
            -64 => Ok(Bitpix::F64),
            other => Err(FitsError::UnsupportedBitpix(other)),
        }
    }

    pub fn code(self) -> i64 {
        match self {
            Bitpix::U8 => 8,
            Bitpix::I16 => 16,
            Bitpix::I32 => 32,
            Bitpix::F32 => -32,
            Bitpix::F64 => -64,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Bitpix::U8 => 1,
            Bitpix::I16 => 2,
            Bitpix::I32 | Bitpix::F32 => 4,
            Bitpix::F64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, Bitpix::U8 | Bitpix::I16 | Bitpix::I32)
    }

    fn int_range(self) -> (f64, f64) {
        match self {
            Bitpix::U8 => (0.0, 255.0),
            Bitpix::I16 => (i16::MIN as f64, i16::MAX as f64),
            Bitpix::I32 => (i32::MIN as f64, i32::MAX as f64),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CardValue {
    Logical(bool),
    Integer(i64),
    Real(f64),
    Text(String),
}

impl CardValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            CardValue::Integer(i) => Some(*i as f64),
            CardValue::Real(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            CardValue::Integer(i) => Some(*i),
            _ => None,
        }
    }
}

impl fmt::Display for CardValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CardValue::Logical(true) => f.write_str("T"),
            CardValue::Logical(false) => f.write_str("F"),
            CardValue::Integer(i) => write!(f, "{i}"),
            CardValue::Real(r) => f.write_str(&format_real(*r)),
            CardValue::Text(s) => write!(f, "'{}'", s.replace('\'', "''")),
        }
    }
}

/// One 80-byte header record. Commentary cards (`COMMENT`, `HISTORY`, blank)
/// carry no value and keep their text in `comment`.
#[derive(Debug, Clone, PartialEq)]
pub struct Card {
    pub keyword: String,
    pub value: Option<CardValue>,
    pub comment: Option<String>,
}

impl Card {
    pub fn new(keyword: &str, value: CardValue) -> Card {
        Card {
            keyword: keyword.to_owned(),
            value: Some(value),
            comment: None,
        }
    }

    pub fn with_comment(mut self, comment: &str) -> Card {
        self.comment = Some(comment.to_owned());
        self
    }

    fn encode(&self) -> Result<[u8; CARD], FitsError> {
        let invalid = |reason: &str| FitsError::InvalidCard {
            keyword: self.keyword.clone(),
            reason: reason.to_owned(),
        };
        if self.keyword.len() > 8 || !self.keyword.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'-' || b == b'_') {
            return Err(invalid("keyword must be at most 8 of A-Z 0-9 - _"));
        }
        let mut text = format!("{:<8}", self.keyword);
        match &self.value {
            Some(value) => {
                text.push_str("= ");
                let rendered = value.to_string();
                if matches!(value, CardValue::Text(_)) {
                    // strings start in column 11 and hold at least 8 characters inside the quotes
                    let inner = &rendered[1..rendered.len() - 1];
                    text.push_str(&format!("'{inner:<8}'"));
                } else {
                    text.push_str(&format!("{rendered:>20}"));
                }
                if let Some(c) = &self.comment {
                    text.push_str(" / ");
                    text.push_str(c);
                }
            }
            None => {
                if let Some(c) = &self.comment {
                    text.push_str(c);
                }
            }
        }
        if !text.is_ascii() || text.bytes().any(|b| !(0x20..=0x7e).contains(&b)) {
            return Err(invalid("cards hold printable ASCII only"));
        }
        let value_len = text.find(" / ").unwrap_or(text.len());
        if value_len > CARD {
            return Err(invalid("value does not fit in 80 columns"));
        }
        // an overlong comment is cut rather than rejected
        text.truncate(CARD);
        let mut out = [b' '; CARD];
        out[..text.len()].copy_from_slice(text.as_bytes());
        Ok(out)
    }
}

/// Ordered header cards, `END` excluded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitsHeader {
    pub cards: Vec<Card>,
}

impl FitsHeader {
    pub fn get(&self, keyword: &str) -> Option<&CardValue> {
        header_get(self, keyword)
    }

    pub fn push(&mut self, card: Card) {
        self.cards.push(card);
    }

    /// Cards other than the ones the writer regenerates.
    pub fn user_cards(&self) -> impl Iterator<Item = &Card> {
        self.cards.iter().filter(|c| !STRUCTURAL.contains(&c.keyword.as_str()))
    }
}

/// First card whose keyword matches, if any.
pub fn header_get<'a>(header: &'a FitsHeader, keyword: &str) -> Option<&'a CardValue> {
    header.cards.iter().find(|c| c.keyword == keyword).and_then(|c| c.value.as_ref())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitsImage {
    pub header: FitsHeader,
    /// Physical values, `NAXIS2` rows by `NAXIS1` columns.
    pub pixels: Array2<f64>,
    pub bscale: f64,
    pub bzero: f64,
    /// Set when bytes follow the primary HDU; they are not decoded.
    pub extensions_ignored: bool,
}

impl FitsImage {
    /// Image with identity scaling and a header describing `pixels` as 64-bit reals.
    pub fn new(pixels: Array2<f64>) -> FitsImage {
        let (rows, cols) = pixels.dim();
        FitsImage {
            header: structural_header(Bitpix::F64, rows, cols),
            pixels,
            bscale: 1.0,
            bzero: 0.0,
            extensions_ignored: false,
        }
    }

    pub fn with_scaling(mut self, bscale: f64, bzero: f64) -> FitsImage {
        self.bscale = bscale;
        self.bzero = bzero;
        self
    }

    pub fn rows(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn cols(&self) -> usize {
        self.pixels.ncols()
    }

    fn identity_scaling(&self) -> bool {
        self.bscale == 1.0 && self.bzero == 0.0
    }
}

fn structural_header(bitpix: Bitpix, rows: usize, cols: usize) -> FitsHeader {
    FitsHeader {
        cards: vec![
            Card::new("SIMPLE", CardValue::Logical(true)),
            Card::new("BITPIX", CardValue::Integer(bitpix.code())),
            Card::new("NAXIS", CardValue::Integer(2)),
            Card::new("NAXIS1", CardValue::Integer(cols as i64)),
            Card::new("NAXIS2", CardValue::Integer(rows as i64)),
        ],
    }
}

/// Shortest round-tripping representation with a decimal point and an upper-case exponent.
fn format_real(r: f64) -> String {
    if r.is_nan() || r.is_infinite() {
        // not representable in FITS; readers will reject it, which is the honest outcome
        return format!("{r}");
    }
    let s = format!("{r:E}");
    let (mantissa, exp) = s.split_once('E').expect("E format");
    let mantissa = if mantissa.contains('.') {
        mantissa.to_owned()
    } else {
        format!("{mantissa}.0")
    };
    format!("{mantissa}E{exp}")
}

fn parse_value(raw: &str) -> Result<(Option<CardValue>, Option<String>), String> {
    let trimmed = raw.trim_start();
    if let Some(rest) = trimmed.strip_prefix('\'') {
        let mut text = String::new();
        let mut chars = rest.chars().peekable();
        loop {
            match chars.next() {
                None => return Err("unterminated string".into()),
                Some('\'') if chars.peek() == Some(&'\'') => {
                    chars.next();
                    text.push('\'');
                }
                Some('\'') => break,
                Some(c) => text.push(c),
            }
        }
        let tail: String = chars.collect();
        let comment = tail.trim_start().strip_prefix('/').map(|c| c.trim().to_owned());
        return Ok((Some(CardValue::Text(text.trim_end().to_owned())), comment));
    }
    let (value, comment) = match trimmed.split_once('/') {
        Some((v, c)) => (v.trim(), Some(c.trim().to_owned())),
        None => (trimmed.trim(), None),
    };
    let parsed = match value {
        "" => None,
        "T" => Some(CardValue::Logical(true)),
        "F" => Some(CardValue::Logical(false)),
        v => {
            if let Ok(i) = v.parse::<i64>() {
                Some(CardValue::Integer(i))
            } else if let Ok(r) = v.replace('D', "E").parse::<f64>() {
                Some(CardValue::Real(r))
            } else {
                return Err(format!("cannot parse value {v:?}"));
            }
        }
    };
    Ok((parsed, comment))
}

fn parse_card(raw: &[u8], index: usize) -> Result<Card, FitsError> {
    let malformed = |reason: String| FitsError::MalformedHeader { index, reason };
    if raw.iter().any(|b| !(0x20..=0x7e).contains(b)) {
        return Err(malformed("non-printable byte".into()));
    }
    let text = std::str::from_utf8(raw).expect("checked ASCII");
    let keyword = text[..8].trim_end().to_owned();
    if &text[8..10] == "= " {
        let (value, comment) = parse_value(&text[10..]).map_err(malformed)?;
        Ok(Card { keyword, value, comment })
    } else {
        let rest = text[8..].trim_end();
        Ok(Card {
            keyword,
            value: None,
            comment: (!rest.is_empty()).then(|| rest.to_owned()),
        })
    }
}

fn required_int(header: &FitsHeader, keyword: &str) -> Result<i64, FitsError> {
    header_get(header, keyword)
        .and_then(CardValue::as_i64)
        .ok_or_else(|| FitsError::MalformedHeader {
            index: header.cards.len(),
            reason: format!("missing integer {keyword}"),
        })
}

fn padded(len: usize) -> usize {
    len.div_ceil(BLOCK) * BLOCK
}

pub fn read_fits(bytes: &[u8]) -> Result<FitsImage, FitsError> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(BLOCK) {
        return Err(FitsError::BadBlock(bytes.len()));
    }
    let mut header = FitsHeader::default();
    let mut end = None;
    for (index, raw) in bytes.chunks_exact(CARD).enumerate() {
        if index == 0 {
            let first = parse_card(raw, 0).map_err(|_| FitsError::NotFits)?;
            if first.keyword != "SIMPLE" || first.value != Some(CardValue::Logical(true)) {
                return Err(FitsError::NotFits);
            }
        }
        if raw[..8] == *b"END     " {
            end = Some(index);
            break;
        }
        header.push(parse_card(raw, index)?);
    }
    let end = end.ok_or(FitsError::MalformedHeader {
        index: bytes.len() / CARD,
        reason: "no END card".into(),
    })?;
    let data_start = padded((end + 1) * CARD);

    let bitpix = Bitpix::from_code(required_int(&header, "BITPIX")?)?;
    let naxis = required_int(&header, "NAXIS")?;
    if naxis != 2 {
        return Err(FitsError::UnsupportedNaxis(naxis));
    }
    let dim = |keyword: &str| -> Result<usize, FitsError> {
        let v = required_int(&header, keyword)?;
        usize::try_from(v).ok().filter(|&n| n >= 1).ok_or_else(|| FitsError::MalformedHeader {
            index: 0,
            reason: format!("{keyword} = {v} must be at least 1"),
        })
    };
    let cols = dim("NAXIS1")?;
    let rows = dim("NAXIS2")?;
    if bitpix.is_integer() && header_get(&header, "BLANK").is_some() {
        return Err(FitsError::BlankUnsupported);
    }
    let scale = |keyword: &str, default: f64| -> Result<f64, FitsError> {
        match header_get(&header, keyword) {
            None => Ok(default),
            Some(v) => v.as_f64().ok_or_else(|| FitsError::MalformedHeader {
                index: 0,
                reason: format!("{keyword} is not numeric"),
            }),
        }
    };
    let bscale = scale("BSCALE", 1.0)?;
    let bzero = scale("BZERO", 0.0)?;

    let available = bytes.len().saturating_sub(data_start);
    let needed = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(bitpix.bytes()))
        .ok_or(FitsError::Truncated {
            needed: usize::MAX,
            available,
        })?;
    if needed > available {
        return Err(FitsError::Truncated { needed, available });
    }
    let data = &bytes[data_start..data_start + needed];
    let identity = bscale == 1.0 && bzero == 0.0;
    let physical = |stored: f64| if identity { stored } else { bscale * stored + bzero };
    let values: Vec<f64> = match bitpix {
        Bitpix::U8 => data.iter().map(|&b| physical(b as f64)).collect(),
        Bitpix::I16 => data
            .chunks_exact(2)
            .map(|c| physical(i16::from_be_bytes([c[0], c[1]]) as f64))
            .collect(),
        Bitpix::I32 => data
            .chunks_exact(4)
            .map(|c| physical(i32::from_be_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        Bitpix::F32 => data
            .chunks_exact(4)
            .map(|c| physical(f32::from_be_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        Bitpix::F64 => data
            .chunks_exact(8)
            .map(|c| physical(f64::from_be_bytes(c.try_into().unwrap())))
            .collect(),
    };
    let pixels = Array2::from_shape_vec((rows, cols), values).expect("length checked");
    Ok(FitsImage {
        header,
        pixels,
        bscale,
        bzero,
        extensions_ignored: bytes.len() > data_start + padded(needed),
    })
}

pub fn write_fits(image: &FitsImage, bitpix: Bitpix) -> Result<Vec<u8>, FitsError> {
    let (rows, cols) = image.pixels.dim();
    let mut cards = structural_header(bitpix, rows, cols).cards;
    if image.bscale != 1.0 {
        cards.push(Card::new("BSCALE", CardValue::Real(image.bscale)));
    }
    if image.bzero != 0.0 {
        cards.push(Card::new("BZERO", CardValue::Real(image.bzero)));
    }
    cards.extend(image.header.user_cards().cloned());

    let mut out = Vec::with_capacity(padded((cards.len() + 1) * CARD) + padded(rows * cols * bitpix.bytes()));
    for card in &cards {
        out.extend_from_slice(&card.encode()?);
    }
    out.extend_from_slice(&format!("{:<80}", "END").into_bytes());
    out.resize(padded(out.len()), b' ');

    let identity = image.identity_scaling();
    let (lo, hi) = bitpix.int_range();
    for ((row, col), &value) in image.pixels.indexed_iter() {
        let overflow = || FitsError::RangeOverflow {
            value,
            row,
            col,
            bitpix: bitpix.code(),
        };
        let stored = if identity { value } else { (value - image.bzero) / image.bscale };
        if bitpix.is_integer() {
            let s = stored.round();
            if !(lo..=hi).contains(&s) {
                return Err(overflow());
            }
            match bitpix {
                Bitpix::U8 => out.push(s as u8),
                Bitpix::I16 => out.extend_from_slice(&(s as i16).to_be_bytes()),
                _ => out.extend_from_slice(&(s as i32).to_be_bytes()),
            }
        } else if bitpix == Bitpix::F32 {
            let s = stored as f32;
            if s.is_infinite() && stored.is_finite() {
                return Err(overflow());
            }
            out.extend_from_slice(&s.to_be_bytes());
        } else {
            out.extend_from_slice(&stored.to_be_bytes());
        }
    }
    out.resize(padded(out.len()), 0);
    Ok(out)
}
