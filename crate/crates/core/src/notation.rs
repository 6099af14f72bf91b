//! Text notation for multiple-CE accelerators.
//!
//! ```text
//! {L1-L4: CE1, L5-Last: CE2-CE4}
//! ```
//!
//! Each mapping assigns a contiguous layer range to either one CE or a
//! range of CEs that process the layers tile-pipelined (round-robin when the
//! range has more layers than CEs).

use std::fmt;

use serde::Serialize;

use crate::descriptors::CnnModel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum BlockKind {
    SingleCe(usize),
    PipelinedCes(usize, usize),
}

impl BlockKind {
    pub fn ce_ids(&self) -> std::ops::RangeInclusive<usize> {
        match *self {
            BlockKind::SingleCe(id) => id..=id,
            BlockKind::PipelinedCes(lo, hi) => lo..=hi,
        }
    }

    pub fn ce_count(&self) -> usize {
        match *self {
            BlockKind::SingleCe(_) => 1,
            BlockKind::PipelinedCes(lo, hi) => hi - lo + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct BlockSketch {
    pub layer_lo: usize,
    pub layer_hi: usize,
    /// Upper bound was written as `Last`.
    pub hi_is_last: bool,
    pub kind: BlockKind,
}

impl BlockSketch {
    pub fn num_layers(&self) -> usize {
        self.layer_hi - self.layer_lo + 1
    }

    /// Round-robin passes: ceil(layers / CEs).
    pub fn passes(&self) -> usize {
        self.num_layers().div_ceil(self.kind.ce_count())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct AcceleratorSketch {
    pub blocks: Vec<BlockSketch>,
    pub inter_segment_pipelining: bool,
}

impl AcceleratorSketch {
    pub fn num_layers(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.layer_hi)
    }

    pub fn ce_count(&self) -> usize {
        self.blocks.iter().map(|b| b.kind.ce_count()).sum()
    }

    pub fn with_inter_segment_pipelining(mut self, on: bool) -> Self {
        self.inter_segment_pipelining = on;
        self
    }
}

impl fmt::Display for AcceleratorSketch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "L{}", b.layer_lo)?;
            if b.hi_is_last {
                f.write_str("-Last")?;
            } else if b.layer_hi != b.layer_lo {
                write!(f, "-L{}", b.layer_hi)?;
            }
            match b.kind {
                BlockKind::SingleCe(id) => write!(f, ": CE{id}")?,
                BlockKind::PipelinedCes(lo, hi) => write!(f, ": CE{lo}-CE{hi}")?,
            }
        }
        f.write_str("}")
    }
}

pub fn format_accelerator(sketch: &AcceleratorSketch) -> String {
    sketch.to_string()
}

pub fn parse_accelerator(text: &str, cnn: &CnnModel) -> Result<AcceleratorSketch> {
    parse_for_depth(text, cnn.num_layers())
}

/// Parses against a CNN of `depth` layers.
pub fn parse_for_depth(text: &str, depth: usize) -> Result<AcceleratorSketch> {
    let raw = Parser::new(text).sketch()?;
    resolve(raw, depth)
}

enum Upper {
    Index(usize),
    Last,
}

struct RawMapping {
    lo: usize,
    hi: Option<Upper>,
    ce_lo: usize,
    ce_hi: Option<usize>,
    column: usize,
}

struct Parser {
    /// Non-whitespace characters with their 1-based column.
    chars: Vec<(char, usize)>,
    pos: usize,
    end_column: usize,
}

impl Parser {
    fn new(text: &str) -> Self {
        let chars: Vec<(char, usize)> = text
            .chars()
            .enumerate()
            .filter(|(_, c)| !c.is_whitespace())
            .map(|(i, c)| (c, i + 1))
            .collect();
        Parser {
            chars,
            pos: 0,
            end_column: text.chars().count() + 1,
        }
    }

    fn column(&self) -> usize {
        self.chars.get(self.pos).map_or(self.end_column, |&(_, c)| c)
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|&(c, _)| c)
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            column: self.column(),
            message: message.into(),
        })
    }

    fn describe_next(&self) -> String {
        match self.peek() {
            Some(c) => format!("'{c}'"),
            None => "end of input".to_string(),
        }
    }

    fn expect(&mut self, want: char) -> Result<()> {
        if self.peek() == Some(want) {
            self.pos += 1;
            Ok(())
        } else {
            self.error(format!("expected '{want}', found {}", self.describe_next()))
        }
    }

    fn keyword(&mut self, word: &str) -> bool {
        let n = word.len();
        if self.pos + n > self.chars.len() {
            return false;
        }
        let matches = self.chars[self.pos..self.pos + n]
            .iter()
            .zip(word.chars())
            .all(|(&(c, _), w)| c.eq_ignore_ascii_case(&w));
        if matches {
            self.pos += n;
        }
        matches
    }

    fn int(&mut self) -> Result<usize> {
        let start = self.pos;
        let mut value: usize = 0;
        while let Some(d) = self.peek().and_then(|c| c.to_digit(10)) {
            value = match value.checked_mul(10).and_then(|v| v.checked_add(d as usize)) {
                Some(v) => v,
                None => {
                    self.pos = start;
                    return self.error("integer too large");
                }
            };
            self.pos += 1;
        }
        if self.pos == start {
            return self.error(format!("expected an integer, found {}", self.describe_next()));
        }
        Ok(value)
    }

    fn sketch(&mut self) -> Result<Vec<RawMapping>> {
        self.expect('{')?;
        let mut mappings = vec![self.mapping()?];
        while self.peek() == Some(',') {
            self.pos += 1;
            mappings.push(self.mapping()?);
        }
        self.expect('}')?;
        if self.pos < self.chars.len() {
            return self.error(format!("unexpected {} after '}}'", self.describe_next()));
        }
        Ok(mappings)
    }

    fn mapping(&mut self) -> Result<RawMapping> {
        let column = self.column();
        if !self.keyword("L") {
            return self.error(format!("expected 'L', found {}", self.describe_next()));
        }
        let lo = self.int()?;
        let hi = if self.peek() == Some('-') {
            self.pos += 1;
            if self.keyword("Last") {
                Some(Upper::Last)
            } else if self.keyword("L") {
                Some(Upper::Index(self.int()?))
            } else {
                return self.error(format!("expected 'L' or 'Last', found {}", self.describe_next()));
            }
        } else {
            None
        };
        self.expect(':')?;
        if !self.keyword("CE") {
            return self.error(format!("expected 'CE', found {}", self.describe_next()));
        }
        let ce_lo = self.int()?;
        let ce_hi = if self.peek() == Some('-') {
            self.pos += 1;
            if !self.keyword("CE") {
                return self.error(format!("expected 'CE', found {}", self.describe_next()));
            }
            Some(self.int()?)
        } else {
            None
        };
        Ok(RawMapping {
            lo,
            hi,
            ce_lo,
            ce_hi,
            column,
        })
    }
}

fn range_text(lo: usize, hi: usize) -> String {
    if lo == hi {
        format!("L{lo}")
    } else {
        format!("L{lo}-L{hi}")
    }
}

fn resolve(raw: Vec<RawMapping>, depth: usize) -> Result<AcceleratorSketch> {
    let mut blocks = Vec::with_capacity(raw.len());
    for m in raw {
        if m.lo == 0 {
            return Err(Error::Syntax {
                column: m.column,
                message: "layer indices start at 1".into(),
            });
        }
        if m.lo > depth {
            return Err(Error::Sketch(format!("layer index {} beyond CNN depth {depth}", m.lo)));
        }
        let (hi, hi_is_last) = match m.hi {
            None => (m.lo, false),
            Some(Upper::Last) => (depth, true),
            Some(Upper::Index(h)) => {
                if h > depth {
                    return Err(Error::Sketch(format!("layer index {h} beyond CNN depth {depth}")));
                }
                (h, false)
            }
        };
        if hi < m.lo {
            return Err(Error::Sketch(format!("empty range L{}-L{hi}", m.lo)));
        }
        let ce_hi = m.ce_hi.unwrap_or(m.ce_lo);
        if m.ce_lo == 0 {
            return Err(Error::Syntax {
                column: m.column,
                message: "CE ids start at 1".into(),
            });
        }
        if ce_hi < m.ce_lo {
            return Err(Error::Sketch(format!("empty CE range CE{}-CE{ce_hi}", m.ce_lo)));
        }
        let kind = if ce_hi == m.ce_lo {
            BlockKind::SingleCe(m.ce_lo)
        } else {
            BlockKind::PipelinedCes(m.ce_lo, ce_hi)
        };
        let block = BlockSketch {
            layer_lo: m.lo,
            layer_hi: hi,
            hi_is_last,
            kind,
        };
        if block.kind.ce_count() > block.num_layers() {
            return Err(Error::Sketch(format!(
                "block {} has {} CEs but only {} layers",
                range_text(block.layer_lo, block.layer_hi),
                block.kind.ce_count(),
                block.num_layers()
            )));
        }
        blocks.push(block);
    }

    blocks.sort_by_key(|b| (b.layer_lo, b.layer_hi));
    let mut next = 1;
    for b in &blocks {
        if b.layer_lo < next {
            return Err(Error::Sketch(format!(
                "overlapping ranges {}",
                range_text(b.layer_lo, b.layer_hi.min(next - 1))
            )));
        }
        if b.layer_lo > next {
            return Err(Error::Sketch(format!(
                "layers {} not covered",
                range_text(next, b.layer_lo - 1)
            )));
        }
        next = b.layer_hi + 1;
    }
    if next <= depth {
        return Err(Error::Sketch(format!("layers {} not covered", range_text(next, depth))));
    }

    let mut seen = std::collections::BTreeSet::new();
    for b in &blocks {
        for id in b.kind.ce_ids() {
            if !seen.insert(id) {
                return Err(Error::Sketch(format!("duplicate CE id CE{id}")));
            }
        }
    }

    Ok(AcceleratorSketch {
        inter_segment_pipelining: blocks.len() > 1,
        blocks,
    })
}
