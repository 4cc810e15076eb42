//! Deterministic synthetic grid-image QA task.
//!
//! Each record is a g x g grid of cells (one visual token per cell encoding
//! color + shape), an instruction naming a question family plus arguments,
//! and the unique correct response rendered through verbose templates.
//!
//! Different instructions over the same grid demand different cells, so a
//! trained model develops genuinely instruction-dependent visual attention.
//! Responses optionally begin with a row-major description of the first n
//! cells; n is encoded in the instruction (a stop-cell coordinate), which
//! keeps the response a pure function of (grid, instruction) while giving
//! the corpus a wide, controllable response-length distribution.

pub mod io;
pub mod split;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RowSpec, SequenceBatch};
use crate::numerics::Rng;

pub use split::split_dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionFamily {
    ColorAtCell,
    CountColor,
    ShapeAtCell,
    RowOfShape,
}

pub const ALL_FAMILIES: [QuestionFamily; 4] = [
    QuestionFamily::ColorAtCell,
    QuestionFamily::CountColor,
    QuestionFamily::ShapeAtCell,
    QuestionFamily::RowOfShape,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub grid_side: usize,
    pub n_colors: usize,
    pub n_shapes: usize,
    pub question_families: Vec<QuestionFamily>,
    /// Target response length range [min, max] in tokens (incl. EOS). The
    /// generator lands inside it whenever the template grammar allows.
    pub response_len_range: (usize, usize),
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            grid_side: 4,
            n_colors: 4,
            n_shapes: 4,
            question_families: ALL_FAMILIES.to_vec(),
            response_len_range: (8, 44),
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let g = self.grid_side;
        if g < 2 || self.n_colors < 2 || self.n_shapes < 2 {
            return Err(Error::Config(format!(
                "grid_side {g}, n_colors {}, n_shapes {} must all be >= 2",
                self.n_colors, self.n_shapes
            )));
        }
        if self.question_families.is_empty() {
            return Err(Error::Config("no question families enabled".into()));
        }
        let (lo, hi) = self.response_len_range;
        let max_possible = DESC_ITEM_LEN * g * g + LONG_ANSWER_LEN + 1;
        if lo < 2 || hi < lo || hi > max_possible {
            return Err(Error::Config(format!(
                "response_len_range ({lo}, {hi}) invalid; must satisfy 2 <= min <= max <= {max_possible}"
            )));
        }
        // The vocabulary layout is computed, so ranges cannot collide unless
        // the arithmetic overflows; guard against absurd sizes anyway.
        if self.vocab_layout().vocab_size() > 1 << 20 {
            return Err(Error::Config("vocabulary sub-ranges exceed sane bounds".into()));
        }
        Ok(())
    }

    pub fn vocab_layout(&self) -> VocabLayout {
        VocabLayout::new(self.grid_side, self.n_colors, self.n_shapes)
    }
}

/// Tokens per grid-description item: row, col, color, shape.
pub const DESC_ITEM_LEN: usize = 4;
/// Length of the longer answer templates (cell queries).
pub const LONG_ANSWER_LEN: usize = 6;
/// Length of the shorter answer templates (count / row queries).
pub const SHORT_ANSWER_LEN: usize = 4;

/// Disjoint token sub-ranges: specials, visual, instruction, response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabLayout {
    pub grid_side: usize,
    pub n_colors: usize,
    pub n_shapes: usize,
    visual_start: u32,
    instruction_start: u32,
    response_start: u32,
    end: u32,
}

/// Decoded meaning of a token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    /// Visual cell content.
    Cell { color: usize, shape: usize },
    Family(QuestionFamily),
    QNum(usize),
    QColor(usize),
    QShape(usize),
    QBrief,
    Word(Word),
    RNum(usize),
    RColor(usize),
    RShape(usize),
}

/// Response-range template words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Word {
    Color,
    Shape,
    At,
    Is,
    Count,
    Row,
}

const WORDS: [Word; 6] = [Word::Color, Word::Shape, Word::At, Word::Is, Word::Count, Word::Row];

impl VocabLayout {
    pub fn new(grid_side: usize, n_colors: usize, n_shapes: usize) -> VocabLayout {
        let visual_start = 3u32;
        let n_visual = (n_colors * n_shapes) as u32;
        let instruction_start = visual_start + n_visual;
        // families + row/col numbers 1..=g + colors + shapes + brief marker
        let n_instruction = (4 + grid_side + n_colors + n_shapes + 1) as u32;
        let response_start = instruction_start + n_instruction;
        // template words + numbers 0..=g*g + colors + shapes
        let n_response = (WORDS.len() + grid_side * grid_side + 1 + n_colors + n_shapes) as u32;
        VocabLayout {
            grid_side,
            n_colors,
            n_shapes,
            visual_start,
            instruction_start,
            response_start,
            end: response_start + n_response,
        }
    }

    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;

    pub fn vocab_size(&self) -> usize {
        self.end as usize
    }

    pub fn cell_token(&self, color: usize, shape: usize) -> u32 {
        debug_assert!(color < self.n_colors && shape < self.n_shapes);
        self.visual_start + (color * self.n_shapes + shape) as u32
    }

    pub fn family_token(&self, f: QuestionFamily) -> u32 {
        let i = match f {
            QuestionFamily::ColorAtCell => 0,
            QuestionFamily::CountColor => 1,
            QuestionFamily::ShapeAtCell => 2,
            QuestionFamily::RowOfShape => 3,
        };
        self.instruction_start + i
    }

    /// 1-indexed row/col number in the instruction range.
    pub fn q_num(&self, n: usize) -> u32 {
        debug_assert!((1..=self.grid_side).contains(&n));
        self.instruction_start + 4 + (n - 1) as u32
    }

    pub fn q_color(&self, c: usize) -> u32 {
        self.instruction_start + (4 + self.grid_side + c) as u32
    }

    pub fn q_shape(&self, s: usize) -> u32 {
        self.instruction_start + (4 + self.grid_side + self.n_colors + s) as u32
    }

    pub fn q_brief(&self) -> u32 {
        self.instruction_start + (4 + self.grid_side + self.n_colors + self.n_shapes) as u32
    }

    pub fn word(&self, w: Word) -> u32 {
        let i = WORDS.iter().position(|x| *x == w).unwrap();
        self.response_start + i as u32
    }

    /// Number 0..=g*g in the response range.
    pub fn r_num(&self, n: usize) -> u32 {
        debug_assert!(n <= self.grid_side * self.grid_side);
        self.response_start + (WORDS.len() + n) as u32
    }

    pub fn r_color(&self, c: usize) -> u32 {
        self.response_start + (WORDS.len() + self.grid_side * self.grid_side + 1 + c) as u32
    }

    pub fn r_shape(&self, s: usize) -> u32 {
        self.response_start
            + (WORDS.len() + self.grid_side * self.grid_side + 1 + self.n_colors + s) as u32
    }

    pub fn is_visual(&self, t: u32) -> bool {
        (self.visual_start..self.instruction_start).contains(&t)
    }

    pub fn is_instruction(&self, t: u32) -> bool {
        (self.instruction_start..self.response_start).contains(&t)
    }

    pub fn is_response(&self, t: u32) -> bool {
        (self.response_start..self.end).contains(&t)
    }

    pub fn decode(&self, t: u32) -> Result<TokenKind> {
        if t == Self::PAD {
            return Ok(TokenKind::Pad);
        }
        if t == Self::BOS {
            return Ok(TokenKind::Bos);
        }
        if t == Self::EOS {
            return Ok(TokenKind::Eos);
        }
        if self.is_visual(t) {
            let off = (t - self.visual_start) as usize;
            return Ok(TokenKind::Cell { color: off / self.n_shapes, shape: off % self.n_shapes });
        }
        if self.is_instruction(t) {
            let off = (t - self.instruction_start) as usize;
            if off < 4 {
                return Ok(TokenKind::Family(ALL_FAMILIES[off]));
            }
            let off = off - 4;
            if off < self.grid_side {
                return Ok(TokenKind::QNum(off + 1));
            }
            let off = off - self.grid_side;
            if off < self.n_colors {
                return Ok(TokenKind::QColor(off));
            }
            let off = off - self.n_colors;
            if off < self.n_shapes {
                return Ok(TokenKind::QShape(off));
            }
            return Ok(TokenKind::QBrief);
        }
        if self.is_response(t) {
            let off = (t - self.response_start) as usize;
            if off < WORDS.len() {
                return Ok(TokenKind::Word(WORDS[off]));
            }
            let off = off - WORDS.len();
            if off <= self.grid_side * self.grid_side {
                return Ok(TokenKind::RNum(off));
            }
            let off = off - self.grid_side * self.grid_side - 1;
            if off < self.n_colors {
                return Ok(TokenKind::RColor(off));
            }
            let off = off - self.n_colors;
            if off < self.n_shapes {
                return Ok(TokenKind::RShape(off));
            }
        }
        Err(Error::Format(format!("token {t} outside vocabulary")))
    }

    /// Compact human-readable form of a token, for logs and demos.
    pub fn describe(&self, t: u32) -> String {
        match self.decode(t) {
            Ok(TokenKind::Pad) => "<pad>".into(),
            Ok(TokenKind::Bos) => "<bos>".into(),
            Ok(TokenKind::Eos) => "<eos>".into(),
            Ok(TokenKind::Cell { color, shape }) => format!("cell(c{color},s{shape})"),
            Ok(TokenKind::Family(f)) => format!("{f:?}"),
            Ok(TokenKind::QNum(n)) => format!("q#{n}"),
            Ok(TokenKind::QColor(c)) => format!("q-color{c}"),
            Ok(TokenKind::QShape(s)) => format!("q-shape{s}"),
            Ok(TokenKind::QBrief) => "q-brief".into(),
            Ok(TokenKind::Word(w)) => format!("{w:?}").to_lowercase(),
            Ok(TokenKind::RNum(n)) => format!("#{n}"),
            Ok(TokenKind::RColor(c)) => format!("color{c}"),
            Ok(TokenKind::RShape(s)) => format!("shape{s}"),
            Err(_) => format!("<bad:{t}>"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub record_id: String,
    pub visual_tokens: Vec<u32>,
    pub instruction_tokens: Vec<u32>,
    pub response_tokens: Vec<u32>,
    /// 0-indexed (row, col) of the cell whose content determines the
    /// response, for cell-targeted families.
    pub answer_cell: Option<(usize, usize)>,
}

impl DatasetRecord {
    pub fn response_len(&self) -> usize {
        self.response_tokens.len()
    }

    pub fn to_row_spec(&self) -> RowSpec {
        RowSpec {
            visual: self.visual_tokens.clone(),
            instruction: self.instruction_tokens.clone(),
            response: self.response_tokens.clone(),
        }
    }
}

/// Builds a padded [`SequenceBatch`] from records.
pub fn to_batch(records: &[&DatasetRecord]) -> Result<SequenceBatch> {
    let rows: Vec<RowSpec> = records.iter().map(|r| r.to_row_spec()).collect();
    SequenceBatch::from_rows(&rows)
}

/// Grid contents of one record: row-major (color, shape) cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub side: usize,
    pub cells: Vec<(usize, usize)>,
}

impl Grid {
    pub fn cell(&self, row: usize, col: usize) -> (usize, usize) {
        self.cells[row * self.side + col]
    }

    pub fn from_tokens(layout: &VocabLayout, visual_tokens: &[u32]) -> Result<Grid> {
        let side = layout.grid_side;
        if visual_tokens.len() != side * side {
            return Err(Error::Contract(format!(
                "expected {} visual tokens, got {}",
                side * side,
                visual_tokens.len()
            )));
        }
        let mut cells = Vec::with_capacity(visual_tokens.len());
        for &t in visual_tokens {
            match layout.decode(t)? {
                TokenKind::Cell { color, shape } => cells.push((color, shape)),
                other => {
                    return Err(Error::Contract(format!(
                        "non-visual token {t} ({other:?}) in visual segment"
                    )))
                }
            }
        }
        Ok(Grid { side, cells })
    }
}

/// The question posed by one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Question {
    ColorAtCell { row: usize, col: usize },
    ShapeAtCell { row: usize, col: usize },
    CountColor { color: usize },
    RowOfShape { shape: usize },
}

impl Question {
    fn family(&self) -> QuestionFamily {
        match self {
            Question::ColorAtCell { .. } => QuestionFamily::ColorAtCell,
            Question::ShapeAtCell { .. } => QuestionFamily::ShapeAtCell,
            Question::CountColor { .. } => QuestionFamily::CountColor,
            Question::RowOfShape { .. } => QuestionFamily::RowOfShape,
        }
    }

    fn answer_len(&self) -> usize {
        match self {
            Question::ColorAtCell { .. } | Question::ShapeAtCell { .. } => LONG_ANSWER_LEN,
            Question::CountColor { .. } | Question::RowOfShape { .. } => SHORT_ANSWER_LEN,
        }
    }
}

/// Deterministic generation: the record is a pure function of
/// `(spec.seed, index)`.
pub fn generate_record(spec: &TaskSpec, index: u64) -> Result<DatasetRecord> {
    spec.validate()?;
    let layout = spec.vocab_layout();
    let g = spec.grid_side;
    let mut rng = Rng::new(spec.seed).stream("records").substream(index);

    let mut cells = Vec::with_capacity(g * g);
    for _ in 0..g * g {
        cells.push((rng.below(spec.n_colors), rng.below(spec.n_shapes)));
    }
    let grid = Grid { side: g, cells };

    let family = spec.question_families[rng.below(spec.question_families.len())];
    let question = match family {
        QuestionFamily::ColorAtCell => {
            Question::ColorAtCell { row: rng.below(g), col: rng.below(g) }
        }
        QuestionFamily::ShapeAtCell => {
            Question::ShapeAtCell { row: rng.below(g), col: rng.below(g) }
        }
        QuestionFamily::CountColor => Question::CountColor { color: rng.below(spec.n_colors) },
        QuestionFamily::RowOfShape => {
            let mut present: Vec<usize> = grid.cells.iter().map(|c| c.1).collect();
            present.sort_unstable();
            present.dedup();
            Question::RowOfShape { shape: present[rng.below(present.len())] }
        }
    };

    // Choose the description length so the total response lands near a
    // seeded target inside response_len_range.
    let (lo, hi) = spec.response_len_range;
    let target = rng.range_inclusive(lo, hi);
    let fixed = question.answer_len() + 1; // answer + EOS
    let n_items = if target <= fixed {
        0
    } else {
        (((target - fixed) + DESC_ITEM_LEN / 2) / DESC_ITEM_LEN).min(g * g)
    };

    let instruction_tokens = encode_instruction(&layout, &question, n_items);
    let response_tokens = render_response(&layout, &grid, &question, n_items);
    let answer_cell = answer_cell_of(&grid, &question);

    Ok(DatasetRecord {
        record_id: format!("rec-{index:06}"),
        visual_tokens: grid
            .cells
            .iter()
            .map(|&(c, s)| layout.cell_token(c, s))
            .collect(),
        instruction_tokens,
        response_tokens,
        answer_cell,
    })
}

pub fn generate_dataset(spec: &TaskSpec, n: usize) -> Result<Vec<DatasetRecord>> {
    (0..n as u64).map(|i| generate_record(spec, i)).collect()
}

fn encode_instruction(layout: &VocabLayout, q: &Question, n_items: usize) -> Vec<u32> {
    let g = layout.grid_side;
    let mut toks = vec![layout.family_token(q.family())];
    match *q {
        Question::ColorAtCell { row, col } | Question::ShapeAtCell { row, col } => {
            toks.push(layout.q_num(row + 1));
            toks.push(layout.q_num(col + 1));
        }
        Question::CountColor { color } => toks.push(layout.q_color(color)),
        Question::RowOfShape { shape } => toks.push(layout.q_shape(shape)),
    }
    if n_items == 0 {
        toks.push(layout.q_brief());
    } else {
        // Stop cell of the row-major description scan, 1-indexed.
        let idx = n_items - 1;
        toks.push(layout.q_num(idx / g + 1));
        toks.push(layout.q_num(idx % g + 1));
    }
    toks
}

/// Renders the unique correct response: a row-major description of the
/// first `n_items` cells, the answer template, then EOS.
pub fn render_response(
    layout: &VocabLayout,
    grid: &Grid,
    q: &Question,
    n_items: usize,
) -> Vec<u32> {
    let g = grid.side;
    let mut toks = Vec::new();
    for idx in 0..n_items {
        let (color, shape) = grid.cells[idx];
        toks.push(layout.r_num(idx / g + 1));
        toks.push(layout.r_num(idx % g + 1));
        toks.push(layout.r_color(color));
        toks.push(layout.r_shape(shape));
    }
    match *q {
        Question::ColorAtCell { row, col } => {
            let (color, _) = grid.cell(row, col);
            toks.extend([
                layout.word(Word::Color),
                layout.word(Word::At),
                layout.r_num(row + 1),
                layout.r_num(col + 1),
                layout.word(Word::Is),
                layout.r_color(color),
            ]);
        }
        Question::ShapeAtCell { row, col } => {
            let (_, shape) = grid.cell(row, col);
            toks.extend([
                layout.word(Word::Shape),
                layout.word(Word::At),
                layout.r_num(row + 1),
                layout.r_num(col + 1),
                layout.word(Word::Is),
                layout.r_shape(shape),
            ]);
        }
        Question::CountColor { color } => {
            let count = grid.cells.iter().filter(|c| c.0 == color).count();
            toks.extend([
                layout.word(Word::Count),
                layout.r_color(color),
                layout.word(Word::Is),
                layout.r_num(count),
            ]);
        }
        Question::RowOfShape { shape } => {
            let first = grid.cells.iter().position(|c| c.1 == shape);
            let row = first.map(|i| i / g).unwrap_or(0);
            toks.extend([
                layout.word(Word::Row),
                layout.r_shape(shape),
                layout.word(Word::Is),
                layout.r_num(row + 1),
            ]);
        }
    }
    toks.push(VocabLayout::EOS);
    toks
}

fn answer_cell_of(grid: &Grid, q: &Question) -> Option<(usize, usize)> {
    match *q {
        Question::ColorAtCell { row, col } | Question::ShapeAtCell { row, col } => {
            Some((row, col))
        }
        Question::CountColor { .. } => None,
        Question::RowOfShape { shape } => grid
            .cells
            .iter()
            .position(|c| c.1 == shape)
            .map(|i| (i / grid.side, i % grid.side)),
    }
}

/// Parses the question and description length back out of an instruction.
pub fn decode_instruction(
    layout: &VocabLayout,
    instruction: &[u32],
) -> Result<(Question, usize)> {
    let g = layout.grid_side;
    let fam = match layout.decode(*instruction.first().ok_or_else(|| {
        Error::Format("empty instruction".into())
    })?)? {
        TokenKind::Family(f) => f,
        other => return Err(Error::Format(format!("expected family token, got {other:?}"))),
    };
    let mut rest = &instruction[1..];
    let question = match fam {
        QuestionFamily::ColorAtCell | QuestionFamily::ShapeAtCell => {
            let row = expect_qnum(layout, rest, 0)? - 1;
            let col = expect_qnum(layout, rest, 1)? - 1;
            rest = &rest[2..];
            if fam == QuestionFamily::ColorAtCell {
                Question::ColorAtCell { row, col }
            } else {
                Question::ShapeAtCell { row, col }
            }
        }
        QuestionFamily::CountColor => {
            let color = match layout.decode(rest[0])? {
                TokenKind::QColor(c) => c,
                other => return Err(Error::Format(format!("expected color arg, got {other:?}"))),
            };
            rest = &rest[1..];
            Question::CountColor { color }
        }
        QuestionFamily::RowOfShape => {
            let shape = match layout.decode(rest[0])? {
                TokenKind::QShape(s) => s,
                other => return Err(Error::Format(format!("expected shape arg, got {other:?}"))),
            };
            rest = &rest[1..];
            Question::RowOfShape { shape }
        }
    };
    let n_items = match layout.decode(rest[0])? {
        TokenKind::QBrief => 0,
        TokenKind::QNum(r) => {
            let c = expect_qnum(layout, rest, 1)?;
            (r - 1) * g + c
        }
        other => return Err(Error::Format(format!("expected verbosity marker, got {other:?}"))),
    };
    Ok((question, n_items))
}

fn expect_qnum(layout: &VocabLayout, toks: &[u32], i: usize) -> Result<usize> {
    match layout.decode(*toks.get(i).ok_or_else(|| Error::Format("short instruction".into()))?)? {
        TokenKind::QNum(n) => Ok(n),
        other => Err(Error::Format(format!("expected number token, got {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        TaskSpec { seed: 11, ..TaskSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec();
        let a = generate_record(&s, 42).unwrap();
        let b = generate_record(&s, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_record(&s, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn token_ranges_partition() {
        let layout = spec().vocab_layout();
        let mut seen = vec![0u8; layout.vocab_size()];
        for t in 0..layout.vocab_size() as u32 {
            let mut kinds = 0;
            if t < 3 {
                kinds += 1;
            }
            if layout.is_visual(t) {
                kinds += 1;
            }
            if layout.is_instruction(t) {
                kinds += 1;
            }
            if layout.is_response(t) {
                kinds += 1;
            }
            assert_eq!(kinds, 1, "token {t} belongs to {kinds} ranges");
            seen[t as usize] += 1;
            layout.decode(t).unwrap();
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn records_have_expected_structure() {
        let s = spec();
        let layout = s.vocab_layout();
        for i in 0..200 {
            let r = generate_record(&s, i).unwrap();
            assert_eq!(r.visual_tokens.len(), 16);
            assert!(r.visual_tokens.iter().all(|&t| layout.is_visual(t)));
            assert!(r.instruction_tokens.iter().all(|&t| layout.is_instruction(t)));
            assert!(!r.response_tokens.is_empty());
            assert_eq!(*r.response_tokens.last().unwrap(), VocabLayout::EOS);
            let body = &r.response_tokens[..r.response_tokens.len() - 1];
            assert!(body.iter().all(|&t| layout.is_response(t)));
        }
    }

    #[test]
    fn count_color_zero_renders_zero() {
        // Scan until a count-color record whose queried color is absent.
        let s = spec();
        let layout = s.vocab_layout();
        let mut found = false;
        for i in 0..5000 {
            let r = generate_record(&s, i).unwrap();
            let (q, _) = decode_instruction(&layout, &r.instruction_tokens).unwrap();
            if let Question::CountColor { color } = q {
                let grid = Grid::from_tokens(&layout, &r.visual_tokens).unwrap();
                if grid.cells.iter().all(|c| c.0 != color) {
                    let n = r.response_tokens.len();
                    assert_eq!(r.response_tokens[n - 2], layout.r_num(0));
                    found = true;
                    break;
                }
            }
        }
        assert!(found, "no zero-count record in 5000 draws");
    }

    #[test]
    fn response_lengths_cover_the_configured_range() {
        let s = spec();
        let lens: Vec<usize> =
            (0..500).map(|i| generate_record(&s, i).unwrap().response_len()).collect();
        let min = *lens.iter().min().unwrap();
        let max = *lens.iter().max().unwrap();
        assert!(min <= 10, "min length {min}");
        assert!(max >= 40, "max length {max}");
        // Enough long responses for a bias-eval split at threshold 32.
        let long = lens.iter().filter(|&&l| l >= 32).count();
        assert!(long >= 50, "only {long} of 500 responses reach 32 tokens");
    }

    #[test]
    fn answer_cell_points_at_determining_cell() {
        let s = spec();
        let layout = s.vocab_layout();
        for i in 0..300 {
            let r = generate_record(&s, i).unwrap();
            let (q, _) = decode_instruction(&layout, &r.instruction_tokens).unwrap();
            let grid = Grid::from_tokens(&layout, &r.visual_tokens).unwrap();
            match q {
                Question::ColorAtCell { row, col } | Question::ShapeAtCell { row, col } => {
                    assert_eq!(r.answer_cell, Some((row, col)));
                }
                Question::CountColor { .. } => assert_eq!(r.answer_cell, None),
                Question::RowOfShape { shape } => {
                    let (row, col) = r.answer_cell.unwrap();
                    assert_eq!(grid.cell(row, col).1, shape);
                    // No earlier cell has the shape.
                    let idx = row * grid.side + col;
                    assert!(grid.cells[..idx].iter().all(|c| c.1 != shape));
                }
            }
        }
    }

    #[test]
    fn to_batch_orders_segments() {
        let s = spec();
        let r = generate_record(&s, 0).unwrap();
        let batch = to_batch(&[&r]).unwrap();
        assert_eq!(batch.n_visual(0), 16);
        assert_eq!(batch.n_response(0), r.response_tokens.len());
        batch.validate().unwrap();
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = spec();
        s.grid_side = 1;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.response_len_range = (10, 5);
        assert!(s.validate().is_err());
        let mut s = spec();
        s.question_families.clear();
        assert!(s.validate().is_err());
    }
}
