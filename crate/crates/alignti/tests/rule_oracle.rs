//! Independent rule-interpreter oracle for the synthetic grid-QA task.
//!
//! The interpreter here re-derives every record's full response from the
//! grid contents and the instruction alone, using its own template
//! expansion, and must agree with the generator token for token. It goes
//! through the public token-decode API but shares none of the generator's
//! rendering code.

use alignti::synthdata::{
    generate_dataset, DatasetRecord, Grid, Question, QuestionFamily, TaskSpec, TokenKind,
    VocabLayout, Word,
};

/// Re-derives the expected response tokens of a record from scratch.
fn interpret(layout: &VocabLayout, record: &DatasetRecord) -> Vec<u32> {
    let g = layout.grid_side;
    // Decode the grid by hand.
    let cells: Vec<(usize, usize)> = record
        .visual_tokens
        .iter()
        .map(|&t| match layout.decode(t).unwrap() {
            TokenKind::Cell { color, shape } => (color, shape),
            other => panic!("visual token decoded to {other:?}"),
        })
        .collect();
    assert_eq!(cells.len(), g * g);

    // Decode the instruction by hand: family, arguments, verbosity.
    let toks: Vec<TokenKind> = record
        .instruction_tokens
        .iter()
        .map(|&t| layout.decode(t).unwrap())
        .collect();
    let family = match toks[0] {
        TokenKind::Family(f) => f,
        other => panic!("expected family, got {other:?}"),
    };
    let qnum = |k: &TokenKind| match k {
        TokenKind::QNum(n) => *n,
        other => panic!("expected number, got {other:?}"),
    };
    let (answer, rest): (Answer, &[TokenKind]) = match family {
        QuestionFamily::ColorAtCell => {
            let (r, c) = (qnum(&toks[1]) - 1, qnum(&toks[2]) - 1);
            (Answer::Color(cells[r * g + c].0, r, c), &toks[3..])
        }
        QuestionFamily::ShapeAtCell => {
            let (r, c) = (qnum(&toks[1]) - 1, qnum(&toks[2]) - 1);
            (Answer::Shape(cells[r * g + c].1, r, c), &toks[3..])
        }
        QuestionFamily::CountColor => {
            let color = match toks[1] {
                TokenKind::QColor(c) => c,
                other => panic!("expected color, got {other:?}"),
            };
            let count = cells.iter().filter(|cell| cell.0 == color).count();
            (Answer::Count(color, count), &toks[2..])
        }
        QuestionFamily::RowOfShape => {
            let shape = match toks[1] {
                TokenKind::QShape(s) => s,
                other => panic!("expected shape, got {other:?}"),
            };
            let first = cells
                .iter()
                .position(|cell| cell.1 == shape)
                .expect("queried shape must be present");
            (Answer::Row(shape, first / g), &toks[2..])
        }
    };
    let n_items = match rest {
        [TokenKind::QBrief] => 0,
        [TokenKind::QNum(r), TokenKind::QNum(c)] => (r - 1) * g + c,
        other => panic!("bad verbosity suffix {other:?}"),
    };

    // Expand the templates independently.
    let mut expect = Vec::new();
    for idx in 0..n_items {
        let (color, shape) = cells[idx];
        expect.push(layout.r_num(idx / g + 1));
        expect.push(layout.r_num(idx % g + 1));
        expect.push(layout.r_color(color));
        expect.push(layout.r_shape(shape));
    }
    match answer {
        Answer::Color(color, r, c) => expect.extend([
            layout.word(Word::Color),
            layout.word(Word::At),
            layout.r_num(r + 1),
            layout.r_num(c + 1),
            layout.word(Word::Is),
            layout.r_color(color),
        ]),
        Answer::Shape(shape, r, c) => expect.extend([
            layout.word(Word::Shape),
            layout.word(Word::At),
            layout.r_num(r + 1),
            layout.r_num(c + 1),
            layout.word(Word::Is),
            layout.r_shape(shape),
        ]),
        Answer::Count(color, count) => expect.extend([
            layout.word(Word::Count),
            layout.r_color(color),
            layout.word(Word::Is),
            layout.r_num(count),
        ]),
        Answer::Row(shape, row) => expect.extend([
            layout.word(Word::Row),
            layout.r_shape(shape),
            layout.word(Word::Is),
            layout.r_num(row + 1),
        ]),
    }
    expect.push(VocabLayout::EOS);
    expect
}

enum Answer {
    Color(usize, usize, usize),
    Shape(usize, usize, usize),
    Count(usize, usize),
    Row(usize, usize),
}

#[test]
fn interpreter_matches_generator_on_1000_records() {
    let spec = TaskSpec { seed: 77, ..TaskSpec::default() };
    let layout = spec.vocab_layout();
    let records = generate_dataset(&spec, 1000).unwrap();
    for (i, record) in records.iter().enumerate() {
        let expect = interpret(&layout, record);
        assert_eq!(
            record.response_tokens, expect,
            "record {i}: generator and rule interpreter disagree"
        );
    }
}

#[test]
fn interpreter_matches_on_alternate_geometry() {
    let spec = TaskSpec {
        grid_side: 3,
        n_colors: 3,
        n_shapes: 5,
        response_len_range: (5, 30),
        seed: 123,
        ..TaskSpec::default()
    };
    let layout = spec.vocab_layout();
    for (i, record) in generate_dataset(&spec, 300).unwrap().iter().enumerate() {
        assert_eq!(record.response_tokens, interpret(&layout, record), "record {i}");
    }
}

#[test]
fn color_at_cell_answer_is_fully_determined_by_queried_cell() {
    // For the cell-query family, the response's final content token must
    // equal the queried cell's color for every generated record.
    let spec = TaskSpec {
        question_families: vec![QuestionFamily::ColorAtCell],
        seed: 9,
        ..TaskSpec::default()
    };
    let layout = spec.vocab_layout();
    for record in generate_dataset(&spec, 500).unwrap() {
        let grid = Grid::from_tokens(&layout, &record.visual_tokens).unwrap();
        let (q, _) = alignti::synthdata::decode_instruction(&layout, &record.instruction_tokens)
            .unwrap();
        let (row, col) = match q {
            Question::ColorAtCell { row, col } => (row, col),
            other => panic!("unexpected question {other:?}"),
        };
        let n = record.response_tokens.len();
        assert_eq!(record.response_tokens[n - 2], layout.r_color(grid.cell(row, col).0));
    }
}
