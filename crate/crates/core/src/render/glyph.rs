//! Embedded 7x9 bitmap font for the placeholder and answer labels.

pub const GLYPH_W: usize = 7;
pub const GLYPH_H: usize = 9;

type Bitmap = [&'static str; GLYPH_H];

const QUESTION: Bitmap = [
    " ##### ",
    "##   ##",
    "     ##",
    "    ## ",
    "   ##  ",
    "   ##  ",
    "       ",
    "   ##  ",
    "   ##  ",
];

const LETTERS: [Bitmap; 8] = [
    [
        "  ###  ", " ## ## ", "##   ##", "##   ##", "#######", "##   ##", "##   ##", "##   ##", "##   ##",
    ],
    [
        "###### ", "##   ##", "##   ##", "###### ", "##   ##", "##   ##", "##   ##", "##   ##", "###### ",
    ],
    [
        " ##### ", "##   ##", "##     ", "##     ", "##     ", "##     ", "##     ", "##   ##", " ##### ",
    ],
    [
        "#####  ", "##  ## ", "##   ##", "##   ##", "##   ##", "##   ##", "##   ##", "##  ## ", "#####  ",
    ],
    [
        "#######", "##     ", "##     ", "##     ", "###### ", "##     ", "##     ", "##     ", "#######",
    ],
    [
        "#######", "##     ", "##     ", "##     ", "###### ", "##     ", "##     ", "##     ", "##     ",
    ],
    [
        " ##### ", "##   ##", "##     ", "##     ", "## ####", "##   ##", "##   ##", "##   ##", " ##### ",
    ],
    [
        "##   ##", "##   ##", "##   ##", "##   ##", "#######", "##   ##", "##   ##", "##   ##", "##   ##",
    ],
];

/// Bitmap for `'?'` or `'A'..='H'`; `None` for anything else.
pub fn glyph(c: char) -> Option<&'static Bitmap> {
    match c {
        '?' => Some(&QUESTION),
        'A'..='H' => Some(&LETTERS[(c as u8 - b'A') as usize]),
        _ => None,
    }
}

/// Whether the glyph cell at (`row`, `col`) is inked.
pub fn is_set(bitmap: &Bitmap, row: usize, col: usize) -> bool {
    bitmap[row].as_bytes()[col] == b'#'
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_glyphs_are_7_by_9() {
        for c in "?ABCDEFGH".chars() {
            let g = glyph(c).unwrap();
            assert!(g.iter().all(|row| row.len() == GLYPH_W), "{c}");
            assert!(g.iter().any(|row| row.contains('#')));
        }
        assert!(glyph('I').is_none());
    }

    #[test]
    fn glyphs_are_distinct() {
        let all: Vec<_> = "?ABCDEFGH".chars().map(|c| glyph(c).unwrap()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
