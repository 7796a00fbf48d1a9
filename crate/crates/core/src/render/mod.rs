//! Composites a disjoint instance into one grayscale canvas.
//!
//! Context panels go into their grid with the missing slot replaced by a
//! blank panel carrying a centred `?`. Answers are laid out below, at most
//! four per row, each with a letter in a band above it. The composite is then
//! resized, aspect preserved, onto a fixed-size canvas and quantised to 8 bits.

mod glyph;
mod png_export;

pub use glyph::{glyph, GLYPH_H, GLYPH_W};
pub use png_export::{write_png, write_sample, SampleSidecar};

use thiserror::Error;

use crate::instance::{answer_label, unit_to_u8, validate_instance, Family, MatrixInstance, Panel, RuleVector, TaskStructure};

pub const CANVAS_WIDTH: usize = 416;
pub const ANSWERS_PER_ROW: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("unsupported structure: {0}")]
    UnsupportedStructure(String),
    #[error("expected {expected} {role} panels, got {got}")]
    PanelCount { role: &'static str, expected: usize, got: usize },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("target dimensions must be positive, got {0}x{1}")]
    ZeroTarget(usize, usize),
    #[error("cannot resize an empty image")]
    EmptyImage,
    #[error("canvas {0}x{1} cannot hold {2} answers of a {3} instance")]
    CanvasTooSmall(usize, usize, usize, Family),
}

/// Intermediate floating-point image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn fill_rect(&mut self, r: Rect, v: f32) {
        for y in r.y..r.y + r.h {
            self.data[y * self.width + r.x..y * self.width + r.x + r.w].fill(v);
        }
    }

    pub fn blit_panel(&mut self, panel: &Panel, y0: usize, x0: usize) {
        for y in 0..panel.height() {
            let row = &panel.pixels()[y * panel.width()..(y + 1) * panel.width()];
            self.data[(y0 + y) * self.width + x0..(y0 + y) * self.width + x0 + panel.width()].copy_from_slice(row);
        }
    }

    pub fn blit(&mut self, other: &Image, y0: usize, x0: usize) {
        for y in 0..other.height {
            let row = &other.data[y * other.width..(y + 1) * other.width];
            self.data[(y0 + y) * self.width + x0..(y0 + y) * self.width + x0 + other.width].copy_from_slice(row);
        }
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }
}

/// Final 8-bit canvas, the model's only input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Canvas {
    pub fn value(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x] as f32 / 255.0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnifiedSample {
    pub canvas: Canvas,
    pub label: usize,
    pub rules: RuleVector,
    pub n_a: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderLayout {
    /// Separator width between neighbouring panels, in source pixels.
    pub margin: usize,
    /// Label band height as a fraction of panel height.
    pub label_band_frac: f32,
    /// Height of the `?` glyph as a fraction of panel height.
    pub question_frac: f32,
    /// Blank rows between the context grid and the answer grid.
    pub grid_gap: usize,
    pub background: f32,
    pub ink: f32,
}

impl Default for RenderLayout {
    fn default() -> Self {
        Self { margin: 2, label_band_frac: 0.25, question_frac: 0.5, grid_gap: 4, background: 1.0, ink: 0.0 }
    }
}

impl RenderLayout {
    pub fn label_band(&self, panel_h: usize) -> usize {
        ((panel_h as f32 * self.label_band_frac).ceil() as usize).max(1)
    }

    fn check(&self) -> Result<(), RenderError> {
        if self.margin == 0 {
            return Err(RenderError::UnsupportedStructure("layout margin must be at least 1".into()));
        }
        Ok(())
    }
}

/// Canvas size `(h', w')` for a structure.
pub fn canvas_size(structure: &TaskStructure) -> Result<(usize, usize), RenderError> {
    let n_a = structure.n_a;
    if !(2..=8).contains(&n_a) {
        return Err(RenderError::UnsupportedStructure(format!("{} with n_a = {n_a}", structure.family)));
    }
    let h = match structure.family {
        Family::Vap2x3 => 384,
        Family::Rpm3x3 if n_a <= 4 => 448,
        Family::Rpm3x3 => 544,
    };
    Ok((h, CANVAS_WIDTH))
}

/// Canvas heights the renderer may use for `n_a` answers of `family`:
/// the native one and, for RPMs, any larger one (used when a curriculum
/// keeps the final-stage canvas for every stage).
pub fn admissible_canvases(family: Family, n_a: usize) -> Vec<(usize, usize)> {
    (n_a..=8)
        .filter_map(|m| canvas_size(&TaskStructure::for_family(family, m)).ok())
        .fold(Vec::new(), |mut acc, c| {
            if !acc.contains(&c) {
                acc.push(c);
            }
            acc
        })
}

/// Draws `c` scaled by nearest neighbour to `glyph_h` rows, centred in `cell`.
fn draw_glyph(img: &mut Image, c: char, cell: Rect, glyph_h: usize, ink: f32) {
    let bitmap = glyph(c).expect("glyph available");
    let gh = glyph_h.clamp(1, cell.h);
    let gw = ((gh * GLYPH_W + GLYPH_H / 2) / GLYPH_H).clamp(1, cell.w);
    let y0 = cell.y + (cell.h - gh) / 2;
    let x0 = cell.x + (cell.w - gw) / 2;
    for y in 0..gh {
        let sy = y * GLYPH_H / gh;
        for x in 0..gw {
            let sx = x * GLYPH_W / gw;
            if glyph::is_set(bitmap, sy, sx) {
                img.set(y0 + y, x0 + x, ink);
            }
        }
    }
}

fn question_panel(h: usize, w: usize, layout: &RenderLayout) -> Image {
    let mut img = Image::filled(h, w, layout.background);
    let gh = ((h as f32 * layout.question_frac).round() as usize).max(1);
    draw_glyph(&mut img, '?', Rect { y: 0, x: 0, h, w }, gh, layout.ink);
    img
}

fn panel_dims_of(panels: &[Panel]) -> Result<(usize, usize), RenderError> {
    let first = panels.first().ok_or(RenderError::EmptyImage)?;
    let dims = (first.height(), first.width());
    if panels.iter().any(|p| (p.height(), p.width()) != dims) {
        return Err(RenderError::InvalidInstance("panel dimensions differ".into()));
    }
    Ok(dims)
}

/// Cell rectangles of the context grid, row-major, including the missing slot.
pub fn context_cells(structure: &TaskStructure, panel: (usize, usize), layout: &RenderLayout) -> Vec<Rect> {
    let (h, w) = panel;
    let m = layout.margin;
    (0..structure.context_rows)
        .flat_map(|r| (0..structure.context_cols).map(move |c| Rect { y: r * (h + m), x: c * (w + m), h, w }))
        .collect()
}

pub fn compose_context_grid(
    inst: &MatrixInstance,
    structure: &TaskStructure,
    layout: &RenderLayout,
) -> Result<Image, RenderError> {
    layout.check()?;
    if inst.context.len() != structure.n_context {
        return Err(RenderError::PanelCount { role: "context", expected: structure.n_context, got: inst.context.len() });
    }
    let (h, w) = panel_dims_of(&inst.context)?;
    let m = layout.margin;
    let (rows, cols) = (structure.context_rows, structure.context_cols);
    let mut img = Image::filled(rows * h + (rows - 1) * m, cols * w + (cols - 1) * m, layout.ink);
    let missing = structure.missing_slot.0 * cols + structure.missing_slot.1;
    let placeholder = question_panel(h, w, layout);
    let mut panels = inst.context.iter();
    for (slot, cell) in context_cells(structure, (h, w), layout).into_iter().enumerate() {
        if slot == missing {
            img.blit(&placeholder, cell.y, cell.x);
        } else {
            let p = panels.next().expect("count checked");
            img.blit_panel(p, cell.y, cell.x);
        }
    }
    Ok(img)
}

/// Geometry of the answer grid: `(panel rect, label band rect)` per answer,
/// plus total `(height, width)`.
pub fn answer_cells(n: usize, panel: (usize, usize), layout: &RenderLayout) -> (Vec<(Rect, Rect)>, (usize, usize)) {
    let (h, w) = panel;
    let m = layout.margin;
    let band = layout.label_band(h);
    let cols = n.min(ANSWERS_PER_ROW);
    let rows = n.div_ceil(ANSWERS_PER_ROW);
    let cells = (0..n)
        .map(|i| {
            let (r, c) = (i / ANSWERS_PER_ROW, i % ANSWERS_PER_ROW);
            let y = r * (band + h + m);
            let x = c * (w + m);
            (Rect { y: y + band, x, h, w }, Rect { y, x, h: band, w })
        })
        .collect();
    (cells, (rows * (band + h) + rows.saturating_sub(1) * m, cols * w + cols.saturating_sub(1) * m))
}

pub fn compose_answer_grid(answers: &[Panel], layout: &RenderLayout) -> Result<Image, RenderError> {
    layout.check()?;
    if !(2..=8).contains(&answers.len()) {
        return Err(RenderError::PanelCount { role: "answer", expected: 8, got: answers.len() });
    }
    let (h, w) = panel_dims_of(answers)?;
    let m = layout.margin;
    let (cells, (gh, gw)) = answer_cells(answers.len(), (h, w), layout);
    let mut img = Image::filled(gh, gw, layout.background);
    for (i, (panel, band)) in cells.iter().enumerate() {
        img.blit_panel(&answers[i], panel.y, panel.x);
        draw_glyph(&mut img, answer_label(i), *band, band.h, layout.ink);
        // separator to the right neighbour in the same row
        if i % ANSWERS_PER_ROW != ANSWERS_PER_ROW - 1 && i + 1 < answers.len() {
            img.fill_rect(Rect { y: panel.y, x: panel.x + w, h, w: m }, layout.ink);
        }
        // separator below, when a panel sits underneath
        if i + ANSWERS_PER_ROW < answers.len() {
            img.fill_rect(Rect { y: panel.y + h, x: panel.x, h: m, w }, layout.ink);
        }
    }
    Ok(img)
}

/// Bilinear resize with half-pixel centres and edge clamping, aspect
/// preserved: scale `s = min(th/h, tw/w)`, result centred on a
/// `background`-filled `th x tw` image.
pub fn resize_preserve_aspect(img: &Image, target_h: usize, target_w: usize, background: f32) -> Result<Image, RenderError> {
    if target_h == 0 || target_w == 0 {
        return Err(RenderError::ZeroTarget(target_h, target_w));
    }
    if img.height == 0 || img.width == 0 {
        return Err(RenderError::EmptyImage);
    }
    let s = (target_h as f64 / img.height as f64).min(target_w as f64 / img.width as f64);
    let oh = ((s * img.height as f64).round() as usize).clamp(1, target_h);
    let ow = ((s * img.width as f64).round() as usize).clamp(1, target_w);
    let resized = bilinear(img, oh, ow);
    let mut out = Image::filled(target_h, target_w, background);
    out.blit(&resized, (target_h - oh) / 2, (target_w - ow) / 2);
    Ok(out)
}

fn sample_axis(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f32) {
    let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, (src - i0 as f64) as f32)
}

fn bilinear(img: &Image, oh: usize, ow: usize) -> Image {
    if (oh, ow) == (img.height, img.width) {
        return img.clone();
    }
    let xs: Vec<_> = (0..ow).map(|x| sample_axis(x, ow, img.width)).collect();
    let mut out = Image::filled(oh, ow, 0.0);
    for y in 0..oh {
        let (y0, y1, fy) = sample_axis(y, oh, img.height);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
            let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
            out.set(y, x, top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Context grid above the (horizontally centred) answer grid.
pub fn compose_full(inst: &MatrixInstance, structure: &TaskStructure, layout: &RenderLayout) -> Result<Image, RenderError> {
    let ctx = compose_context_grid(inst, structure, layout)?;
    let ans = compose_answer_grid(&inst.answers, layout)?;
    let width = ctx.width.max(ans.width);
    let mut img = Image::filled(ctx.height + layout.grid_gap + ans.height, width, layout.background);
    img.blit(&ctx, 0, (width - ctx.width) / 2);
    img.blit(&ans, ctx.height + layout.grid_gap, (width - ans.width) / 2);
    Ok(img)
}

/// Where each answer panel lands inside the full composite.
pub fn answer_rects_in_composite(structure: &TaskStructure, n_a: usize, panel: (usize, usize), layout: &RenderLayout) -> Vec<Rect> {
    let (h, w) = panel;
    let m = layout.margin;
    let ctx_w = structure.context_cols * w + (structure.context_cols - 1) * m;
    let ctx_h = structure.context_rows * h + (structure.context_rows - 1) * m;
    let (cells, (_, ans_w)) = answer_cells(n_a, panel, layout);
    let width = ctx_w.max(ans_w);
    let (dy, dx) = (ctx_h + layout.grid_gap, (width - ans_w) / 2);
    cells.into_iter().map(|(p, _)| Rect { y: p.y + dy, x: p.x + dx, ..p }).collect()
}

/// Renders at the structure's native canvas size.
pub fn render_unified(inst: &MatrixInstance, structure: &TaskStructure, layout: &RenderLayout) -> Result<UnifiedSample, RenderError> {
    let canvas = canvas_size(structure)?;
    render_unified_at(inst, structure, layout, canvas)
}

/// Renders onto an explicit canvas, which must be admissible for the
/// family and answer count (see [`admissible_canvases`]).
pub fn render_unified_at(
    inst: &MatrixInstance,
    structure: &TaskStructure,
    layout: &RenderLayout,
    canvas: (usize, usize),
) -> Result<UnifiedSample, RenderError> {
    let report = validate_instance(inst, structure, None);
    if !report.is_empty() {
        return Err(RenderError::InvalidInstance(report.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")));
    }
    if !admissible_canvases(structure.family, structure.n_a).contains(&canvas) {
        return Err(RenderError::CanvasTooSmall(canvas.0, canvas.1, structure.n_a, structure.family));
    }
    let full = compose_full(inst, structure, layout)?;
    let resized = resize_preserve_aspect(&full, canvas.0, canvas.1, layout.background)?;
    Ok(UnifiedSample {
        canvas: Canvas { height: canvas.0, width: canvas.1, data: resized.data.iter().map(|&v| unit_to_u8(v)).collect() },
        label: inst.correct,
        rules: inst.rules.clone(),
        n_a: inst.n_a(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank_instance(structure: &TaskStructure, h: usize, w: usize) -> MatrixInstance {
        MatrixInstance {
            context: (0..structure.n_context).map(|_| Panel::filled(h, w, 1.0)).collect(),
            answers: (0..structure.n_a).map(|_| Panel::filled(h, w, 1.0)).collect(),
            correct: 0,
            rules: RuleVector(vec![1]),
        }
    }

    #[test]
    fn canvas_sizes_follow_the_height_rule() {
        assert_eq!(canvas_size(&TaskStructure::rpm(8)), Ok((544, 416)));
        assert_eq!(canvas_size(&TaskStructure::rpm(5)), Ok((544, 416)));
        assert_eq!(canvas_size(&TaskStructure::rpm(4)), Ok((448, 416)));
        assert_eq!(canvas_size(&TaskStructure::rpm(2)), Ok((448, 416)));
        assert_eq!(canvas_size(&TaskStructure::vap(4)), Ok((384, 416)));
        assert!(matches!(canvas_size(&TaskStructure::rpm(9)), Err(RenderError::UnsupportedStructure(_))));
        for n_a in 2..=8 {
            for s in [TaskStructure::rpm(n_a), TaskStructure::vap(n_a)] {
                let (h, w) = canvas_size(&s).unwrap();
                assert_eq!((h % 16, w % 16), (0, 0));
            }
        }
    }

    #[test]
    fn admissible_canvases_include_larger_rpm_heights() {
        assert_eq!(admissible_canvases(Family::Rpm3x3, 2), vec![(448, 416), (544, 416)]);
        assert_eq!(admissible_canvases(Family::Rpm3x3, 6), vec![(544, 416)]);
        assert_eq!(admissible_canvases(Family::Vap2x3, 3), vec![(384, 416)]);
    }

    #[test]
    fn blank_context_differs_only_at_placeholder_and_margins() {
        for structure in [TaskStructure::rpm(4), TaskStructure::vap(4)] {
            let layout = RenderLayout::default();
            let inst = blank_instance(&structure, 20, 20);
            let img = compose_context_grid(&inst, &structure, &layout).unwrap();
            let cells = context_cells(&structure, (20, 20), &layout);
            let (mr, mc) = structure.missing_slot;
            let missing = cells[mr * structure.context_cols + mc];
            let mut glyph_pixels = 0;
            for y in 0..img.height {
                for x in 0..img.width {
                    let v = img.get(y, x);
                    match cells.iter().position(|c| c.contains(y, x)) {
                        None => assert_eq!(v, layout.ink, "margin at {y},{x}"),
                        Some(_) if missing.contains(y, x) => glyph_pixels += (v != layout.background) as usize,
                        Some(_) => assert_eq!(v, layout.background),
                    }
                }
            }
            assert!(glyph_pixels > 0, "placeholder glyph is drawn");
            assert_eq!(img.width, 3 * 20 + 2 * 2);
            assert_eq!(img.height, structure.context_rows * 20 + (structure.context_rows - 1) * 2);
        }
    }

    #[test]
    fn context_count_mismatch_is_an_error() {
        let s = TaskStructure::rpm(4);
        let mut inst = blank_instance(&s, 20, 20);
        inst.context.pop();
        assert_eq!(
            compose_context_grid(&inst, &s, &RenderLayout::default()),
            Err(RenderError::PanelCount { role: "context", expected: 8, got: 7 })
        );
    }

    #[test]
    fn answer_grid_rows() {
        let layout = RenderLayout::default();
        let band = layout.label_band(20);
        assert_eq!(band, 5);
        let (cells8, dims8) = answer_cells(8, (20, 20), &layout);
        assert_eq!(dims8, (2 * (band + 20) + 2, 4 * 20 + 3 * 2));
        assert_eq!(cells8[4].0.x, 0);
        assert!(cells8[4].0.y > cells8[3].0.y);
        let (_, dims4) = answer_cells(4, (20, 20), &layout);
        assert_eq!(dims4, (band + 20, 4 * 20 + 3 * 2));
        let (cells5, dims5) = answer_cells(5, (20, 20), &layout);
        assert_eq!(dims5.0, 2 * (band + 20) + 2);
        assert_eq!(cells5.iter().filter(|(p, _)| p.y == band).count(), 4);
        for (panel, label) in &cells5 {
            assert_eq!(label.y + label.h, panel.y, "label sits directly above its panel");
        }
        let answers: Vec<_> = (0..5).map(|_| Panel::filled(20, 20, 1.0)).collect();
        let img = compose_answer_grid(&answers, &layout).unwrap();
        for (label, ch) in cells5.iter().map(|(_, l)| *l).zip("ABCDE".chars()) {
            let inked = (label.y..label.y + label.h)
                .flat_map(|y| (label.x..label.x + label.w).map(move |x| (y, x)))
                .filter(|&(y, x)| img.get(y, x) == layout.ink)
                .count();
            assert!(inked > 0, "label {ch} drawn");
        }
        assert!(compose_answer_grid(&answers[..1], &layout).is_err());
    }

    #[test]
    fn resize_identity_at_target_size() {
        let img = Image { height: 3, width: 2, data: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6] };
        assert_eq!(resize_preserve_aspect(&img, 3, 2, 1.0).unwrap(), img);
        assert_eq!(resize_preserve_aspect(&img, 0, 2, 1.0), Err(RenderError::ZeroTarget(0, 2)));
    }

    #[test]
    fn bilinear_upscale_matches_hand_interpolation() {
        // Half-pixel centres: output coordinate o maps to (o + 0.5) / 2 - 0.5,
        // clamped to [0, 1]; the fractional weights are 0, 1/4, 3/4, 1.
        let img = Image { height: 2, width: 2, data: vec![0.0, 1.0, 1.0, 0.0] };
        let out = resize_preserve_aspect(&img, 4, 4, 1.0).unwrap();
        let weights = [0.0f32, 0.25, 0.75, 1.0];
        for (y, &fy) in weights.iter().enumerate() {
            for (x, &fx) in weights.iter().enumerate() {
                // v = (1-fy)((1-fx)*0 + fx*1) + fy((1-fx)*1 + fx*0)
                let expected = (1.0 - fy) * fx + fy * (1.0 - fx);
                assert!((out.get(y, x) - expected).abs() < 1e-6, "({y},{x}) {} vs {expected}", out.get(y, x));
            }
        }
    }

    #[test]
    fn resize_centres_the_scaled_image() {
        let img = Image::filled(100, 416, 0.0);
        let out = resize_preserve_aspect(&img, 384, 416, 1.0).unwrap();
        // s = min(3.84, 1) = 1: 100 rows, centred vertically
        let top = (384 - 100) / 2;
        assert_eq!(out.get(top - 1, 0), 1.0);
        assert_eq!(out.get(top, 0), 0.0);
        assert_eq!(out.get(top + 99, 415), 0.0);
        assert_eq!(out.get(top + 100, 0), 1.0);

        let tall = Image::filled(200, 100, 0.0);
        let out = resize_preserve_aspect(&tall, 384, 416, 1.0).unwrap();
        // s = min(1.92, 4.16) = 1.92: 384 x 192, centred horizontally
        assert_eq!(out.get(0, 111), 1.0);
        assert_eq!(out.get(0, 112), 0.0);
        assert_eq!(out.get(383, 303), 0.0);
        assert_eq!(out.get(383, 304), 1.0);
    }

    #[test]
    fn unified_render_has_canvas_size_and_range() {
        let s = TaskStructure::rpm(5);
        let inst = blank_instance(&s, 32, 32);
        let a = render_unified(&inst, &s, &RenderLayout::default()).unwrap();
        assert_eq!(a.canvas.dims(), (544, 416));
        assert_eq!(a.n_a, 5);
        let b = render_unified(&inst, &s, &RenderLayout::default()).unwrap();
        assert_eq!(a, b);
        assert!(render_unified_at(&inst, &s, &RenderLayout::default(), (448, 416)).is_err());
    }
}
