use std::f64::consts::PI;

use crate::instance::{u8_to_unit, Panel};

use super::{ShapeKind, ShapeSpec};

/// Circumradius per size level, as a fraction of the panel half-extent.
pub const SIZE_FRACTIONS: [f64; 5] = [0.15, 0.25, 0.35, 0.45, 0.55];
/// Fill intensity per shade level.
pub const SHADE_LEVELS: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];
pub const MIN_PANEL: usize = 16;

/// 8-bit fill level for a shade level (1-based).
pub fn shade_byte(shade: u8) -> u8 {
    (SHADE_LEVELS[(shade - 1) as usize] * 255.0).round() as u8
}

/// Point-sampled fill of a single centred shape on a white panel. A pixel is
/// inked when its centre lies inside the shape. Rotation is reduced modulo the
/// shape's symmetry angle first, so symmetric rotations give identical panels.
pub fn rasterize_shape(shape: &ShapeSpec, height: usize, width: usize) -> Panel {
    assert!(height >= MIN_PANEL && width >= MIN_PANEL, "panel must be at least {MIN_PANEL}x{MIN_PANEL}");
    let fill = u8_to_unit(shade_byte(shape.shade));
    let cy = height as f64 / 2.0;
    let cx = width as f64 / 2.0;
    let radius = SIZE_FRACTIONS[(shape.size - 1) as usize] * height.min(width) as f64 / 2.0;
    let mut pixels = vec![1.0f32; height * width];

    let inside: Box<dyn Fn(f64, f64) -> bool> = match shape.kind {
        ShapeKind::Circle => Box::new(move |dy, dx| dx * dx + dy * dy <= radius * radius),
        kind => {
            let sides = kind.sides();
            let symmetry = 360 / sides as u32;
            let degrees = (shape.rotation as u32 * 45) % symmetry;
            let offset = match kind {
                ShapeKind::Square => PI / 4.0,
                _ => 0.0,
            };
            let verts: Vec<(f64, f64)> = (0..sides)
                .map(|k| {
                    let a = -PI / 2.0 + offset + (degrees as f64).to_radians() + 2.0 * PI * k as f64 / sides as f64;
                    (radius * a.sin(), radius * a.cos())
                })
                .collect();
            Box::new(move |dy, dx| {
                (0..verts.len()).all(|i| {
                    let (ay, ax) = verts[i];
                    let (by, bx) = verts[(i + 1) % verts.len()];
                    (bx - ax) * (dy - ay) - (by - ay) * (dx - ax) >= 0.0
                })
            })
        }
    };
    for y in 0..height {
        let dy = y as f64 + 0.5 - cy;
        for x in 0..width {
            let dx = x as f64 + 0.5 - cx;
            if inside(dy, dx) {
                pixels[y * width + x] = fill;
            }
        }
    }
    Panel::new(height, width, pixels).expect("dimensions checked")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ShapeKind, size: u8, shade: u8, rotation: u8) -> ShapeSpec {
        ShapeSpec { kind, size, shade, rotation, position: 0 }
    }

    fn inked(p: &Panel) -> usize {
        p.pixels().iter().filter(|&&v| v < 1.0).count()
    }

    #[test]
    fn circle_is_rotation_invariant() {
        let a = rasterize_shape(&spec(ShapeKind::Circle, 3, 1, 0), 40, 40);
        let b = rasterize_shape(&spec(ShapeKind::Circle, 3, 1, 4), 40, 40);
        assert_eq!(a, b);
    }

    #[test]
    fn square_has_fourfold_symmetry() {
        let a = rasterize_shape(&spec(ShapeKind::Square, 4, 2, 0), 48, 48);
        let b = rasterize_shape(&spec(ShapeKind::Square, 4, 2, 2), 48, 48);
        let c = rasterize_shape(&spec(ShapeKind::Square, 4, 2, 1), 48, 48);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn coverage_grows_with_size() {
        for kind in ShapeKind::ALL {
            let counts: Vec<usize> =
                (1..=5).map(|s| inked(&rasterize_shape(&spec(kind, s, 1, 1), 64, 64))).collect();
            assert!(counts.windows(2).all(|w| w[0] < w[1]), "{kind:?}: {counts:?}");
        }
    }

    #[test]
    fn shade_sets_fill_value() {
        for shade in 1..=5u8 {
            let p = rasterize_shape(&spec(ShapeKind::Hexagon, 5, shade, 0), 32, 32);
            let centre = p.get(16, 16);
            assert_eq!(centre, u8_to_unit(shade_byte(shade)));
            assert_eq!(p.get(0, 0), 1.0);
        }
        assert_eq!([1, 2, 3, 4, 5].map(shade_byte), [0, 51, 102, 153, 204]);
    }

    #[test]
    fn triangle_and_pentagon_rotations_are_distinct() {
        for kind in [ShapeKind::Triangle, ShapeKind::Pentagon] {
            let panels: Vec<_> = (0..8).map(|r| rasterize_shape(&spec(kind, 5, 1, r), 64, 64)).collect();
            for i in 0..8 {
                for j in i + 1..8 {
                    assert_ne!(panels[i], panels[j], "{kind:?} rotations {i} and {j}");
                }
            }
        }
    }
}
