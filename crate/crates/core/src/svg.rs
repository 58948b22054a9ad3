//! SVG rendering of labeled documents.

use std::fmt::Write as _;

use thiserror::Error;

use crate::ink::{bounding_box, Document};

/// Stroke colors by class id; class `t` uses entry `t % len`.
pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

const MARGIN: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum SvgError {
    #[error("{labels} labels for {strokes} strokes")]
    LabelCount { labels: usize, strokes: usize },
    #[error("document has no points")]
    Empty,
}

pub fn class_color(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

/// One polyline per stroke, colored by label. The y axis points up, so the
/// drawing is mirrored into SVG's downward y.
pub fn export_svg(doc: &Document, labels: &[usize]) -> Result<Vec<u8>, SvgError> {
    if labels.len() != doc.strokes.len() {
        return Err(SvgError::LabelCount {
            labels: labels.len(),
            strokes: doc.strokes.len(),
        });
    }
    let (x0, y0, x1, y1) = bounding_box(doc.points()).ok_or(SvgError::Empty)?;
    let (w, h) = ((x1 - x0).max(MARGIN), (y1 - y0).max(MARGIN));
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" viewBox=\"{:.6} {:.6} {:.6} {:.6}\">",
        x0 - MARGIN,
        -y1 - MARGIN,
        w + 2.0 * MARGIN,
        h + 2.0 * MARGIN
    );
    for (s, &label) in doc.strokes.iter().zip(labels) {
        let _ = write!(
            out,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"0.006\" stroke-linecap=\"round\" stroke-linejoin=\"round\" data-class=\"{label}\" points=\"",
            class_color(label)
        );
        for (i, p) in s.points.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{:.6},{:.6}", p.x, -p.y + 0.0);
        }
        out.push_str("\"/>\n");
    }
    out.push_str("</svg>\n");
    Ok(out.into_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ink::{Point, Stroke};

    fn doc() -> Document {
        Document::new(
            "d",
            3,
            vec![
                Stroke::new(vec![Point::new(-1.0, 0.0), Point::new(1.0, 0.5)], None),
                Stroke::new(vec![Point::new(0.0, -0.5)], None),
            ],
        )
    }

    #[test]
    fn one_polyline_per_stroke() {
        let svg = String::from_utf8(export_svg(&doc(), &[0, 2]).unwrap()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("viewBox=\"-1.020000 -0.520000 2.040000 1.040000\""));
        let first = svg.find(PALETTE[0]).unwrap();
        let second = svg.find(PALETTE[2]).unwrap();
        assert!(first < second);
    }

    #[test]
    fn byte_stable_and_checked() {
        assert_eq!(
            export_svg(&doc(), &[1, 1]).unwrap(),
            export_svg(&doc(), &[1, 1]).unwrap()
        );
        assert_eq!(
            export_svg(&doc(), &[1]),
            Err(SvgError::LabelCount {
                labels: 1,
                strokes: 2
            })
        );
        assert_eq!(class_color(PALETTE.len() + 1), PALETTE[1]);
    }
}
