//! Ink document types and coordinate normalization.

use std::fmt;

use thiserror::Error;

/// A single trajectory sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn dist_sq(&self, other: &Point) -> f64 {
        (self.x - other.x).powi(2) + (self.y - other.y).powi(2)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point {
    fn from(p: [f64; 2]) -> Self {
        Self::new(p[0], p[1])
    }
}

/// One pen-down to pen-up trajectory, optionally labeled with a class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Stroke {
    pub points: Vec<Point>,
    pub label: Option<usize>,
}

impl Stroke {
    pub fn new(points: Vec<Point>, label: Option<usize>) -> Self {
        Self { points, label }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// An ordered sequence of strokes in writing order.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub num_classes: usize,
    pub strokes: Vec<Stroke>,
}

impl Document {
    pub fn new(id: impl Into<String>, num_classes: usize, strokes: Vec<Stroke>) -> Self {
        Self {
            id: id.into(),
            num_classes,
            strokes,
        }
    }

    pub fn num_strokes(&self) -> usize {
        self.strokes.len()
    }

    pub fn num_points(&self) -> usize {
        self.strokes.iter().map(Stroke::len).sum()
    }

    /// True when every stroke carries a label.
    pub fn is_labeled(&self) -> bool {
        !self.strokes.is_empty() && self.strokes.iter().all(|s| s.label.is_some())
    }

    /// Per-stroke labels, or `None` if any stroke is unlabeled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.strokes.iter().map(|s| s.label).collect()
    }

    pub fn points(&self) -> impl Iterator<Item = &Point> {
        self.strokes.iter().flat_map(|s| s.points.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoStrokes,
    NoClasses,
    EmptyStroke {
        stroke: usize,
    },
    NonFinitePoint {
        stroke: usize,
        point: usize,
    },
    LabelOutOfRange {
        stroke: usize,
        label: usize,
    },
    /// Some strokes are labeled and others are not.
    PartialLabels,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoStrokes => write!(f, "document has no strokes"),
            Violation::NoClasses => write!(f, "num_classes must be at least 1"),
            Violation::EmptyStroke { stroke } => write!(f, "stroke {stroke} has no points"),
            Violation::NonFinitePoint { stroke, point } => {
                write!(f, "stroke {stroke} point {point} is not finite")
            }
            Violation::LabelOutOfRange { stroke, label } => {
                write!(f, "stroke {stroke} label {label} is out of range")
            }
            Violation::PartialLabels => write!(f, "labels must be present on all strokes or none"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum InkError {
    #[error("document has no points")]
    EmptyDocument,
    #[error("invalid document: {0:?}")]
    Invalid(Vec<Violation>),
}

/// Lists every broken document invariant. An empty list means the document is well formed.
pub fn validate_document(doc: &Document) -> Vec<Violation> {
    let mut out = Vec::new();
    if doc.strokes.is_empty() {
        out.push(Violation::NoStrokes);
    }
    if doc.num_classes == 0 {
        out.push(Violation::NoClasses);
    }
    let mut labeled = 0;
    for (si, stroke) in doc.strokes.iter().enumerate() {
        if stroke.points.is_empty() {
            out.push(Violation::EmptyStroke { stroke: si });
        }
        for (pi, p) in stroke.points.iter().enumerate() {
            if !p.is_finite() {
                out.push(Violation::NonFinitePoint {
                    stroke: si,
                    point: pi,
                });
            }
        }
        if let Some(label) = stroke.label {
            labeled += 1;
            if label >= doc.num_classes {
                out.push(Violation::LabelOutOfRange { stroke: si, label });
            }
        }
    }
    if labeled != 0 && labeled != doc.strokes.len() {
        out.push(Violation::PartialLabels);
    }
    out
}

/// Axis-aligned bounding box as `(min_x, min_y, max_x, max_y)`.
pub fn bounding_box<'a>(
    points: impl IntoIterator<Item = &'a Point>,
) -> Option<(f64, f64, f64, f64)> {
    let mut it = points.into_iter();
    let first = it.next()?;
    let init = (first.x, first.y, first.x, first.y);
    Some(it.fold(init, |(x0, y0, x1, y1), p| {
        (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y))
    }))
}

/// Centers the document bounding box at the origin and applies one uniform
/// scale so the longer side spans `[-1, 1]`.
///
/// A zero-extent document collapses to the origin.
pub fn normalize_document(doc: &Document) -> Result<Document, InkError> {
    let (x0, y0, x1, y1) = bounding_box(doc.points()).ok_or(InkError::EmptyDocument)?;
    let cx = 0.5 * (x0 + x1);
    let cy = 0.5 * (y0 + y1);
    let extent = (x1 - x0).max(y1 - y0);
    let scale = if extent > 0.0 { 2.0 / extent } else { 0.0 };
    let strokes = doc
        .strokes
        .iter()
        .map(|s| Stroke {
            points: s
                .points
                .iter()
                .map(|p| {
                    Point::new(
                        ((p.x - cx) * scale).clamp(-1.0, 1.0),
                        ((p.y - cy) * scale).clamp(-1.0, 1.0),
                    )
                })
                .collect(),
            label: s.label,
        })
        .collect();
    Ok(Document {
        id: doc.id.clone(),
        num_classes: doc.num_classes,
        strokes,
    })
}
