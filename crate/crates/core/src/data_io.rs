//! Document files and the synthetic labeled-corpus generator.
//!
//! A document file is UTF-8 JSON:
//!
//! ```text
//! {"id":"0001","num_classes":3,"strokes":[{"label":0,"points":[[0.100000,-0.250000],...]},...]}
//! ```
//!
//! Writing is canonical: keys sorted, no whitespace, coordinates with six
//! decimals, `label` omitted on unlabeled strokes. Unknown fields are ignored
//! on read.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ink::{normalize_document, Document, Point, Stroke};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> DataError {
    DataError::Schema {
        field: field.into(),
        message: message.into(),
    }
}

/// Byte offset of a 1-based (line, column) position.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for _ in 1..line {
        match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(p) => offset += p + 1,
            None => return bytes.len(),
        }
    }
    (offset + column.saturating_sub(1)).min(bytes.len())
}

pub fn parse_document(bytes: &[u8]) -> Result<Document, DataError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| DataError::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| schema("$", "expected an object"))?;
    let id = obj
        .get("id")
        .ok_or_else(|| schema("id", "missing"))?
        .as_str()
        .ok_or_else(|| schema("id", "expected a string"))?
        .to_owned();
    let num_classes = obj
        .get("num_classes")
        .ok_or_else(|| schema("num_classes", "missing"))?
        .as_u64()
        .ok_or_else(|| schema("num_classes", "expected a non-negative integer"))?
        as usize;
    let raw_strokes = obj
        .get("strokes")
        .ok_or_else(|| schema("strokes", "missing"))?
        .as_array()
        .ok_or_else(|| schema("strokes", "expected an array"))?;

    let mut strokes = Vec::with_capacity(raw_strokes.len());
    for (si, raw) in raw_strokes.iter().enumerate() {
        let field = format!("strokes[{si}]");
        let s = raw
            .as_object()
            .ok_or_else(|| schema(&field, "expected an object"))?;
        let label = match s.get("label") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_u64().ok_or_else(|| {
                schema(format!("{field}.label"), "expected a non-negative integer")
            })? as usize),
        };
        let raw_points = s
            .get("points")
            .ok_or_else(|| schema(format!("{field}.points"), "missing"))?
            .as_array()
            .ok_or_else(|| schema(format!("{field}.points"), "expected an array"))?;
        let mut points = Vec::with_capacity(raw_points.len());
        for (pi, p) in raw_points.iter().enumerate() {
            let pfield = format!("{field}.points[{pi}]");
            let pair = p
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| schema(&pfield, "expected [x, y]"))?;
            let x = pair[0]
                .as_f64()
                .ok_or_else(|| schema(&pfield, "x is not a number"))?;
            let y = pair[1]
                .as_f64()
                .ok_or_else(|| schema(&pfield, "y is not a number"))?;
            points.push(Point::new(x, y));
        }
        strokes.push(Stroke { points, label });
    }
    Ok(Document {
        id,
        num_classes,
        strokes,
    })
}

fn push_coord(out: &mut String, v: f64) {
    // A value that rounds to zero keeps its sign; normalize so -0.000000 never appears.
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        out.push_str("0.000000");
    } else {
        out.push_str(&s);
    }
}

pub fn write_document(doc: &Document) -> Vec<u8> {
    let mut out = String::with_capacity(64 + doc.num_points() * 22);
    out.push_str("{\"id\":");
    out.push_str(&serde_json::to_string(&doc.id).expect("string serialization"));
    let _ = write!(out, ",\"num_classes\":{},\"strokes\":[", doc.num_classes);
    for (si, s) in doc.strokes.iter().enumerate() {
        if si > 0 {
            out.push(',');
        }
        out.push('{');
        if let Some(label) = s.label {
            let _ = write!(out, "\"label\":{label},");
        }
        out.push_str("\"points\":[");
        for (pi, p) in s.points.iter().enumerate() {
            if pi > 0 {
                out.push(',');
            }
            out.push('[');
            push_coord(&mut out, p.x);
            out.push(',');
            push_coord(&mut out, p.y);
            out.push(']');
        }
        out.push_str("]}");
    }
    out.push_str("]}");
    out.into_bytes()
}

pub fn read_document_file(path: &Path) -> Result<Document, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_document(&bytes)
}

pub fn write_document_file(path: &Path, doc: &Document) -> Result<(), DataError> {
    std::fs::write(path, write_document(doc)).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Reads every `*.json` document in a directory, sorted by file name.
pub fn read_document_dir(dir: &Path) -> Result<Vec<Document>, DataError> {
    let io = |source| DataError::Io {
        path: dir.to_owned(),
        source,
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_document_file(p)).collect()
}

/// Writes documents as `NNNN.json` into `dir`, creating it if needed.
pub fn write_document_dir(dir: &Path, docs: &[Document]) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_owned(),
        source,
    })?;
    for (i, d) in docs.iter().enumerate() {
        write_document_file(&dir.join(format!("{i:04}.json")), d)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Short jittered strokes along horizontal baselines.
    TextRow,
    /// Long axis-aligned lines forming a lattice.
    TableGrid,
    /// Closed curves.
    FigureBlob,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 3] = [Self::TextRow, Self::TableGrid, Self::FigureBlob];

    pub fn name(&self) -> &'static str {
        match self {
            Self::TextRow => "text-row",
            Self::TableGrid => "table-grid",
            Self::FigureBlob => "figure-blob",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub num_documents: usize,
    /// Class `i` is generated by `classes[i]`.
    pub classes: Vec<GeneratorKind>,
    /// Inclusive stroke-count range per document.
    pub strokes_per_doc: (usize, usize),
    /// Std-dev of per-point Gaussian noise, in normalized units.
    pub jitter: f64,
    pub rng_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_documents: 200,
            classes: GeneratorKind::ALL.to_vec(),
            strokes_per_doc: (16, 28),
            jitter: 0.002,
            rng_seed: 7,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CorpusSpecError {
    #[error("num_documents must be at least 1")]
    NoDocuments,
    #[error("classes must be non-empty")]
    NoClasses,
    #[error("strokes_per_doc range is empty or starts at 0")]
    BadStrokeRange,
    #[error("jitter must be finite and non-negative")]
    BadJitter,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusSpecError> {
        if self.num_documents == 0 {
            return Err(CorpusSpecError::NoDocuments);
        }
        if self.classes.is_empty() {
            return Err(CorpusSpecError::NoClasses);
        }
        let (lo, hi) = self.strokes_per_doc;
        if lo == 0 || lo > hi {
            return Err(CorpusSpecError::BadStrokeRange);
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(CorpusSpecError::BadJitter);
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; derives independent per-document seeds.
fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D1_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn quantize(v: f64) -> f64 {
    let q = (v * 1e6).round() / 1e6;
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

/// Pen sampling spacing along a trajectory.
const PEN_STEP: f64 = 0.012;

/// Resamples a polyline at roughly `PEN_STEP` spacing, keeping both ends.
fn sample_polyline(vertices: &[Point]) -> Vec<Point> {
    let mut out = vec![vertices[0]];
    for w in vertices.windows(2) {
        let len = w[0].dist(&w[1]);
        let n = ((len / PEN_STEP).ceil() as usize).max(1);
        for j in 1..=n {
            let t = j as f64 / n as f64;
            out.push(Point::new(
                w[0].x + t * (w[1].x - w[0].x),
                w[0].y + t * (w[1].y - w[0].y),
            ));
        }
    }
    out
}

struct Cell {
    cx: f64,
    cy: f64,
    half: f64,
}

fn text_block(rng: &mut ChaCha8Rng, cell: &Cell, n: usize) -> Vec<Vec<Point>> {
    let per_row = 6;
    let rows = n.div_ceil(per_row);
    let row_gap = (1.6 * cell.half / rows.max(1) as f64).min(0.14);
    let top = cell.cy + 0.5 * row_gap * (rows as f64 - 1.0);
    let left = cell.cx - 0.8 * cell.half;
    let mut strokes = Vec::with_capacity(n);
    for i in 0..n {
        let row = i / per_row;
        let col = i % per_row;
        let base_y = top - row as f64 * row_gap;
        let x0 = left + col as f64 * 0.11 + rng.gen_range(-0.01..0.01);
        let height = rng.gen_range(0.04..0.07);
        let width = rng.gen_range(0.02..0.06);
        // A short glyph-like zigzag or hook of 2-4 segments.
        let segs = rng.gen_range(2..=4);
        let mut verts = Vec::with_capacity(segs + 1);
        for s in 0..=segs {
            let t = s as f64 / segs as f64;
            let up = if s % 2 == 0 { 0.0 } else { height };
            verts.push(Point::new(
                x0 + t * width + rng.gen_range(-0.008..0.008),
                base_y + up * rng.gen_range(0.6..1.0),
            ));
        }
        strokes.push(sample_polyline(&verts));
    }
    strokes
}

fn table_block(rng: &mut ChaCha8Rng, cell: &Cell, n: usize) -> Vec<Vec<Point>> {
    let horizontal = n.div_ceil(2);
    let vertical = n - horizontal;
    let w = rng.gen_range(0.33..0.42);
    let h = rng.gen_range(0.30..0.40);
    let (x0, y0) = (cell.cx - 0.5 * w, cell.cy - 0.5 * h);
    let mut strokes = Vec::with_capacity(n);
    for i in 0..horizontal {
        let y = y0 + h * i as f64 / (horizontal.max(2) - 1) as f64;
        let slope = rng.gen_range(-0.01..0.01);
        strokes.push(sample_polyline(&[
            Point::new(x0, y),
            Point::new(x0 + w, y + slope),
        ]));
    }
    for j in 0..vertical {
        let x = x0 + w * j as f64 / (vertical.max(2) - 1) as f64;
        let slope = rng.gen_range(-0.01..0.01);
        strokes.push(sample_polyline(&[
            Point::new(x, y0 + h),
            Point::new(x + slope, y0),
        ]));
    }
    strokes
}

fn figure_block(rng: &mut ChaCha8Rng, cell: &Cell, n: usize) -> Vec<Vec<Point>> {
    let cols = (n as f64).sqrt().ceil() as usize;
    let pitch = 1.5 * cell.half / cols.max(1) as f64;
    let mut strokes = Vec::with_capacity(n);
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        let cx = cell.cx - 0.75 * cell.half + pitch * (c as f64 + 0.5);
        let cy = cell.cy + 0.75 * cell.half - pitch * (r as f64 + 0.5);
        let rx = rng.gen_range(0.045..0.075);
        let ry = rng.gen_range(0.045..0.075);
        let start = rng.gen_range(0.0..std::f64::consts::TAU);
        let segs = 48;
        let verts: Vec<Point> = (0..=segs)
            .map(|s| {
                let a = start + std::f64::consts::TAU * s as f64 / segs as f64;
                Point::new(cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect();
        strokes.push(sample_polyline(&verts));
    }
    strokes
}

fn generate_document(spec: &CorpusSpec, index: usize) -> Document {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.rng_seed, index as u64));
    let (lo, hi) = spec.strokes_per_doc;
    let target = rng.gen_range(lo..=hi);

    // Four blocks on a 2x2 layout, each filled by one class generator.
    let cells = [(-0.5, 0.5), (0.5, 0.5), (-0.5, -0.5), (0.5, -0.5)];
    let mut budgets = [target / 4; 4];
    for b in budgets.iter_mut().take(target % 4) {
        *b += 1;
    }
    let noise = Normal::new(0.0, spec.jitter.max(f64::MIN_POSITIVE)).expect("valid std-dev");
    let mut strokes = Vec::with_capacity(target);
    for (&(cx, cy), &budget) in cells.iter().zip(&budgets) {
        if budget == 0 {
            continue;
        }
        let class = rng.gen_range(0..spec.classes.len());
        let cell = Cell { cx, cy, half: 0.45 };
        let raw = match spec.classes[class] {
            GeneratorKind::TextRow => text_block(&mut rng, &cell, budget),
            GeneratorKind::TableGrid => table_block(&mut rng, &cell, budget),
            GeneratorKind::FigureBlob => figure_block(&mut rng, &cell, budget),
        };
        for pts in raw {
            let points = pts
                .into_iter()
                .map(|p| {
                    if spec.jitter > 0.0 {
                        Point::new(p.x + noise.sample(&mut rng), p.y + noise.sample(&mut rng))
                    } else {
                        p
                    }
                })
                .collect();
            strokes.push(Stroke::new(points, Some(class)));
        }
    }
    let doc = Document::new(format!("{index:04}"), spec.classes.len(), strokes);
    let mut doc = normalize_document(&doc).expect("generated documents have points");
    for s in &mut doc.strokes {
        for p in &mut s.points {
            *p = Point::new(quantize(p.x), quantize(p.y));
        }
    }
    doc
}

/// Generates a deterministic labeled corpus. Every document is normalized and
/// its coordinates are quantized to the file format's precision, so a
/// write/parse round trip is lossless.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Document>, CorpusSpecError> {
    spec.validate()?;
    Ok((0..spec.num_documents)
        .map(|i| generate_document(spec, i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ink::validate_document;

    fn two_strokes() -> Document {
        Document::new(
            "d",
            3,
            vec![
                Stroke::new(
                    vec![Point::new(0.5, -0.25), Point::new(1.0, 0.125)],
                    Some(2),
                ),
                Stroke::new(vec![Point::new(-1.0, 0.0)], Some(0)),
            ],
        )
    }

    #[test]
    fn round_trip_two_strokes() {
        let d = two_strokes();
        let bytes = write_document(&d);
        assert_eq!(parse_document(&bytes).unwrap(), d);
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            r#"{"id":"d","num_classes":3,"strokes":[{"label":2,"points":[[0.500000,-0.250000],[1.000000,0.125000]]},{"label":0,"points":[[-1.000000,0.000000]]}]}"#
        );
    }

    #[test]
    fn unlabeled_omits_label() {
        let mut d = two_strokes();
        for s in &mut d.strokes {
            s.label = None;
        }
        let text = String::from_utf8(write_document(&d)).unwrap();
        assert!(!text.contains("label"));
        assert_eq!(parse_document(text.as_bytes()).unwrap(), d);
    }

    #[test]
    fn truncated_is_parse_error() {
        let bytes = write_document(&two_strokes());
        let cut = &bytes[..bytes.len() - 7];
        match parse_document(cut) {
            Err(DataError::Parse { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_offset_points_at_problem() {
        let text = b"{\"id\":\"a\",\n\"num_classes\":2,\n\"strokes\":[}";
        match parse_document(text) {
            Err(DataError::Parse { offset, .. }) => assert_eq!(text[offset], b'}'),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_ignored() {
        let text = br#"{"author":"x","id":"a","num_classes":2,"strokes":[{"pressure":[1],"points":[[0,1]],"label":1}]}"#;
        let d = parse_document(text).unwrap();
        assert_eq!(d.strokes[0].label, Some(1));
        assert_eq!(d.strokes[0].points, vec![Point::new(0.0, 1.0)]);
    }

    #[test]
    fn schema_errors_name_field() {
        let text = br#"{"id":"a","num_classes":2,"strokes":[{"points":[[0,1]]},{"points":[[0]]}]}"#;
        match parse_document(text) {
            Err(DataError::Schema { field, .. }) => assert_eq!(field, "strokes[1].points[0]"),
            other => panic!("expected schema error, got {other:?}"),
        }
        match parse_document(br#"{"id":"a","strokes":[]}"#) {
            Err(DataError::Schema { field, .. }) => assert_eq!(field, "num_classes"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn write_is_byte_stable() {
        let mut d = two_strokes();
        d.strokes[0].points[0] = Point::new(0.123_456_789, -1e-9);
        let once = write_document(&d);
        let twice = write_document(&parse_document(&once).unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn corpus_is_deterministic() {
        let spec = CorpusSpec {
            num_documents: 5,
            ..CorpusSpec::default()
        };
        assert_eq!(
            generate_corpus(&spec).unwrap(),
            generate_corpus(&spec).unwrap()
        );
        let other = CorpusSpec {
            rng_seed: 8,
            ..spec.clone()
        };
        assert_ne!(
            generate_corpus(&spec).unwrap(),
            generate_corpus(&other).unwrap()
        );
    }

    #[test]
    fn single_class_corpus() {
        let spec = CorpusSpec {
            num_documents: 4,
            classes: vec![GeneratorKind::TableGrid],
            ..CorpusSpec::default()
        };
        for d in generate_corpus(&spec).unwrap() {
            assert!(d.strokes.iter().all(|s| s.label == Some(0)));
        }
    }

    #[test]
    fn class_supports_balanced() {
        let docs = generate_corpus(&CorpusSpec::default()).unwrap();
        let mut counts = [0usize; 3];
        for d in &docs {
            for s in &d.strokes {
                counts[s.label.unwrap()] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            assert!(c as f64 >= 0.10 * total as f64, "{counts:?}");
        }
    }

    #[test]
    fn stroke_counts_within_range() {
        let spec = CorpusSpec {
            num_documents: 30,
            strokes_per_doc: (5, 9),
            ..CorpusSpec::default()
        };
        for d in generate_corpus(&spec).unwrap() {
            assert!((5..=9).contains(&d.strokes.len()));
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = CorpusSpec {
            classes: vec![],
            ..CorpusSpec::default()
        };
        assert_eq!(generate_corpus(&spec), Err(CorpusSpecError::NoClasses));
        let spec = CorpusSpec {
            strokes_per_doc: (4, 2),
            ..CorpusSpec::default()
        };
        assert_eq!(generate_corpus(&spec), Err(CorpusSpecError::BadStrokeRange));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn generated_docs_round_trip_and_validate(seed in any::<u64>(), n in 1usize..4) {
                let spec = CorpusSpec { num_documents: n, rng_seed: seed, ..CorpusSpec::default() };
                for d in generate_corpus(&spec).unwrap() {
                    prop_assert!(validate_document(&d).is_empty());
                    prop_assert_eq!(&parse_document(&write_document(&d)).unwrap(), &d);
                }
            }
        }
    }
}
