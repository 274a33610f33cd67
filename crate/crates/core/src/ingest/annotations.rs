//! Seizure annotations from CSV.
//!
//! Two layouts are accepted, one per file:
//! - term-based `channel,start_time,stop_time,label,confidence`, where only
//!   rows on the whole-record channel `TERM` count;
//! - generic `start,stop,label`.
//!
//! Lines starting with `#` and a header row are skipped. Only seizure rows
//! (label containing `seiz`, any case) are returned; overlapping events are
//! kept as they are.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IngestError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventLabel {
    Seizure,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub start: f64,
    pub stop: f64,
    pub label: EventLabel,
}

impl AnnotationEvent {
    pub fn seizure(start: f64, stop: f64) -> Self {
        AnnotationEvent {
            start,
            stop,
            label: EventLabel::Seizure,
        }
    }
}

pub fn is_seizure_label(label: &str) -> bool {
    label.to_ascii_lowercase().contains("seiz")
}

/// Parses annotation text; `path` is used for error messages.
pub fn parse_annotations_str(text: &str, path: &Path) -> Result<Vec<AnnotationEvent>> {
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() || row.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = row.split(',').map(str::trim).collect();
        let err = |msg: String| IngestError::Annotation {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let (start, stop, label) = match cols.len() {
            3 => (cols[0], cols[1], cols[2]),
            5 => {
                if !cols[0].eq_ignore_ascii_case("TERM") && !is_header(&cols) {
                    continue;
                }
                (cols[1], cols[2], cols[3])
            }
            n => return Err(err(format!("expected 3 or 5 columns, found {n}"))),
        };
        if is_header(&cols) {
            continue;
        }
        let start: f64 = start.parse().map_err(|_| err(format!("start time {start:?} is not a number")))?;
        let stop: f64 = stop.parse().map_err(|_| err(format!("stop time {stop:?} is not a number")))?;
        if !start.is_finite() || !stop.is_finite() || start < 0.0 {
            return Err(err(format!("invalid times {start}..{stop}")));
        }
        if start >= stop {
            return Err(err(format!("start {start} is not before stop {stop}")));
        }
        if is_seizure_label(label) {
            events.push(AnnotationEvent::seizure(start, stop));
        }
    }
    Ok(events)
}

/// A header row names its columns instead of holding numbers.
fn is_header(cols: &[&str]) -> bool {
    let start = if cols.len() == 5 { cols[1] } else { cols[0] };
    start.to_ascii_lowercase().starts_with("start")
}

pub fn parse_annotations_csv(path: &Path) -> Result<Vec<AnnotationEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
    parse_annotations_str(&text, path)
}

/// Term-based CSV text for `events` over a record of `duration` seconds,
/// with background rows filling the gaps.
pub fn to_csv_bi(events: &[AnnotationEvent], duration: f64) -> String {
    let mut seiz: Vec<(f64, f64)> = events
        .iter()
        .filter(|e| e.label == EventLabel::Seizure)
        .map(|e| (e.start, e.stop))
        .collect();
    seiz.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = format!("# version = csv_v1.0.0\n# duration = {duration:.4} secs\n#\n");
    out.push_str("channel,start_time,stop_time,label,confidence\n");
    let mut t = 0.0;
    for (s, e) in seiz {
        if s > t {
            out.push_str(&format!("TERM,{t:.4},{s:.4},bckg,1.0000\n"));
        }
        out.push_str(&format!("TERM,{s:.4},{e:.4},seiz,1.0000\n"));
        t = f64::max(t, e);
    }
    if duration > t {
        out.push_str(&format!("TERM,{t:.4},{duration:.4},bckg,1.0000\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<AnnotationEvent>> {
        parse_annotations_str(s, Path::new("a.csv"))
    }

    #[test]
    fn examples() {
        assert_eq!(parse("TERM,12.0,13.5,seiz,1.0").unwrap(), vec![AnnotationEvent::seizure(12.0, 13.5)]);
        assert!(parse("").unwrap().is_empty());
        let overlapping = parse("1,5,seiz\n3,8,SEIZ\n9,10,bckg").unwrap();
        assert_eq!(
            overlapping,
            vec![AnnotationEvent::seizure(1.0, 5.0), AnnotationEvent::seizure(3.0, 8.0)]
        );
    }

    #[test]
    fn term_rows_only() {
        let text = "# version = csv_v1.0.0\n\
                    channel,start_time,stop_time,label,confidence\n\
                    FP1-F7,0.0,4.0,seiz,1.0\n\
                    TERM,0.0000,36.8868,bckg,1.0000\n\
                    TERM,36.8868,183.3055,seiz,1.0000\n";
        assert_eq!(parse(text).unwrap(), vec![AnnotationEvent::seizure(36.8868, 183.3055)]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse("start,stop,label\n1,2,seiz\nx,3,seiz") {
            Err(IngestError::Annotation { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse("# c\nTERM,5.0,5.0,seiz,1.0") {
            Err(IngestError::Annotation { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse("1,2").is_err());
    }

    #[test]
    fn writer_round_trips() {
        let ev = vec![AnnotationEvent::seizure(20.5, 41.25), AnnotationEvent::seizure(3.0, 9.0)];
        let text = to_csv_bi(&ev, 60.0);
        let mut back = parse(&text).unwrap();
        back.sort_by(|a, b| b.start.total_cmp(&a.start));
        assert_eq!(back, ev);
        assert_eq!(text.matches("bckg").count(), 3);
    }
}
