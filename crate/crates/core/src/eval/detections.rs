use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::eval::ap::Rect;

/// One box reported by an external detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub rect: Rect,
    pub confidence: f64,
    pub class: String,
}

impl Detection {
    pub fn new(image_id: &str, rect: Rect, confidence: f64, class: &str) -> std::result::Result<Self, String> {
        if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
            return Err(format!("score {confidence} is outside [0, 1]"));
        }
        let finite = [rect.x, rect.y, rect.w, rect.h].iter().all(|v| v.is_finite());
        if !finite || rect.w <= 0.0 || rect.h <= 0.0 {
            return Err(format!("box {:?} is degenerate", [rect.x, rect.y, rect.w, rect.h]));
        }
        Ok(Self {
            image_id: image_id.to_string(),
            rect,
            confidence,
            class: class.to_string(),
        })
    }
}

#[derive(Deserialize)]
struct Record {
    id: String,
    class: String,
    #[serde(rename = "box")]
    rect: [f64; 4],
    score: f64,
}

/// Read `{"id", "class", "box": [x, y, w, h], "score"}` records, one per line.
pub fn ingest_detections(path: &Path) -> Result<Vec<Detection>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let [x, y, w, h] = rec.rect;
        out.push(Detection::new(&rec.id, Rect::new(x, y, w, h), rec.score, &rec.class).map_err(parse_err)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(s: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(s.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_records() {
        let f = file("{\"id\": \"img1\", \"class\": \"person\", \"box\": [1, 2, 3, 4], \"score\": 0.9}\n");
        let d = ingest_detections(f.path()).unwrap();
        assert_eq!(d, vec![Detection::new("img1", Rect::new(1.0, 2.0, 3.0, 4.0), 0.9, "person").unwrap()]);
        assert!(ingest_detections(file("").path()).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_scores_with_line_number() {
        let f = file(concat!(
            "{\"id\": \"a\", \"class\": \"face\", \"box\": [0, 0, 1, 1], \"score\": 0.5}\n",
            "{\"id\": \"a\", \"class\": \"face\", \"box\": [0, 0, 1, 1], \"score\": 1.5}\n"
        ));
        match ingest_detections(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let f = file("{\"id\": \"a\"}\n");
        assert!(matches!(ingest_detections(f.path()), Err(Error::Parse { line: 1, .. })));
    }
}
