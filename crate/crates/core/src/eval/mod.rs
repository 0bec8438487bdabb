//! Detection precision and latency evaluation.

pub mod ap;
pub mod detections;
pub mod latency;
pub mod report;

pub use ap::{evaluate_ap, iou, match_detections, voc_ap, APResult, Rect};
pub use detections::{ingest_detections, Detection};
pub use latency::{latency_bench, Clock, LatencyStats, WallClock};
pub use report::{rate_precision_report, write_latency_csv, RateRow};
