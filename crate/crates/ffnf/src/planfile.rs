//! Text format for fusion and parallel plans.
//!
//! One header line, then one inclusive range per line as "i j". Fusion
//! plans use the header `exclude_last=<0|1> scale_mode=<literal|folded>`;
//! parallel plans use `kind=parallel w=<int>`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{IoError, Result};
use ffnf_core::fusion::{BlockRange, FusionPlan, ScaleMode};
use ffnf_core::parallel::ParallelPlan;

#[derive(Debug, Clone, PartialEq)]
pub enum PlanFile {
    Fusion(FusionPlan),
    Parallel(ParallelPlan),
}

pub fn format_fusion_plan(plan: &FusionPlan) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "exclude_last={} scale_mode={}",
        plan.exclude_last as u8,
        plan.scale_mode.name()
    )
    .expect("string write");
    for r in &plan.ranges {
        writeln!(out, "{} {}", r.start, r.end).expect("string write");
    }
    out
}

pub fn format_parallel_plan(plan: &ParallelPlan) -> String {
    let mut out = String::new();
    writeln!(out, "kind=parallel w={}", plan.width).expect("string write");
    for r in &plan.ranges {
        writeln!(out, "{} {}", r.start, r.end).expect("string write");
    }
    out
}

pub fn save_fusion_plan(plan: &FusionPlan, path: &Path) -> Result<()> {
    fs::write(path, format_fusion_plan(plan)).map_err(|e| IoError::io(path, e))
}

pub fn save_parallel_plan(plan: &ParallelPlan, path: &Path) -> Result<()> {
    fs::write(path, format_parallel_plan(plan)).map_err(|e| IoError::io(path, e))
}

fn malformed(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::MalformedPlan {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_ranges(lines: std::str::Lines<'_>, path: &Path) -> Result<Vec<BlockRange>> {
    let mut ranges = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(malformed(path, format!("range line {line:?} is not \"i j\"")));
        };
        let start: usize = a
            .parse()
            .map_err(|_| malformed(path, format!("bad index {a:?}")))?;
        let end: usize = b
            .parse()
            .map_err(|_| malformed(path, format!("bad index {b:?}")))?;
        if end < start {
            return Err(malformed(path, format!("descending range {start} {end}")));
        }
        ranges.push(BlockRange::new(start, end));
    }
    Ok(ranges)
}

fn header_fields(header: &str) -> impl Iterator<Item = (&str, &str)> {
    header
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
}

pub fn parse_plan(text: &str, path: &Path) -> Result<PlanFile> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| malformed(path, "empty plan file"))?
        .trim();

    if header.starts_with("kind=parallel") {
        let mut width = None;
        for (k, v) in header_fields(header) {
            if k == "w" {
                width = Some(
                    v.parse::<usize>()
                        .map_err(|_| malformed(path, format!("bad width {v:?}")))?,
                );
            }
        }
        let width = width.ok_or_else(|| malformed(path, "parallel header missing w="))?;
        let ranges = parse_ranges(lines, path)?;
        for r in &ranges {
            if r.len() != width {
                return Err(malformed(
                    path,
                    format!("range [{}, {}] is not {width} blocks wide", r.start, r.end),
                ));
            }
        }
        return Ok(PlanFile::Parallel(ParallelPlan { ranges, width }));
    }

    let mut exclude_last = None;
    let mut scale_mode = None;
    for (k, v) in header_fields(header) {
        match k {
            "exclude_last" => {
                exclude_last = Some(match v {
                    "0" => false,
                    "1" => true,
                    _ => return Err(malformed(path, format!("bad exclude_last {v:?}"))),
                })
            }
            "scale_mode" => {
                scale_mode =
                    Some(ScaleMode::parse(v).map_err(|e| malformed(path, e.to_string()))?)
            }
            _ => return Err(malformed(path, format!("unknown header field {k:?}"))),
        }
    }
    let (Some(exclude_last), Some(scale_mode)) = (exclude_last, scale_mode) else {
        return Err(malformed(path, "fusion header needs exclude_last= and scale_mode="));
    };
    Ok(PlanFile::Fusion(FusionPlan {
        ranges: parse_ranges(lines, path)?,
        exclude_last,
        scale_mode,
    }))
}

pub fn load_plan(path: &Path) -> Result<PlanFile> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_plan(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn fusion_round_trip() {
        let plan = FusionPlan {
            ranges: vec![BlockRange::new(1, 3), BlockRange::new(5, 6)],
            exclude_last: true,
            scale_mode: ScaleMode::Folded,
        };
        let text = format_fusion_plan(&plan);
        assert_eq!(text, "exclude_last=1 scale_mode=folded\n1 3\n5 6\n");
        let parsed = parse_plan(&text, &PathBuf::from("mem")).unwrap();
        assert_eq!(parsed, PlanFile::Fusion(plan));
    }

    #[test]
    fn parallel_round_trip() {
        let plan = ParallelPlan {
            ranges: vec![BlockRange::new(2, 5)],
            width: 4,
        };
        let text = format_parallel_plan(&plan);
        assert_eq!(text, "kind=parallel w=4\n2 5\n");
        let parsed = parse_plan(&text, &PathBuf::from("mem")).unwrap();
        assert_eq!(parsed, PlanFile::Parallel(plan));
    }

    #[test]
    fn malformed_inputs() {
        let p = PathBuf::from("mem");
        assert!(parse_plan("", &p).is_err());
        assert!(parse_plan("exclude_last=2 scale_mode=literal\n", &p).is_err());
        assert!(parse_plan("exclude_last=0 scale_mode=linear\n", &p).is_err());
        assert!(parse_plan("kind=parallel\n", &p).is_err());
        assert!(parse_plan("kind=parallel w=2\n0 3\n", &p).is_err());
        assert!(parse_plan("exclude_last=0 scale_mode=literal\n3 1\n", &p).is_err());
        assert!(parse_plan("exclude_last=0 scale_mode=literal\n1\n", &p).is_err());
    }
}
