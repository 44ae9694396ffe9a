use std::io::{Read, Write};
use std::path::Path;

use crate::manifest::GroupSet;
use crate::scoring::{csv_writer, Protocol};

use super::{RemovalEvent, RemovalTrace, SamplingError};

/// `step,identity_id,group,own_group_ids,diag_<g>_before,diag_<g>_after,...`
pub fn write_removal_log<W: Write>(trace: &RemovalTrace, w: W) -> Result<(), SamplingError> {
    let mut wtr = csv_writer(w);
    let mut header: Vec<String> = ["step", "identity_id", "group", "own_group_ids"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for g in trace.groups.labels() {
        header.push(format!("diag_{g}_before"));
        header.push(format!("diag_{g}_after"));
    }
    wtr.write_record(&header)?;
    for e in &trace.events {
        let mut row = vec![
            e.step.to_string(),
            e.identity_id.clone(),
            trace.groups.name(e.group).to_string(),
            e.own_group_ids.to_string(),
        ];
        for (b, a) in e.diag_before.iter().zip(&e.diag_after) {
            row.push(b.to_string());
            row.push(a.to_string());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// `step,diag_<g1>,...,diag_<gd>`, one row per step starting at step 0.
pub fn write_evolution<W: Write>(trace: &RemovalTrace, w: W) -> Result<(), SamplingError> {
    let mut wtr = csv_writer(w);
    let mut header = vec!["step".to_string()];
    header.extend(trace.groups.labels().iter().map(|g| format!("diag_{g}")));
    wtr.write_record(&header)?;
    for (step, diag) in trace.evolution().iter().enumerate() {
        let mut row = vec![step.to_string()];
        row.extend(diag.iter().map(f64::to_string));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Diagonal rows read back from an evolution file.
#[derive(Debug, Clone, PartialEq)]
pub struct Evolution {
    pub groups: GroupSet,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl Evolution {
    pub fn as_rows(&self) -> Vec<(usize, &[f64])> {
        self.rows.iter().map(|(s, d)| (*s, d.as_slice())).collect()
    }
}

fn open(path: &Path) -> Result<std::fs::File, SamplingError> {
    std::fs::File::open(path).map_err(|source| SamplingError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_f64(raw: &str, line: u64) -> Result<f64, SamplingError> {
    raw.parse::<f64>()
        .map_err(|_| SamplingError::TraceFormat(format!("line {line}: bad number `{raw}`")))
}

fn parse_step(raw: &str, line: u64) -> Result<usize, SamplingError> {
    raw.parse::<usize>()
        .map_err(|_| SamplingError::TraceFormat(format!("line {line}: bad step `{raw}`")))
}

pub fn read_evolution(path: &Path) -> Result<Evolution, SamplingError> {
    read_evolution_from(open(path)?)
}

pub(crate) fn read_evolution_from<R: Read>(r: R) -> Result<Evolution, SamplingError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("step") {
        return Err(SamplingError::TraceFormat("first column must be `step`".into()));
    }
    let labels = header
        .iter()
        .skip(1)
        .map(|h| {
            h.strip_prefix("diag_")
                .map(str::to_string)
                .ok_or_else(|| SamplingError::TraceFormat(format!("unexpected column `{h}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let groups = GroupSet::new(labels).map_err(|e| SamplingError::TraceFormat(e.to_string()))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let step = parse_step(&rec[0], line)?;
        let diag = rec
            .iter()
            .skip(1)
            .map(|v| parse_f64(v, line))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((step, diag));
    }
    Ok(Evolution { groups, rows })
}

/// Rebuilds a trace from a removal log. Strategy and seed are not stored in
/// the log; the strategy is recorded as `log`.
pub fn read_removal_log(path: &Path) -> Result<RemovalTrace, SamplingError> {
    read_removal_log_from(open(path)?)
}

pub(crate) fn read_removal_log_from<R: Read>(r: R) -> Result<RemovalTrace, SamplingError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let fixed = ["step", "identity_id", "group", "own_group_ids"];
    for (i, name) in fixed.iter().enumerate() {
        if header.get(i) != Some(name) {
            return Err(SamplingError::TraceFormat(format!("column {} must be `{name}`", i + 1)));
        }
    }
    let rest: Vec<&str> = header.iter().skip(fixed.len()).collect();
    if rest.is_empty() || rest.len() % 2 != 0 {
        return Err(SamplingError::TraceFormat("expected before/after column pairs".into()));
    }
    let mut labels = Vec::new();
    for pair in rest.chunks(2) {
        let before = pair[0].strip_prefix("diag_").and_then(|s| s.strip_suffix("_before"));
        let after = pair[1].strip_prefix("diag_").and_then(|s| s.strip_suffix("_after"));
        match (before, after) {
            (Some(b), Some(a)) if a == b => labels.push(b.to_string()),
            _ => {
                return Err(SamplingError::TraceFormat(format!(
                    "unexpected columns `{}`, `{}`",
                    pair[0], pair[1]
                )))
            }
        }
    }
    let groups = GroupSet::new(labels).map_err(|e| SamplingError::TraceFormat(e.to_string()))?;
    let mut events = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let group = groups.index_of(&rec[2]).ok_or_else(|| {
            SamplingError::TraceFormat(format!("line {line}: unknown group `{}`", &rec[2]))
        })?;
        let mut diag_before = Vec::with_capacity(groups.len());
        let mut diag_after = Vec::with_capacity(groups.len());
        for k in 0..groups.len() {
            diag_before.push(parse_f64(&rec[4 + 2 * k], line)?);
            diag_after.push(parse_f64(&rec[5 + 2 * k], line)?);
        }
        events.push(RemovalEvent {
            step: parse_step(&rec[0], line)?,
            identity_id: rec[1].to_string(),
            group,
            own_group_ids: parse_f64(&rec[3], line)?,
            diag_before,
            diag_after,
        });
    }
    let initial = events
        .first()
        .map(|e| e.diag_before.clone())
        .unwrap_or_default();
    let mut trace = RemovalTrace::new("log", None, groups, Protocol::A, initial);
    trace.events = events;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{ImageRecord, Manifest};
    use crate::sampling::{sample_protocol, RemovalBudget};

    fn small() -> Manifest {
        let groups = GroupSet::new(["X", "Y", "Z"]).unwrap();
        let own = [0.9, 0.35, 0.6, 0.8, 0.7, 0.5, 0.95, 0.45, 0.65];
        let images = own
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let g = i % 3;
                let mut scores = vec![(1.0 - s) / 2.0; 3];
                scores[g] = s;
                ImageRecord {
                    image_id: format!("im{i}"),
                    identity_id: format!("id{i}"),
                    group: g,
                    scores,
                }
            })
            .collect();
        Manifest::new(groups, images).unwrap()
    }

    #[test]
    fn log_round_trip_preserves_events() {
        let (_, trace) = sample_protocol(&small(), Protocol::B, RemovalBudget(4)).unwrap();
        let mut buf = Vec::new();
        write_removal_log(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "step,identity_id,group,own_group_ids,diag_X_before,diag_X_after,diag_Y_before,diag_Y_after,diag_Z_before,diag_Z_after\n"
        ));
        let back = read_removal_log_from(buf.as_slice()).unwrap();
        assert_eq!(back.events, trace.events);
        assert_eq!(back.initial_diag, trace.initial_diag);
    }

    #[test]
    fn evolution_has_step_zero() {
        let (_, trace) = sample_protocol(&small(), Protocol::A, RemovalBudget(3)).unwrap();
        let mut buf = Vec::new();
        write_evolution(&trace, &mut buf).unwrap();
        let evo = read_evolution_from(buf.as_slice()).unwrap();
        assert_eq!(evo.rows.len(), 4);
        assert_eq!(evo.rows[0], (0, trace.initial_diag.clone()));
        assert_eq!(evo.rows[3].1, trace.events[2].diag_after);
        assert_eq!(evo.groups.labels(), ["X", "Y", "Z"]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(read_evolution_from("foo,diag_X\n".as_bytes()).is_err());
        assert!(read_evolution_from("step,diag_X,diag_Y\n1,abc,0.2\n".as_bytes()).is_err());
        assert!(read_removal_log_from("step,identity_id,group,own_group_ids,diag_X_before\n".as_bytes()).is_err());
    }
}
