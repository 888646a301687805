use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::WorkloadError;
use crate::types::{Catalog, Request, SlaDefaults, Tier};

pub const TRACE_HEADER: &str = "arrival_ts_ms,model,region,tier,input_tokens,output_tokens";

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_ts_ms: u64,
    pub model: String,
    pub region: String,
    pub tier: String,
    pub input_tokens: u32,
    pub output_tokens: u32,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    /// Requests in arrival order, ids assigned 0..n in that order.
    pub requests: Vec<Request>,
    /// Number of records whose timestamp was earlier than the record before it.
    pub unsorted_warnings: u64,
    /// Line numbers skipped in lenient mode.
    pub skipped_lines: Vec<u64>,
}

pub fn ingest_trace(
    path: &Path,
    catalog: &Catalog,
    sla: &SlaDefaults,
    strict: bool,
) -> Result<IngestReport, WorkloadError> {
    let file = std::fs::File::open(path).map_err(|source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_trace(file, catalog, sla, strict)
}

pub fn read_trace<R: Read>(
    reader: R,
    catalog: &Catalog,
    sla: &SlaDefaults,
    strict: bool,
) -> Result<IngestReport, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| WorkloadError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != TRACE_HEADER {
        return Err(WorkloadError::Parse {
            line: 1,
            message: format!("expected header `{TRACE_HEADER}`, found `{header}`"),
        });
    }

    let mut report = IngestReport::default();
    let mut parsed: Vec<(u64, Request)> = Vec::new();
    let mut last_ts = 0u64;
    for row in rdr.records() {
        let (line, outcome) = match row {
            Ok(rec) => {
                let line = rec.position().map_or(0, |p| p.line());
                let outcome = rec
                    .deserialize::<TraceRecord>(None)
                    .map_err(|e| e.to_string())
                    .and_then(|r| to_request(&r, catalog, sla));
                (line, outcome)
            }
            Err(e) => (e.position().map_or(0, |p| p.line()), Err(e.to_string())),
        };
        match outcome {
            Ok(req) => {
                if req.arrival_ts < last_ts {
                    report.unsorted_warnings += 1;
                }
                last_ts = req.arrival_ts;
                parsed.push((line, req));
            }
            Err(message) if strict => return Err(WorkloadError::Parse { line, message }),
            Err(_) => report.skipped_lines.push(line),
        }
    }

    // Stable sort keeps file order among equal timestamps.
    parsed.sort_by_key(|(_, r)| r.arrival_ts);
    report.requests = parsed
        .into_iter()
        .enumerate()
        .map(|(i, (_, mut r))| {
            r.id.0 = i as u64;
            r
        })
        .collect();
    Ok(report)
}

fn to_request(rec: &TraceRecord, catalog: &Catalog, sla: &SlaDefaults) -> Result<Request, String> {
    let tier: Tier = rec
        .tier
        .parse()
        .map_err(|e: crate::types::DomainError| e.to_string())?;
    let model = catalog.model_id(&rec.model).map_err(|e| e.to_string())?;
    let region = catalog.region_id(&rec.region).map_err(|e| e.to_string())?;
    if rec.input_tokens == 0 || rec.output_tokens == 0 {
        return Err("token counts must be >= 1".into());
    }
    Ok(Request::new(
        0,
        rec.arrival_ts_ms,
        region,
        tier,
        model,
        rec.input_tokens,
        rec.output_tokens,
        sla,
    ))
}

/// Writes requests in the trace schema, in the order given.
pub fn export_trace<W: Write>(
    requests: &[Request],
    catalog: &Catalog,
    writer: W,
) -> Result<(), WorkloadError> {
    let io_err = |e: std::io::Error| WorkloadError::Io {
        path: "<writer>".into(),
        source: e,
    };
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    wtr.write_record(TRACE_HEADER.split(','))
        .map_err(|e| io_err(e.into()))?;
    for r in requests {
        wtr.serialize(TraceRecord {
            arrival_ts_ms: r.arrival_ts,
            model: catalog.model(r.model).name.clone(),
            region: catalog.region(r.client_region).name.clone(),
            tier: r.tier.as_str().to_string(),
            input_tokens: r.input_tokens,
            output_tokens: r.output_tokens,
        })
        .map_err(|e| io_err(e.into()))?;
    }
    wtr.flush().map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ingest(text: &str, strict: bool) -> Result<IngestReport, WorkloadError> {
        read_trace(
            text.as_bytes(),
            &Catalog::desk_scale(),
            &SlaDefaults::default(),
            strict,
        )
    }

    #[test]
    fn three_line_file_yields_three_sorted_requests() {
        let text = format!(
            "{TRACE_HEADER}\n0,llama2-70b,us-east,IW-F,100,10\n5,bloom-176b,us-west,NIW,200,20\n9,llama2-70b,us-central,IW-N,300,30\n"
        );
        let rep = ingest(&text, true).unwrap();
        assert_eq!(rep.requests.len(), 3);
        assert_eq!(rep.unsorted_warnings, 0);
        let ts: Vec<_> = rep.requests.iter().map(|r| r.arrival_ts).collect();
        assert_eq!(ts, vec![0, 5, 9]);
        assert_eq!(rep.requests[1].tier, Tier::Niw);
        assert_eq!(rep.requests[0].ttft_deadline, Some(1_000));
    }

    #[test]
    fn malformed_line_reports_its_line_number_in_strict_mode() {
        let text = format!(
            "{TRACE_HEADER}\n0,llama2-70b,us-east,IW-F,100,10\n1,llama2-70b,us-east,IW-F,abc,10\n"
        );
        match ingest(&text, true) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let rep = ingest(&text, false).unwrap();
        assert_eq!(rep.requests.len(), 1);
        assert_eq!(rep.skipped_lines, vec![3]);
    }

    #[test]
    fn out_of_order_timestamps_are_sorted_with_one_warning() {
        let text = format!(
            "{TRACE_HEADER}\n10,llama2-70b,us-east,IW-F,1,1\n5,llama2-70b,us-east,IW-N,2,2\n20,llama2-70b,us-east,IW-F,3,3\n"
        );
        let rep = ingest(&text, true).unwrap();
        assert_eq!(rep.unsorted_warnings, 1);
        let ts: Vec<_> = rep.requests.iter().map(|r| r.arrival_ts).collect();
        assert_eq!(ts, vec![5, 10, 20]);
        assert_eq!(rep.requests[0].input_tokens, 2);
    }

    #[test]
    fn unknown_tier_and_wrong_header_rejected() {
        let text = format!("{TRACE_HEADER}\n0,llama2-70b,us-east,BATCH,1,1\n");
        assert!(ingest(&text, true).is_err());
        assert!(ingest("ts,model\n0,x\n", true).is_err());
    }

    proptest! {
        #[test]
        fn ingest_export_is_identity_on_sorted_traces(
            rows in prop::collection::vec((0u64..1_000_000, 0usize..4, 0usize..3, 0usize..3, 1u32..50_000, 1u32..5_000), 0..40)
        ) {
            let cat = Catalog::desk_scale();
            let mut rows = rows;
            rows.sort_by_key(|r| r.0);
            let mut text = format!("{TRACE_HEADER}\n");
            for (ts, m, r, t, i, o) in &rows {
                text.push_str(&format!("{ts},{},{},{},{i},{o}\n", cat.models[*m].name, cat.regions[*r].name, Tier::ALL[*t]));
            }
            let rep = ingest(&text, true).unwrap();
            let mut out = Vec::new();
            export_trace(&rep.requests, &cat, &mut out).unwrap();
            prop_assert_eq!(String::from_utf8(out).unwrap(), text);
        }
    }
}
