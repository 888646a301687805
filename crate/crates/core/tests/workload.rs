use std::io::Write;

use fleetsim_core::experiment::desk_scale_workload;
use fleetsim_core::types::{Catalog, SlaDefaults, Tier, MINUTE};
use fleetsim_core::workload::{export_trace, generate_synthetic, ingest_trace};
use proptest::prelude::*;

#[test]
fn trace_round_trip() {
    let cat = Catalog::desk_scale();
    let mut spec = desk_scale_workload(&cat, 2);
    spec.duration = 20 * MINUTE;
    let sla = SlaDefaults::default();
    let reqs = generate_synthetic(&spec, &sla).unwrap();
    let f = tempfile::NamedTempFile::new().unwrap();
    export_trace(&reqs, &cat, std::io::BufWriter::new(f.reopen().unwrap())).unwrap();
    let back = ingest_trace(f.path(), &cat, &sla, true).unwrap();
    assert_eq!(back.unsorted_warnings, 0);
    assert_eq!(back.requests.len(), reqs.len());
    for (a, b) in reqs.iter().zip(&back.requests) {
        assert_eq!(
            (
                a.arrival_ts,
                a.model,
                a.client_region,
                a.tier,
                a.input_tokens,
                a.output_tokens
            ),
            (
                b.arrival_ts,
                b.model,
                b.client_region,
                b.tier,
                b.input_tokens,
                b.output_tokens
            )
        );
    }
}

#[test]
fn unsorted_trace_is_repaired_and_counted() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(
        f,
        "arrival_ts_ms,model,region,tier,input_tokens,output_tokens"
    )
    .unwrap();
    writeln!(f, "500,llama2-70b,us-east,IW-F,100,10").unwrap();
    writeln!(f, "100,llama2-70b,us-west,NIW,100,10").unwrap();
    writeln!(f, "900,llama3.1-8b,us-central,IW-N,100,10").unwrap();
    f.flush().unwrap();
    let rep = ingest_trace(
        f.path(),
        &Catalog::desk_scale(),
        &SlaDefaults::default(),
        true,
    )
    .unwrap();
    assert_eq!(rep.unsorted_warnings, 1);
    let ts: Vec<u64> = rep.requests.iter().map(|r| r.arrival_ts).collect();
    assert_eq!(ts, vec![100, 500, 900]);
    assert_eq!(rep.requests[0].tier, Tier::Niw);
}

#[test]
fn malformed_line_is_rejected() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(
        f,
        "arrival_ts_ms,model,region,tier,input_tokens,output_tokens"
    )
    .unwrap();
    writeln!(f, "5,llama2-70b,us-east,IW-X,100,10").unwrap();
    f.flush().unwrap();
    assert!(ingest_trace(
        f.path(),
        &Catalog::desk_scale(),
        &SlaDefaults::default(),
        true
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_arrivals_sorted_and_deadlines_set(seed in any::<u64>()) {
        let cat = Catalog::desk_scale();
        let mut spec = desk_scale_workload(&cat, seed);
        spec.duration = 5 * MINUTE;
        let reqs = generate_synthetic(&spec, &SlaDefaults::default()).unwrap();
        prop_assert!(reqs.windows(2).all(|w| w[0].arrival_ts <= w[1].arrival_ts));
        for r in &reqs {
            prop_assert!(r.arrival_ts < spec.duration);
            prop_assert_eq!(r.ttft_deadline.is_some(), r.tier.is_interactive());
            prop_assert!(r.input_tokens > 0 && r.output_tokens > 0);
        }
    }
}
