//! Taint scan: no private or control row ever reaches the content store,
//! the transaction log or the exported metrics.

use std::path::PathBuf;

use din_core::auditing::{AttestationKey, SecureEnvironment};
use din_core::fl::{generate_synthetic_population, Samples};
use din_core::orchestrator::{run, Scenario};
use din_core::rng::RngStreams;

/// Values with enough mantissa bits that a chance match is impossible.
fn tracers(samples: &Samples, out: &mut Vec<f64>) {
    for (x, y) in samples.rows() {
        for &v in x.iter().chain(std::iter::once(y)) {
            if (v * 65536.0).fract() != 0.0 {
                out.push(v);
            }
        }
    }
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

fn scan(name: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.toml"));
    let sc = Scenario::load(&path).unwrap();
    let out = run(&sc).unwrap();

    let streams = RngStreams::new(sc.seed);
    let pop = generate_synthetic_population(&sc.population, &sc.layout().participant_ids(), &streams).unwrap();
    let mut values = Vec::new();
    for d in &pop.datasets {
        tracers(&d.samples, &mut values);
    }
    let mut env = SecureEnvironment::new(AttestationKey::from_seed(0));
    env.load_control(pop.control.clone());
    tracers(&env.leak_control().unwrap(), &mut values);
    assert!(values.len() > 100);

    let mut log = Vec::new();
    out.chain.export_jsonl(&mut log).unwrap();
    let text = format!("{}{}", String::from_utf8(log).unwrap(), out.metrics.to_json());
    let blobs: Vec<&[u8]> = out.store.blobs().map(|b| b.bytes.as_slice()).collect();
    assert!(!blobs.is_empty());
    for v in values {
        let bytes = v.to_le_bytes();
        for b in &blobs {
            assert!(!contains(b, &bytes), "{name}: row value {v} found in a blob");
        }
        assert!(!text.contains(&v.to_string()), "{name}: row value {v} found in the log");
    }
}

#[test]
fn honest_run_leaks_no_rows() {
    scan("honest_tiny");
}

#[test]
fn firewalled_run_leaks_no_rows() {
    scan("dropouts_and_firewalls");
}

#[test]
fn control_leak_stays_off_chain() {
    scan("control_leak");
}
