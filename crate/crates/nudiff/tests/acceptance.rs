//! One line per acceptance criterion, then a single assertion over all of them.

use std::io::Write;
use std::time::Instant;

use nudiff::verify::{self, Check, ToyConfig};

struct Criterion {
    id: u32,
    title: &'static str,
    budget_s: f64,
    run: fn() -> nudiff::Result<Vec<Check>>,
}

fn toy() -> nudiff::Result<Vec<Check>> {
    let report = verify::run_toy(&ToyConfig::default())?;
    // the conditioning-sensitivity line is diagnostic only
    Ok(report.checks().into_iter().take(3).collect())
}

const CRITERIA: [Criterion; 9] = [
    Criterion { id: 1, title: "schedule and forward law", budget_s: 10.0, run: verify::schedule_suite },
    Criterion { id: 2, title: "oracle sampler", budget_s: 120.0, run: verify::diffusion_suite },
    Criterion { id: 3, title: "gradient check", budget_s: 120.0, run: verify::gradient_suite },
    Criterion { id: 4, title: "guidance algebra", budget_s: 1.0, run: verify::cfg_suite },
    Criterion { id: 5, title: "structure round trip", budget_s: 30.0, run: verify::structure_suite },
    Criterion { id: 6, title: "metrics", budget_s: 30.0, run: verify::metrics_suite },
    Criterion { id: 7, title: "pipeline determinism", budget_s: 60.0, run: verify::pipeline_suite },
    Criterion { id: 8, title: "toy end-to-end learning", budget_s: 1800.0, run: toy },
    Criterion { id: 9, title: "condition dropout rate", budget_s: f64::INFINITY, run: verify::dropout_suite },
];

#[test]
fn acceptance_criteria() {
    // written to the raw handle so the lines survive output capture
    let mut err = std::io::stderr().lock();
    let mut failed = Vec::new();
    for c in &CRITERIA {
        let start = Instant::now();
        let outcome = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        let (passed, detail) = match outcome {
            Ok(checks) => {
                let bad: Vec<String> = checks.iter().filter(|k| !k.passed).map(|k| format!("{}: {}", k.name, k.detail)).collect();
                let summary = checks.iter().map(|k| k.detail.as_str()).filter(|d| !d.is_empty()).collect::<Vec<_>>().join("; ");
                if bad.is_empty() {
                    (secs <= c.budget_s, summary)
                } else {
                    (false, bad.join("; "))
                }
            }
            Err(e) => (false, format!("error: {e}")),
        };
        let verdict = if passed { "PASS" } else { "FAIL" };
        writeln!(err, "criterion {} {}: {verdict} ({secs:.1}s) {detail}", c.id, c.title).unwrap();
        if !passed {
            failed.push(c.id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
