use std::io::Write;

use touchsdf::selftest::Selftest;

#[test]
fn acceptance() {
    let suite = Selftest::new();
    let results = suite.run_all();
    // straight to the process stdout so the lines survive output capture
    let mut out = std::io::stdout().lock();
    writeln!(out).unwrap();
    for r in &results {
        writeln!(out, "{}", r.line()).unwrap();
    }
    let total: f64 = results.iter().map(|r| r.seconds).sum();
    writeln!(out, "total {total:.1}s").unwrap();
    drop(out);
    let failed: Vec<usize> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    assert!(failed.is_empty(), "failing criteria {failed:?}");
}
