use gcrpnet::gradcheck::{op_suite, GradCheckOptions};

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in op_suite(17) {
        let report = case.run(GradCheckOptions::default()).unwrap();
        println!("{:<28} probes={:<4} max_rel={:.2e}", case.name, report.probes, report.max_rel_error());
        if report.max_rel_error() > 1e-4 {
            failures.push(format!("{}: {:?}", case.name, report.worst));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
