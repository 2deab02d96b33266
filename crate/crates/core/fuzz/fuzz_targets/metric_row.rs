#![no_main]

use expert_chain::metrics::MetricReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(report) = MetricReport::from_csv_row(text) {
            assert_eq!(MetricReport::from_csv_row(&report.csv_row()).unwrap(), report);
        }
    }
});
