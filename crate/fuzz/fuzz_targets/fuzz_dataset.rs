#![no_main]

use libfuzzer_sys::fuzz_target;
use mvmrf::dataset::EnsembleCsv;

// The dataset CSV parser must be total over arbitrary text: malformed
// rows, ragged columns, and non-numeric cells all map to DatasetError.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = EnsembleCsv::parse(text);
    }
});
