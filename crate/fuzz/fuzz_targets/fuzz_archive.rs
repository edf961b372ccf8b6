#![no_main]

use libfuzzer_sys::fuzz_target;
use mvmrf::archive::PosteriorArchive;

// The binary archive reader validates every declared length against the
// remaining input before allocating, so hostile headers cannot trigger
// panics or unbounded allocations.
fuzz_target!(|data: &[u8]| {
    let _ = PosteriorArchive::from_bytes(data);
});
