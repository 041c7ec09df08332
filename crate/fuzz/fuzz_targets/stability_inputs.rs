#![no_main]
use libfuzzer_sys::fuzz_target;
use stablab::bounds::all_bounds;
use stablab_cli::parse_inputs;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(inputs) = parse_inputs(text) {
        let _ = all_bounds(&inputs);
    }
});
