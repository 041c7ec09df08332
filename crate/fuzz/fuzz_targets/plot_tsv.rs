#![no_main]
use libfuzzer_sys::fuzz_target;
use stablab_cli::output::parse_plot_tsv;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_plot_tsv(text);
});
