#![no_main]
use libfuzzer_sys::fuzz_target;
use stablab::Dataset;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = Dataset::from_csv_str(text) {
        let again = Dataset::from_csv_str(&ds.to_csv_string()).expect("written CSV parses");
        assert_eq!(again.len(), ds.len());
    }
});
