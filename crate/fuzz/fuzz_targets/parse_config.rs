#![no_main]

use libfuzzer_sys::fuzz_target;
use mugrpo::config::parse_config_str;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // Lines after the first `\n--\n` are treated as `--set` overrides.
    let (body, overrides) = match text.split_once("\n--\n") {
        Some((b, o)) => (b, o.lines().map(str::to_owned).collect::<Vec<_>>()),
        None => (text, Vec::new()),
    };
    if let Ok(cfg) = parse_config_str(body, &overrides) {
        let again = parse_config_str(&cfg.to_json(), &[]).expect("canonical form parses");
        assert_eq!(again, cfg);
    }
});
