#[path = "suite/mod.rs"]
mod suite;

#[test]
fn selection_matches_exhaustive_scan() {
    eprintln!("{}", suite::selection::selection_suite());
}

#[test]
fn detector_eer_matches_exhaustive_scan() {
    eprintln!("{}", suite::selection::detector_eer_suite());
}
