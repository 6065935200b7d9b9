#[allow(dead_code)]
#[path = "../examples/fits_roundtrip.rs"]
mod fits_roundtrip;
#[allow(dead_code)]
#[path = "../examples/detect_synthetic.rs"]
mod detect_synthetic;

#[test]
fn fits_roundtrip_is_exact_for_every_bitpix() {
    let rows = fits_roundtrip::run_example().unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|&(_, len, same)| len % 2880 == 0 && same));
}

#[test]
fn detect_synthetic_finds_every_filament() {
    let (found, implanted) = detect_synthetic::run_example(3).unwrap();
    assert_eq!(found, implanted);
}
