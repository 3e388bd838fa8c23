mod common;

#[test]
fn thousand_entry_store_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    common::check_persistence(1000, dir.path()).unwrap();
}
