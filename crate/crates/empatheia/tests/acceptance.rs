//! End-to-end acceptance suite; one named check per criterion.

#[test]
fn acceptance_placeholder() {
    // Populated as the modules land.
}
