mod support;

use support::oracles;

#[test]
fn ber_matches_popcount() {
    oracles::ber_popcount().unwrap();
}

#[test]
fn pixel_shuffle_matches_scatter() {
    oracles::pixel_shuffle_index_map().unwrap();
}

#[test]
fn info_nce_of_equal_similarities_is_ln_n() {
    oracles::info_nce_uniform().unwrap();
}

#[test]
fn info_nce_two_sample_closed_form() {
    oracles::info_nce_two_sample().unwrap();
}

#[test]
fn white_box_grid_matches_sweep() {
    oracles::white_box_grid().unwrap();
}

#[test]
fn auc_matches_pair_counting() {
    oracles::auc_pair_counting().unwrap();
}

#[test]
fn fake_probability_anchors_and_monotonicity() {
    oracles::fake_probability_shape().unwrap();
}
