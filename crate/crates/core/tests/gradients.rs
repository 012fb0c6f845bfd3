mod common;

use common::Tally;

fn assert_passed(t: Tally) {
    assert!(t.passed(), "{}", t.summary());
}

#[test]
fn visual_gate_matches_finite_differences() {
    assert_passed(common::check_visual_gate());
}

#[test]
fn inference_gate_matches_finite_differences() {
    assert_passed(common::check_inference_gate());
}

#[test]
fn semantic_fusion_matches_finite_differences() {
    assert_passed(common::check_fuse_semantic());
}

#[test]
fn multimodal_fusion_matches_finite_differences() {
    assert_passed(common::check_fuse_multimodal());
}

#[test]
fn mf_score_matches_finite_differences() {
    assert_passed(common::check_score_mf());
}

#[test]
fn vbpr_score_matches_finite_differences() {
    assert_passed(common::check_score_vbpr());
}

#[test]
fn bpr_loss_matches_finite_differences() {
    assert_passed(common::check_bpr_loss());
}

#[test]
fn branch_losses_match_finite_differences() {
    assert_passed(common::check_branch_losses());
}

#[test]
fn scale_gradient_matches_finite_differences() {
    assert_passed(common::check_scale_gradient());
}

#[test]
fn dqn_loss_matches_finite_differences() {
    assert_passed(common::check_dqn_loss());
}

#[test]
fn full_model_matches_finite_differences() {
    assert_passed(common::check_full_model());
}
