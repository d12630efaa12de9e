use softtwin_bench::block;
use softtwin_core::rollout::{rollout, RolloutStart};

#[test]
fn block_settles_without_divergence() {
    let (model, state) = block(8);
    let (traj, _) = rollout(&model, RolloutStart::new(state.clone()), None, 3, false).unwrap();
    let last = traj.last();
    assert!(last.first_non_finite().is_none());
    assert!(last.centroid().z <= state.centroid().z);
}
