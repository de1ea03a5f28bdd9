import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avgrasp.config import fast_profile
from avgrasp.geometry import RigidTransform
from avgrasp.policy import (
    ActionCandidate,
    ReplayBuffer,
    Transition,
    action_scale,
    close_window,
    generate_actions,
    qlearning_target,
    run_episode,
    select_action,
    should_close,
)
from avgrasp.sim import GraspEnv
from avgrasp.tsdf import TsdfVolume

PROFILE = fast_profile()
K = PROFILE.intrinsics()


class TestActionScale:
    def test_formula_reference_points(self):
        d, a = action_scale(0.5)
        assert d == pytest.approx(0.050, abs=1e-12)
        assert a == pytest.approx(30.0, abs=1e-12)
        d, a = action_scale(0.1)
        assert d == pytest.approx(0.015, abs=1e-12)
        assert a == pytest.approx(10.0, abs=1e-12)
        d, a = action_scale(0.3)
        assert d == pytest.approx(0.0325, abs=1e-12)
        assert a == pytest.approx(20.0, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(min_value=-10, max_value=10, allow_nan=False))
    def test_clamped_everywhere(self, med):
        d, a = action_scale(med)
        assert 0.015 <= d <= 0.050
        assert 10.0 <= a <= 30.0


class TestGenerateActions:
    def test_always_thirty_five(self):
        pose = RigidTransform.translate(0, 0, 0.3)
        for med in (0.05, 0.2, 0.45, 2.0):
            cands = generate_actions(med, pose, PROFILE.workspace, PROFILE.policy)
            assert len(cands) == 35

    def test_forward_offset_on_every_candidate(self):
        pose = RigidTransform.translate(0, 0, 0.3)
        for c in generate_actions(0.3, pose, PROFILE.workspace, PROFILE.policy):
            assert c.transform.translation[2] >= PROFILE.policy.forward_offset - 1e-12

    def test_labels_cover_combinations(self):
        cands = generate_actions(0.3, RigidTransform.translate(0, 0, 0.3),
                                 PROFILE.workspace, PROFILE.policy)
        combos = {(c.translation_label, c.rotation_label) for c in cands}
        assert len(combos) == 35

    def test_workspace_exit_infeasible(self):
        # tool at the +x edge: +x candidates leave the workspace
        hi = PROFILE.workspace.hi
        pose = RigidTransform.translate(hi[0] - 0.001, 0, 0.3)
        cands = generate_actions(0.5, pose, PROFILE.workspace, PROFILE.policy)
        plus_x = [c for c in cands if c.translation_label == "+x"]
        assert all(not c.feasible for c in plus_x)
        minus_x = [c for c in cands if c.translation_label == "-x" and c.rotation_label == "R0"]
        assert all(c.feasible for c in minus_x)


class TestShouldClose:
    def window_depth(self, fill, patch=None):
        depth = np.full((K.height, K.width), fill, dtype=np.float32)
        if patch is not None:
            r0, r1, c0, c1 = close_window(K, PROFILE)
            depth[r0:r1, c0:c1] = patch
        return depth

    def test_near_surface_triggers(self):
        depth = self.window_depth(0.5, patch=0.23)
        assert should_close(depth, K, PROFILE, fingertip_depth=0.25)

    def test_far_surface_does_not(self):
        depth = self.window_depth(0.5, patch=0.24)
        assert not should_close(depth, K, PROFILE, fingertip_depth=0.25)

    def test_empty_window_false(self):
        depth = self.window_depth(0.5, patch=0.0)
        assert not should_close(depth, K, PROFILE, fingertip_depth=0.25)


def constant_scorer(values):
    values = np.asarray(values, dtype=np.float64)

    def qfn(state, views, candidates):
        return values[: len(candidates)]

    return qfn


@pytest.fixture
def select_setup():
    vol = TsdfVolume(PROFILE.volume)  # empty: candidate views render invalid
    pose = RigidTransform.translate(0, 0, 0.3)
    cands = [c for c in generate_actions(0.3, pose, PROFILE.workspace, PROFILE.policy)
             if c.feasible]
    state = np.zeros((7, K.height, K.width), dtype=np.float32)
    return vol, pose, cands, state


class TestSelectAction:
    def test_greedy_picks_argmax(self, select_setup):
        vol, pose, cands, state = select_setup
        scores = np.linspace(0, 1, len(cands))
        rng = np.random.default_rng(0)
        chosen, view, out = select_action(constant_scorer(scores), state, vol, cands,
                                          pose, PROFILE, epsilon=0.0, rng=rng)
        assert chosen.index == cands[-1].index

    def test_tie_breaks_to_lowest_index(self, select_setup):
        vol, pose, cands, state = select_setup
        scores = np.zeros(len(cands))
        scores[5] = scores[11] = 0.7
        chosen, _, _ = select_action(constant_scorer(scores), state, vol, cands,
                                     pose, PROFILE, epsilon=0.0, rng=np.random.default_rng(0))
        assert chosen.index == cands[5].index

    def test_scale_invariance(self, select_setup):
        vol, pose, cands, state = select_setup
        rng = np.random.default_rng(3)
        base = rng.uniform(0.1, 1.0, len(cands))
        a, _, _ = select_action(constant_scorer(base), state, vol, cands, pose,
                                PROFILE, 0.0, np.random.default_rng(0))
        b, _, _ = select_action(constant_scorer(base * 7.3), state, vol, cands, pose,
                                PROFILE, 0.0, np.random.default_rng(0))
        assert a.index == b.index

    def test_epsilon_one_uniform(self, select_setup, monkeypatch):
        vol, pose, cands, state = select_setup
        # selection statistics only; skip the raycasts
        from avgrasp import policy as policy_mod
        from avgrasp.tsdf import RenderedView
        dummy = RenderedView(
            color=np.zeros((PROFILE.view_height, PROFILE.view_width, 3), np.uint8),
            depth=np.zeros((PROFILE.view_height, PROFILE.view_width), np.float32),
            normals=np.zeros((PROFILE.view_height, PROFILE.view_width, 3), np.float32),
            pose=pose, intrinsics=PROFILE.view_intrinsics())
        monkeypatch.setattr(policy_mod, "render_candidate_views",
                            lambda *a, **k: [dummy] * len(cands))
        scores = np.zeros(len(cands))
        scores[0] = 1.0
        rng = np.random.default_rng(42)
        counts = np.zeros(len(cands))
        draws = 10000
        for _ in range(draws):
            chosen, _, _ = select_action(constant_scorer(scores), state, vol, cands,
                                         pose, PROFILE, epsilon=1.0, rng=rng)
            counts[[c.index for c in cands].index(chosen.index)] += 1
        expected = draws / len(cands)
        sigma = math.sqrt(draws * (1 / len(cands)) * (1 - 1 / len(cands)))
        assert np.all(np.abs(counts - expected) < 5 * sigma)

    def test_no_feasible_raises(self, select_setup):
        vol, pose, _, state = select_setup
        with pytest.raises(RuntimeError):
            select_action(constant_scorer([1.0]), state, vol, [], pose, PROFILE,
                          0.0, np.random.default_rng(0))


class TestQTarget:
    def test_terminal_no_bootstrap(self):
        assert qlearning_target(1.0, True, [0.9, 0.8], 0.999) == 1.0

    def test_bootstrap_formula(self):
        y = qlearning_target(0.0, False, [0.1, 0.5, 0.3], 0.999)
        assert y == pytest.approx(0.4995, abs=1e-12)

    def test_zero_next_scores(self):
        assert qlearning_target(0.0, False, [0.0, 0.0], 0.999) == 0.0


def tiny_transition(terminal=False, reward=0.0):
    s = np.zeros((7, 4, 4), dtype=np.float16)
    v = np.zeros((7, 2, 2), dtype=np.float16)
    if terminal:
        return Transition(s, v, 0, reward, True)
    return Transition(s, v, 0, reward, False, s, v[None])


class TestReplayBuffer:
    def test_capacity_bound_fifo(self):
        buf = ReplayBuffer(capacity=5)
        for i in range(9):
            buf.add(tiny_transition())
        assert len(buf) == 5

    def test_sampling_deterministic(self):
        buf = ReplayBuffer(capacity=10)
        for _ in range(10):
            buf.add(tiny_transition())
        a = [id(t) for t in buf.sample(6, np.random.default_rng(3))]
        b = [id(t) for t in buf.sample(6, np.random.default_rng(3))]
        assert a == b

    def test_terminal_without_next_enforced(self):
        buf = ReplayBuffer(4)
        bad = Transition(np.zeros((7, 2, 2), np.float16), np.zeros((7, 2, 2), np.float16),
                         0, 1.0, True, next_state=np.zeros((7, 2, 2), np.float16))
        with pytest.raises(ValueError):
            buf.add(bad)

    def test_binary_rewards_enforced(self):
        buf = ReplayBuffer(4)
        with pytest.raises(ValueError):
            buf.add(tiny_transition(terminal=True, reward=0.5))


class TestRunEpisode:
    def test_empty_scene_runs_out_the_clock(self):
        env = GraspEnv.make("tabletop", seed=1, profile=PROFILE, n_objects=0)
        res = run_episode(env, None, PROFILE, rng=np.random.default_rng(0))
        assert not res.success
        assert res.steps == PROFILE.policy.max_steps
        assert res.reward == 0.0

    def test_oracle_scorer_succeeds_quickly(self):
        from avgrasp.experiments import OracleScorer

        env = GraspEnv.make("tabletop", seed=2, profile=PROFILE, n_objects=1)
        res = run_episode(env, OracleScorer(env, PROFILE), PROFILE,
                          rng=np.random.default_rng(0))
        assert res.success
        assert res.steps < PROFILE.policy.max_steps / 2

    def test_successful_episode_single_terminal_reward(self):
        from avgrasp.experiments import OracleScorer
        from avgrasp.policy import ReplayBuffer

        env = GraspEnv.make("tabletop", seed=2, profile=PROFILE, n_objects=1)
        buf = ReplayBuffer(1000)
        res = run_episode(env, OracleScorer(env, PROFILE), PROFILE,
                          rng=np.random.default_rng(0), replay=buf)
        assert res.success
        terminals = [t for t in buf._items if t.terminal]
        assert len(terminals) == 1
        assert terminals[0].reward == 1.0
        assert all(t.reward == 0.0 for t in buf._items if not t.terminal)

    def test_dynamic_mode_perturbs_once(self):
        env = GraspEnv.make("tabletop", seed=3, profile=PROFILE, n_objects=2)
        before = env.scene.centroid().copy()
        res = run_episode(env, None, PROFILE, mode="dynamic", rng=np.random.default_rng(1))
        assert res.perturbed_at is not None
        assert res.steps <= PROFILE.policy.max_steps

    def test_epsilon_schedule(self):
        pol = PROFILE.policy
        assert pol.epsilon_at(0) == pytest.approx(0.1)
        assert pol.epsilon_at(1000) == pytest.approx(0.01)
        assert pol.epsilon_at(500) == pytest.approx(0.055)
        assert pol.epsilon_at(99999) == pytest.approx(0.01)
