import numpy as np
import pytest

from normrl import pixelworld as pw
from normrl.errors import ConfigError, ProtocolError
from normrl.numcore import Prng


def rollout(seed, suite, actions):
    spec = pw.shift_suite(suite)
    state, obs = pw.reset(Prng(seed), spec)
    frames = [obs]
    rewards = []
    dones = []
    for a in actions:
        state, obs, r, done = pw.step(state, a)
        frames.append(obs)
        rewards.append(r)
        dones.append(done)
        if done:
            break
    return state, frames, rewards, dones


class TestShiftSuite:
    def test_canonical_specs(self):
        train = pw.shift_suite("train")
        assert (train.palette, train.background, train.grid_lines) == ("fixed", "static", True)
        hard = pw.shift_suite("video_hard")
        assert (hard.palette, hard.background, hard.grid_lines) == ("fixed", "noise", False)
        easy = pw.shift_suite("video_easy")
        assert easy.background == "plaid"
        color = pw.shift_suite("color_hard")
        assert color.palette == "held_out"

    def test_unknown_suite_rejected(self):
        with pytest.raises(ConfigError):
            pw.shift_suite("weather")

    def test_held_out_bands_disjoint_from_train_hues(self):
        for lo, hi in (pw.HELD_OUT_AGENT_BAND, pw.HELD_OUT_TARGET_BAND, pw.HELD_OUT_BG_BAND):
            for edge in np.linspace(lo, hi, 50):
                for train_hue in pw.TRAIN_HUES:
                    assert pw.hue_distance(edge, train_hue) >= 1 / 6


class TestReset:
    def test_deterministic_initial_observation(self):
        _, a = pw.reset(Prng(5), pw.shift_suite("train"))
        _, b = pw.reset(Prng(5), pw.shift_suite("train"))
        assert a.tobytes() == b.tobytes()

    def test_agent_never_on_target(self):
        rng = Prng(0)
        for i in range(10_000):
            st, _ = pw.reset(rng.split(i), pw.shift_suite("train"))
            assert st.agent != st.target

    def test_initial_stack_repeats_first_frame(self):
        st, obs = pw.reset(Prng(1), pw.shift_suite("train"))
        stack = obs.reshape(3, 3, 48, 48)
        assert np.array_equal(stack[0], stack[1]) and np.array_equal(stack[1], stack[2])

    def test_color_hard_agent_hue_outside_training_palette(self):
        rng = Prng(2)
        for i in range(1000):
            st, _ = pw.reset(rng.split(i), pw.shift_suite("color_hard"))
            hue = pw.rgb_to_hue(st.ep.agent_rgb)
            for train_hue in pw.TRAIN_HUES:
                assert pw.hue_distance(hue, train_hue) >= 1 / 6 - 1e-6


class TestStep:
    def make_adjacent(self):
        # deterministic layout: agent one cell left of target
        spec = pw.shift_suite("train")
        st, _ = pw.reset(Prng(3), spec)
        agent = (st.target[0] - 1, st.target[1]) if st.target[0] > 0 else (st.target[0] + 1, st.target[1])
        return pw.WorldState(agent, st.target, 0, False, spec, st.ep, st.frames)

    def test_reaching_target_rewards_shaping_plus_bonus(self):
        st = self.make_adjacent()
        action = 3 if st.target[0] > st.agent[0] else 2
        _, _, reward, done = pw.step(st, action)
        assert done
        assert reward == pytest.approx(1.1)

    def test_wall_bump_keeps_position_and_zero_shaping(self):
        spec = pw.shift_suite("train")
        st, _ = pw.reset(Prng(4), spec)
        st = pw.WorldState((0, 0), (7, 7), 0, False, spec, st.ep, st.frames)
        new, _, reward, done = pw.step(st, 2)  # left into the wall
        assert new.agent == (0, 0)
        assert reward == 0.0 and not done

    def test_stay_is_zero_shaping(self):
        st = self.make_adjacent()
        _, _, reward, done = pw.step(st, 4)
        assert reward == 0.0 and not done

    def test_moving_away_costs_shaping(self):
        spec = pw.shift_suite("train")
        st, _ = pw.reset(Prng(5), spec)
        st = pw.WorldState((3, 3), (7, 7), 0, False, spec, st.ep, st.frames)
        _, _, reward, _ = pw.step(st, 0)  # up, away from target
        assert reward == pytest.approx(-0.1)

    def test_step_after_done_raises(self):
        st = self.make_adjacent()
        new, _, _, done = pw.step(st, 3 if st.target[0] > st.agent[0] else 2)
        assert done
        with pytest.raises(ProtocolError):
            pw.step(new, 4)

    def test_horizon_termination(self):
        spec = pw.shift_suite("train")
        st, _ = pw.reset(Prng(6), spec)
        done = False
        for i in range(pw.HORIZON):
            st, _, _, done = pw.step(st, 4)
        assert done and st.t == pw.HORIZON

    def test_dynamics_identical_across_suites(self):
        actions = [int(a) for a in Prng(7).integers(0, 5, size=30)]
        results = {}
        for suite in pw.SUITE_NAMES:
            _, _, rewards, dones = rollout(11, suite, actions)
            results[suite] = (rewards, dones)
        base = results["train"]
        for suite in pw.SUITE_NAMES:
            assert results[suite] == base


class TestRender:
    def test_train_render_static_over_time(self):
        st, _ = pw.reset(Prng(8), pw.shift_suite("train"))
        a = pw.render(st, t=0)
        b = pw.render(st, t=1)
        assert a.tobytes() == b.tobytes()

    def test_video_easy_changes_background_only(self):
        st, _ = pw.reset(Prng(9), pw.shift_suite("video_easy"))
        a = pw.render(st, t=0)
        b = pw.render(st, t=1)
        changed = np.any(a != b, axis=0)
        assert changed.any()
        for cell in (st.agent, st.target):
            ys = slice(cell[1] * pw.CELL, (cell[1] + 1) * pw.CELL)
            xs = slice(cell[0] * pw.CELL, (cell[0] + 1) * pw.CELL)
            assert not changed[ys, xs].any()
        # grid lines also persist
        assert not changed[:: pw.CELL, :].any()
        assert not changed[:, :: pw.CELL].any()

    def test_video_hard_has_no_grid_pixels(self):
        st, _ = pw.reset(Prng(10), pw.shift_suite("video_hard"))
        frame = pw.render(st, t=3)
        grid = np.array(pw.GRID_RGB, dtype=np.float32)
        matches = np.all(frame == grid[:, None, None], axis=0)
        assert not matches.any()

    def test_train_has_grid_pixels(self):
        st, _ = pw.reset(Prng(10), pw.shift_suite("train"))
        frame = pw.render(st, t=0)
        grid = np.array(pw.GRID_RGB, dtype=np.float32)
        assert np.all(frame == grid[:, None, None], axis=0).any()

    def test_noise_background_deterministic_per_step(self):
        st, _ = pw.reset(Prng(11), pw.shift_suite("video_hard"))
        assert pw.render(st, t=4).tobytes() == pw.render(st, t=4).tobytes()
        assert pw.render(st, t=4).tobytes() != pw.render(st, t=5).tobytes()


class TestObservationContract:
    @pytest.mark.parametrize("suite", pw.SUITE_NAMES)
    def test_values_in_unit_interval_and_shape(self, suite):
        actions = [int(a) for a in Prng(12).integers(0, 5, size=20)]
        _, frames, _, _ = rollout(13, suite, actions)
        for obs in frames:
            assert obs.shape == (9, 48, 48)
            assert obs.dtype == np.float32
            assert obs.min() >= 0.0 and obs.max() <= 1.0

    @pytest.mark.parametrize("suite", pw.SUITE_NAMES)
    def test_full_rollout_determinism(self, suite):
        actions = [int(a) for a in Prng(14).integers(0, 5, size=25)]
        _, fa, ra, _ = rollout(15, suite, actions)
        _, fb, rb, _ = rollout(15, suite, actions)
        assert ra == rb
        assert all(x.tobytes() == y.tobytes() for x, y in zip(fa, fb))

    def test_frames_roll_oldest_to_newest(self):
        st, obs0 = pw.reset(Prng(16), pw.shift_suite("train"))
        st, obs1, _, _ = pw.step(st, pw.greedy_action(st))
        s0 = obs0.reshape(3, 3, 48, 48)
        s1 = obs1.reshape(3, 3, 48, 48)
        assert np.array_equal(s1[0], s0[1])
        assert np.array_equal(s1[1], s0[2])
        assert not np.array_equal(s1[2], s0[2])


class TestReturns:
    def test_return_bound_random_policy(self):
        rng = Prng(17)
        for ep in range(50):
            spec = pw.shift_suite("train")
            st, _ = pw.reset(rng.split(ep), spec)
            total = 0.0
            done = False
            while not done:
                st, _, r, done = pw.step(st, int(rng.integers(0, 5)))
                total += r
            assert pw.RETURN_MIN <= total <= pw.RETURN_MAX

    def test_optimal_policy_matches_analytic_return(self):
        rng = Prng(18)
        for ep in range(200):
            spec = pw.shift_suite("train")
            st, _ = pw.reset(rng.split(ep), spec)
            want = pw.optimal_return(st)
            d0 = pw.l1_distance(st.agent, st.target)
            total = 0.0
            steps = 0
            done = False
            while not done:
                st, _, r, done = pw.step(st, pw.greedy_action(st))
                total += r
                steps += 1
            assert steps == d0
            assert total == pytest.approx(want, abs=1e-6)

    def test_min_start_distance_enforced(self):
        rng = Prng(19)
        for ep in range(500):
            st, _ = pw.reset(rng.split(ep), pw.shift_suite("train"))
            assert pw.l1_distance(st.agent, st.target) >= pw.MIN_START_DIST


class TestPng:
    def test_writes_valid_png(self, tmp_path):
        import struct
        import zlib

        st, _ = pw.reset(Prng(20), pw.shift_suite("train"))
        path = tmp_path / "frame.png"
        pw.write_png(path, pw.render(st))
        raw = path.read_bytes()
        assert raw[:8] == b"\x89PNG\r\n\x1a\n"
        w, h = struct.unpack(">II", raw[16:24])
        assert (w, h) == (48, 48)
        idat_at = raw.index(b"IDAT")
        length = struct.unpack(">I", raw[idat_at - 4 : idat_at])[0]
        payload = raw[idat_at + 4 : idat_at + 4 + length]
        rows = zlib.decompress(payload)
        assert len(rows) == 48 * (1 + 48 * 3)
