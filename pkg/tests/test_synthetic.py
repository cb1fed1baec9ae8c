import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tamrl.errors import ConfigError
from tamrl.numcore import SeededRng
from tamrl.synthetic import (
    FAMILIES,
    FAMILY_RANGES,
    MODE_SETS,
    TaskInstance,
    build_mode_set,
    eval_task,
    read_episodes,
    sample_episode,
    sample_task,
    set_name,
    stack_episodes,
    write_episodes,
    write_task_manifest,
)


def transcribed(family, p, x):
    # scalar math-module version of each formula
    if family == "sine":
        return p["A"] * math.sin(p["w"] * x + p["b"])
    if family == "linear":
        return p["A"] * x + p["b"]
    if family == "quadratic":
        return p["A"] * (x - p["c"]) * (x - p["c"]) + p["b"]
    if family == "l1norm":
        return p["A"] * abs(x - p["c"]) + p["b"]
    return p["A"] * math.tanh(x - p["c"]) + p["b"]


class TestFormulas:
    def test_quadratic(self):
        assert eval_task(TaskInstance("quadratic", {"A": 0.1, "c": 1.0, "b": 2.0}), 3.0) == pytest.approx(2.4, abs=1e-12)

    def test_linear(self):
        assert eval_task(TaskInstance("linear", {"A": -3.0, "b": 0.0}), 1.0) == -3.0

    def test_l1norm(self):
        assert eval_task(TaskInstance("l1norm", {"A": 0.1, "c": 0.0, "b": 0.0}), -2.0) == pytest.approx(0.2, abs=1e-15)

    def test_sine_and_tanh_at_zero_phase(self):
        assert eval_task(TaskInstance("sine", {"A": 2.0, "w": 1.0, "b": 0.0}), 0.0) == 0.0
        assert eval_task(TaskInstance("tanh", {"A": 2.0, "c": 1.0, "b": 0.5}), 1.0) == 0.5

    def test_agree_with_transcription(self):
        rng = SeededRng(21)
        for k in range(1000):
            sub = rng.child(k)
            fam = FAMILIES[k % len(FAMILIES)]
            t = sample_task(fam, sub)
            x = sub.uniform(-5.0, 5.0)
            assert abs(eval_task(t, x) - transcribed(fam, t.params, x)) <= 1e-12

    def test_vectorized(self):
        t = TaskInstance("linear", {"A": 2.0, "b": 1.0})
        np.testing.assert_array_equal(eval_task(t, np.array([0.0, 1.0])), [1.0, 3.0])


class TestSampling:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_ranges_over_many_draws(self, family):
        rng = SeededRng(5)
        draws = [sample_task(family, rng).params for _ in range(100_000)]
        for name, (lo, hi) in FAMILY_RANGES[family].items():
            if name == "A_split":
                a = np.abs([d["A"] for d in draws])
            else:
                a = np.array([d[name] for d in draws])
            assert a.min() >= lo and a.max() <= hi

    @given(st.integers(0, 2**32 - 1), st.sampled_from(["quadratic", "l1norm"]))
    def test_split_amplitude_avoids_middle(self, seed, family):
        a = sample_task(family, SeededRng(seed)).params["A"]
        assert 0.02 <= abs(a) <= 0.15

    def test_split_amplitude_takes_both_signs(self):
        signs = {np.sign(sample_task("quadratic", SeededRng(0).child(i)).params["A"]) for i in range(50)}
        assert signs == {-1.0, 1.0}

    @given(st.integers(0, 2**32 - 1), st.sampled_from(FAMILIES))
    def test_parameters_in_range(self, seed, family):
        t = sample_task(family, SeededRng(seed))
        for name, (lo, hi) in FAMILY_RANGES[family].items():
            v = abs(t.params["A"]) if name == "A_split" else t.params[name]
            assert lo <= v <= hi

    def test_same_seed_same_task(self):
        assert sample_task("tanh", SeededRng(3)) == sample_task("tanh", SeededRng(3))

    def test_unknown_family(self):
        with pytest.raises(ConfigError):
            sample_task("cubic", SeededRng(0))


class TestEpisodes:
    def test_noise_free_matches_formula(self):
        t = sample_task("sine", SeededRng(1))
        ep = sample_episode(t, 5, 5, SeededRng(2), noise_std=0.0)
        np.testing.assert_array_equal(ep.support_y, eval_task(t, ep.support_x))
        np.testing.assert_array_equal(ep.query_y, eval_task(t, ep.query_x))

    def test_noise_std(self):
        t = TaskInstance("linear", {"A": 0.0, "b": 0.0})
        ep = sample_episode(t, 50_000, 50_000, SeededRng(4))
        noise = np.concatenate([ep.support_y, ep.query_y])
        assert abs(noise.std() - 0.3) <= 0.01

    def test_default_sizes_and_independence(self):
        _, ep = build_mode_set("SET1", 1, SeededRng(0))[0]
        assert ep.support_x.shape == ep.query_x.shape == (5,)
        assert not np.array_equal(ep.support_x, ep.query_x)
        assert ep.support_x.min() >= -5.0 and ep.support_x.max() < 5.0

    def test_sizes_validated(self):
        with pytest.raises(ConfigError):
            sample_episode(sample_task("linear", SeededRng(0)), 0, 5, SeededRng(0))


class TestModeSets:
    def test_definitions(self):
        assert set(MODE_SETS["SET1"]) == {"sine", "linear", "quadratic"}
        assert set(MODE_SETS["SET2"]) == {"linear", "tanh", "l1norm"}
        assert set(MODE_SETS["SET3"]) == {"quadratic", "tanh", "l1norm"}

    def test_round_robin_counts(self):
        tasks = build_mode_set("SET1", 2, SeededRng(0))
        fams = [t.family for t, _ in tasks]
        assert len(fams) == 6
        assert all(fams.count(f) == 2 for f in MODE_SETS["SET1"])

    def test_set3_has_no_sine(self):
        assert all(t.family != "sine" for t, _ in build_mode_set("SET3", 20, SeededRng(0)))

    def test_reproducible(self):
        a = build_mode_set("SET2", 5, SeededRng(9))
        b = build_mode_set("SET2", 5, SeededRng(9))
        assert [t for t, _ in a] == [t for t, _ in b]
        assert all(x.support_y.tobytes() == y.support_y.tobytes() for (_, x), (_, y) in zip(a, b))

    def test_task_independent_of_set_size(self):
        # task i depends only on its own sub-stream
        small = build_mode_set("SET2", 2, SeededRng(9))
        large = build_mode_set("SET2", 10, SeededRng(9))
        for (t1, e1), (t2, e2) in zip(small, large):
            assert t1 == t2 and e1.query_y.tobytes() == e2.query_y.tobytes()

    def test_set_names(self):
        assert set_name(1) == set_name("set1") == "SET1"
        with pytest.raises(ConfigError):
            set_name("SET4")
        with pytest.raises(ConfigError):
            build_mode_set("SET9", 1, SeededRng(0))


def test_csv_round_trip(tmp_path):
    tasks = build_mode_set("SET1", 3, SeededRng(2))
    path = tmp_path / "episodes.csv"
    write_episodes(path, [e for _, e in tasks], header="# tamrl config=abc seed=2\n")
    back = read_episodes(path)
    ref = stack_episodes([e for _, e in tasks])
    assert back.task_ids == ref.task_ids and back.families == ref.families
    for name in ("support_x", "support_y", "query_x", "query_y"):
        assert getattr(back, name).tobytes() == getattr(ref, name).tobytes()
    manifest = tmp_path / "tasks.csv"
    write_task_manifest(manifest, tasks)
    lines = manifest.read_text().splitlines()
    assert lines[0] == "task_id,family,A,w,b,c" and len(lines) == 10
