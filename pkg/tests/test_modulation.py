import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tamrl.errors import ShapeError
from tamrl.modulation import (
    FilmSite,
    LinearParams,
    encode_task,
    export_embeddings,
    film_apply,
    generate_modulation,
    identity_sites,
    init_generator,
    init_mlp_base,
    init_seq_base,
    modulate_base,
)
from tamrl.networks import bilstm_encode, init_params
from tamrl.numcore import SeededRng

from conftest import assert_bitwise_equal


class TestFilm:
    def test_example(self):
        site = FilmSite("s", np.array([2.0, 0.5]), np.array([1.0, -1.0]))
        np.testing.assert_array_equal(film_apply(site, np.array([3.0, 4.0])), [7.0, 1.0])

    def test_width_checked(self):
        site = FilmSite("s", np.ones(2), np.zeros(2))
        with pytest.raises(ShapeError):
            film_apply(site, np.ones(3))

    def test_mismatched_pair(self):
        with pytest.raises(ShapeError):
            FilmSite("s", np.ones(2), np.zeros(3))

    @given(st.integers(1, 8), st.integers(0, 2**16))
    def test_identity_is_exact(self, width, seed):
        h = SeededRng(seed).normal((4, width))
        site = identity_sites([("s", width)])[0]
        assert_bitwise_equal(film_apply(site, h), h)


class TestModulatedBase:
    def test_mlp_site_per_layer(self, rng):
        base = init_mlp_base([1, 100, 100, 100, 1], rng)
        specs = base.site_specs()
        assert len(specs) == 4
        assert [w for _, w in specs] == [100, 100, 100, 1]

    def test_identity_modulation_mlp_is_bit_identical(self, rng):
        base = init_mlp_base([1, 16, 16, 1], rng)
        x = rng.normal((3, 5, 1))
        m = modulate_base(base, identity_sites(base.site_specs()))
        assert_bitwise_equal(m(x), base.forward(x)[0])

    def test_identity_modulation_seq_is_bit_identical(self, rng):
        base = init_seq_base(3, 6, rng, input_width=4)
        x = rng.normal((1, 9, 3))
        m = modulate_base(base, identity_sites(base.site_specs()))
        assert_bitwise_equal(m(x), base.forward(x)[0])

    def test_wrong_site_count(self, rng):
        base = init_mlp_base([1, 8, 8, 1], rng)
        with pytest.raises(ShapeError, match="3 modulation sites"):
            modulate_base(base, identity_sites(base.site_specs()[:2]))

    def test_wrong_site_width(self, rng):
        base = init_mlp_base([1, 8, 1], rng)
        with pytest.raises(ShapeError):
            modulate_base(base, identity_sites([("mlp-layer-0", 7), ("mlp-layer-1", 1)]))

    def test_modulation_changes_output(self, rng):
        base = init_mlp_base([1, 8, 1], rng)
        x = rng.normal((1, 4, 1))
        sites = identity_sites(base.site_specs())
        sites[-1] = FilmSite(sites[-1].tag, np.array([2.0]), np.array([0.5]))
        np.testing.assert_allclose(modulate_base(base, sites)(x), 2 * base.forward(x)[0] + 0.5, rtol=1e-14)


class TestGenerator:
    def test_zero_embedding_gives_identity(self, rng):
        base = init_mlp_base([1, 5, 1], rng)
        gen = init_generator(base.site_specs(), 4, rng)
        for s in generate_modulation(gen, np.zeros(4)):
            np.testing.assert_array_equal(s.gamma, np.ones(s.width))
            np.testing.assert_array_equal(s.beta, np.zeros(s.width))

    def test_zero_weights_give_bias(self, rng):
        gen = init_generator([("a", 3)], 2, rng, identity_bias=False)
        gen.layers[0] = LinearParams(np.zeros((6, 2)), np.arange(6.0))
        (s,) = generate_modulation(gen, rng.normal(2))
        np.testing.assert_array_equal(s.gamma, [0, 1, 2])
        np.testing.assert_array_equal(s.beta, [3, 4, 5])

    def test_against_explicit_product(self, rng):
        gen = init_generator([("a", 2), ("b", 3)], 3, rng)
        z = rng.normal(3)
        for lin, s in zip(gen.layers, generate_modulation(gen, z)):
            tau = [sum(lin.W[i, j] * z[j] for j in range(3)) + lin.b[i] for i in range(lin.W.shape[0])]
            np.testing.assert_allclose(np.concatenate([s.gamma, s.beta]), tau, rtol=1e-13)

    @given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.integers(0, 2**16))
    def test_split_is_bijective(self, widths, seed):
        r = SeededRng(seed)
        gen = init_generator([(f"s{k}", w) for k, w in enumerate(widths)], 3, r)
        z = r.normal((2, 3))
        for lin, s in zip(gen.layers, generate_modulation(gen, z)):
            tau = z @ lin.W.T + lin.b
            assert s.gamma.shape == s.beta.shape == (2, lin.W.shape[0] // 2)
            assert_bitwise_equal(np.concatenate([s.gamma, s.beta], axis=-1), tau)

    def test_embedding_width_checked(self, rng):
        gen = init_generator([("a", 2)], 3, rng)
        with pytest.raises(ShapeError):
            generate_modulation(gen, np.zeros(4))

    def test_batched_embeddings(self, rng):
        gen = init_generator([("a", 2)], 3, rng)
        z = rng.normal((5, 3))
        (batched,) = generate_modulation(gen, z)
        for k in range(5):
            (single,) = generate_modulation(gen, z[k])
            np.testing.assert_allclose(batched.gamma[k], single.gamma, rtol=1e-14)


class TestEncoder:
    def test_empty_support(self, rng):
        enc = init_params("bilstm", (2, 3), rng)
        with pytest.raises(ShapeError):
            encode_task(enc, np.zeros((0, 2)))

    def test_several_windows_are_averaged(self, rng):
        enc = init_params("bilstm", (2, 3), rng)
        windows = rng.normal((3, 6, 2))
        per = np.stack([bilstm_encode(enc, w)[0] for w in windows])
        np.testing.assert_allclose(encode_task(enc, windows), per.mean(axis=0), rtol=1e-13)

    def test_single_window(self, rng):
        enc = init_params("bilstm", (2, 3), rng)
        w = rng.normal((6, 2))
        assert_bitwise_equal(encode_task(enc, w), bilstm_encode(enc, w)[0])


def test_export_embeddings(tmp_path):
    path = tmp_path / "z.csv"
    export_embeddings(path, ["a", "b"], np.array([[0.5, 1.0], [2.0, -1.0]]), {"family": ["sine", "tanh"]},
                      header="# tamrl config=x seed=0\n")
    lines = path.read_text().splitlines()
    assert lines[0] == "# tamrl config=x seed=0"
    assert lines[1] == "entity_id,family,z_0,z_1"
    assert lines[2] == "a,sine,0.5,1.0"
