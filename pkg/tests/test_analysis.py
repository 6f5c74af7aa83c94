import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from credassign import analysis as A
from credassign.data import Dataset
from credassign.errors import DimensionError, DomainError, EmptySubsetError, FormatError
from credassign.feedback import FeedbackRule
from credassign.network import cifar_network, init_network

from conftest import micro_net


def hsic_cka(x, y):
    """Textbook biased-HSIC CKA with explicit centering matrix."""
    n = len(x)
    h = np.eye(n) - np.ones((n, n)) / n
    k, l = x @ x.T, y @ y.T

    def hsic(a, b):
        return np.trace(a @ h @ b @ h) / (n - 1) ** 2

    return hsic(k, l) / np.sqrt(hsic(k, k) * hsic(l, l))


class TestAngle:
    def test_identical_and_opposite(self, rng):
        a = rng.standard_normal(100)
        assert A.angle_between(a, a) == 0.0
        assert A.angle_between(a, -a) == pytest.approx(180.0)
        assert A.angle_between(a, 3 * a) == pytest.approx(0.0, abs=1e-9)

    def test_orthogonal(self):
        assert A.angle_between([1, 0], [0, 2]) == pytest.approx(90.0)

    def test_zero_signal(self):
        assert A.angle_between(np.zeros(3), np.ones(3)) is None

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            A.angle_between(np.ones(3), np.ones(4))

    def test_gradient_angle_bp_is_zero(self, rng):
        net = micro_net()
        angles = A.gradient_angle(net, rng.standard_normal((4, 3, 12, 12)), [0, 1, 2, 3], "bp")
        assert all(v == 0.0 for v in angles.values())

    def test_gradient_angle_fa_with_w_as_feedback(self, rng):
        net = micro_net()
        for l in net.weight_layers:
            l.B0 = l.W.copy()
        angles = A.gradient_angle(net, rng.standard_normal((4, 3, 12, 12)), [0, 1, 2, 3],
                                  FeedbackRule.FA_TOEPLITZ)
        assert all(v < 1e-5 for v in angles.values())

    def test_gradient_angle_random_feedback_is_large(self, rng):
        net = init_network(cifar_network(), FeedbackRule.FA_TOEPLITZ, 0.05, 3)
        x = rng.standard_normal((16, 3, 24, 24)).astype(np.float32)
        angles = A.gradient_angle(net, x, rng.integers(0, 10, 16), "fa_toeplitz")
        assert angles["fc3"] == 0.0
        assert angles["fc2"] > 45


class TestConcordance:
    def test_extremes(self, rng):
        w = rng.standard_normal((20, 30))
        assert A.sign_concordance(w, 0.1 * w) == 1.0
        assert A.sign_concordance(w, -w) == 0.0

    def test_independent_is_half(self, rng):
        c = A.sign_concordance(rng.standard_normal((300, 300)), rng.standard_normal((300, 300)))
        assert c == pytest.approx(0.5, abs=0.01)

    def test_sign_of_zero(self):
        assert A.sign_concordance(np.array([0.0, 1.0]), np.array([0.0, -1.0])) == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            A.sign_concordance(np.ones((2, 3)), np.ones((3, 2)))

    def test_report(self):
        net = init_network(cifar_network(), FeedbackRule.FA_RANDOM, 0.05, 42)
        rep = A.concordance_report(net)
        assert rep["conv1"] is None and rep["conv2"] is None
        assert rep["fc1"] == pytest.approx(0.5, abs=0.01)


class TestCKA:
    def test_self_is_one(self, rng):
        x = rng.standard_normal((50, 20))
        assert A.linear_cka(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_invariances(self, rng):
        x = rng.standard_normal((40, 12))
        y = rng.standard_normal((40, 7))
        q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
        base = A.linear_cka(x, y)
        assert A.linear_cka(x @ q, y) == pytest.approx(base, abs=1e-12)
        assert A.linear_cka(5.0 * x + 3.0, y) == pytest.approx(base, abs=1e-12)
        assert A.linear_cka(y, x) == pytest.approx(base, abs=1e-12)

    def test_hsic_oracle_small(self):
        r = np.random.default_rng(0)
        x, y = r.standard_normal((5, 3)), r.standard_normal((5, 3))
        assert A.linear_cka(x, y) == pytest.approx(hsic_cka(x, y), abs=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(3, 20), p=st.integers(1, 30), q=st.integers(1, 30), seed=st.integers(0, 2**16))
    def test_hsic_oracle_property(self, n, p, q, seed):
        r = np.random.default_rng(seed)
        x, y = r.standard_normal((n, p)), r.standard_normal((n, q))
        got = A.linear_cka(x, y)
        assert 0.0 <= got <= 1.0 + 1e-12
        assert got == pytest.approx(hsic_cka(x, y), abs=1e-10)

    def test_zero_variance(self, rng):
        assert A.linear_cka(np.ones((10, 4)), rng.standard_normal((10, 4))) is None

    def test_sample_mismatch(self):
        with pytest.raises(DimensionError):
            A.linear_cka(np.ones((3, 2)), np.ones((4, 2)))

    def test_centered_gram_chunks(self, rng):
        x = rng.standard_normal((30, 50))
        rows = np.arange(0, 30, 2)
        g = A.centered_gram(x, rows, chunk=7)
        xc = x[rows] - x[rows].mean(axis=0)
        k = xc @ xc.T
        np.testing.assert_allclose(g, k / np.linalg.norm(k), atol=1e-13)
        assert A.centered_gram(np.ones((4, 3))) is None


@pytest.fixture(scope="module")
def dumps(tiny_data):
    val = tiny_data[1]
    a = init_network(cifar_network(), FeedbackRule.BP, None, 1)
    b = init_network(cifar_network(), FeedbackRule.BP, None, 2)
    return A.dump_activations(a, val, "a"), A.dump_activations(b, val, "b")


class TestCKAGrid:
    def test_self_diagonal(self, dumps):
        grid = A.cka_grid(dumps[0], dumps[0])
        np.testing.assert_allclose(np.diag(grid), 1.0, atol=1e-6)
        np.testing.assert_allclose(grid, grid.T, atol=1e-6)

    def test_matches_direct(self, dumps):
        a, b = dumps
        grid = A.cka_grid(a, b)
        for i, la in enumerate(a.layer_names):
            for j, lb in enumerate(b.layer_names):
                assert grid[i, j] == pytest.approx(A.linear_cka(a.layers[la], b.layers[lb]), abs=1e-6)

    def test_compact_grams_agree(self, dumps, monkeypatch):
        full = A.cka_grid(*dumps)
        monkeypatch.setattr(A, "GRAM_F64_LIMIT", 2)
        np.testing.assert_allclose(A.cka_grid(*dumps), full, atol=1e-5)

    def test_subsets(self, dumps):
        a, b = dumps
        sizes = A.subset_sizes(a, b)
        assert sizes["all"] == len(a.labels)
        assert sizes["both_correct"] == int((a.correct & b.correct).sum())

    def test_empty_subset_names_sizes(self, dumps):
        a = dumps[0]
        with pytest.raises(EmptySubsetError, match="both_correct="):
            A.cka_grid(a, a, "a_correct_b_wrong")

    def test_unknown_subset(self, dumps):
        with pytest.raises(DomainError):
            A.subset_mask(*dumps, "neither")

    def test_disk_dump_roundtrip(self, tiny_data, tmp_path):
        net = init_network(cifar_network(), FeedbackRule.BP, None, 1)
        val = tiny_data[1].select(np.arange(40))
        mem = A.dump_activations(net, val, "m")
        disk = A.dump_activations(net, val, "m", tmp_path / "d.bin", batch_size=16)
        for name in mem.layer_names:
            np.testing.assert_array_equal(mem.layers[name], disk.layers[name])
        np.testing.assert_array_equal(mem.predictions, disk.predictions)
        assert disk.layers["conv1"].shape == (40, 64 * 20 * 20)

    def test_empty_dataset(self):
        empty = Dataset(np.zeros((0, 3, 32, 32), np.uint8), np.zeros(0, np.int64), "test")
        with pytest.raises(EmptySubsetError):
            A.dump_activations(cifar_network(), empty, "x")


class TestImportance:
    def test_unit_maps(self):
        scores = A.channel_importance_from_maps(np.ones((2, 3, 4, 4)), np.ones((2, 3, 4, 4)))
        np.testing.assert_allclose(scores, 1.0)

    def test_zero_gradient_channel(self, rng):
        acts = rng.random((3, 4, 5, 5))
        grads = rng.standard_normal((3, 4, 5, 5))
        grads[:, 2] = 0
        scores = A.channel_importance_from_maps(acts, grads)
        assert scores[2] == 0.0 and np.all(scores[[0, 1, 3]] > 0)

    def test_hand_value(self):
        acts = np.zeros((1, 1, 2, 2))
        acts[0, 0] = [[1, 3], [0, 0]]  # mean 1
        grads = np.full((1, 1, 2, 2), -2.0)
        assert A.channel_importance_from_maps(acts, grads)[0] == 2.0

    def test_ranking_ties(self):
        imp = A.ChannelImportance("conv1", 5, np.array([0.1, 0.3, 0.3, 0.0]), 10)
        assert imp.top(3) == [1, 2, 0]

    def test_on_network(self, tiny_data):
        net = init_network(cifar_network(), FeedbackRule.BP, None, 1)
        val = tiny_data[1]
        cid = int(val.labels[0])
        imp = A.channel_importance(net, val, cid, "conv2", batch_size=7)
        assert imp.scores.shape == (64,) and imp.n_images == int((val.labels == cid).sum())
        assert np.all(imp.scores >= 0)

    def test_errors(self, tiny_data):
        net = cifar_network()
        with pytest.raises(DomainError):
            A.channel_importance(net, tiny_data[1], 0, "fc1")
        one_class = tiny_data[1].select(np.flatnonzero(tiny_data[1].labels == 0))
        with pytest.raises(EmptySubsetError):
            A.channel_importance(net, one_class, 1, "conv1")


class TestExemplars:
    def test_rank(self):
        assert A.rank_exemplars(np.array([1.0, 5.0, 5.0, 2.0]), 3) == [(1, 5.0), (2, 5.0), (3, 2.0)]
        with pytest.raises(DomainError):
            A.rank_exemplars(np.ones(3), 4)

    def test_white_image_ranks_first(self, tiny_data):
        net = init_network(cifar_network(), FeedbackRule.BP, None, 1)
        conv1 = net.layer("conv1")
        conv1.W[0] = np.abs(conv1.W[0])
        val = tiny_data[1].select(np.arange(20))
        px = val.pixels.copy()
        px[13] = 255
        ds = Dataset(px, val.labels, "test")
        hits = A.top_exemplars(net, ds, "conv1", 0, k=9)
        assert len(hits) == 9 and hits[0][0] == 13
        assert [s for _, s in hits] == sorted((s for _, s in hits), reverse=True)

    def test_write_outputs(self, tiny_data, tmp_path):
        ds = tiny_data[1].select(np.arange(12))
        hits = [(i, float(10 - i)) for i in range(9)]
        ppm, meta = A.write_exemplars(tmp_path, ds, "conv2", 4, hits, "m")
        img = A.read_ppm(ppm)
        assert img.shape == (3 * 32 + 4, 3 * 32 + 4, 3)
        np.testing.assert_array_equal(img[:32, 34:66], ds.pixels[1].transpose(1, 2, 0))
        info = json.loads(meta.read_text())
        assert info["k"] == 9 and info["entries"][0]["position"] == 0

    def test_ppm_roundtrip_and_bad_file(self, rng, tmp_path):
        rgb = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
        A.write_ppm(tmp_path / "x.ppm", rgb)
        np.testing.assert_array_equal(A.read_ppm(tmp_path / "x.ppm"), rgb)
        (tmp_path / "y.ppm").write_bytes(b"P3\n1 1\n255\n000")
        with pytest.raises(FormatError):
            A.read_ppm(tmp_path / "y.ppm")
