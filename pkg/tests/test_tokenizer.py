import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from minirec import autodiff as ad
from minirec import catalog as C
from minirec import tokenizer as T


@pytest.fixture(scope="module")
def default_x():
    return C.generate_catalog(0, 500, 16, 20).embeddings


@pytest.fixture(scope="module")
def default_cb(default_x):
    return T.train_rq_kmeans(default_x, 3, 32, 50, 0, return_history=True)


class TestKMeans:
    def test_k_distinct_points_recovered(self, rng):
        x = rng.normal(size=(8, 3))
        cb = T.train_rq_kmeans(x, 1, 8, 20, 0)
        np.testing.assert_allclose(np.sort(cb.centroids[0], axis=0), np.sort(x, axis=0))
        assert all(np.abs(a.residual).max() == 0 for a in T.quantize_all(x, cb))

    def test_sse_non_increasing(self, default_cb):
        _, histories = default_cb
        for h in histories:
            assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))

    def test_residual_norm_shrinks(self, default_x, default_cb):
        cb, _ = default_cb
        r = default_x.copy()
        norms = [np.linalg.norm(r, axis=1).mean()]
        for lvl in range(3):
            lab, _ = T.nearest(r, cb.centroids[lvl])
            r = r - cb.centroids[lvl][lab]
            norms.append(np.linalg.norm(r, axis=1).mean())
        assert all(b <= a for a, b in zip(norms, norms[1:]))

    def test_fewer_distinct_points_than_k_padded(self):
        x = np.repeat(np.eye(3), 4, axis=0)
        cb = T.train_rq_kmeans(x, 2, 8, 10, 0)
        assert cb.centroids.shape == (2, 8, 3)
        assert np.all(np.isfinite(cb.centroids))

    def test_empty_cluster_repair(self):
        # seeding on duplicates would leave clusters empty without repair
        x = np.concatenate([np.zeros((20, 2)), np.ones((1, 2)) * 10, np.ones((1, 2)) * -10])
        res = T.kmeans(x, 3, 10, 0)
        assert np.bincount(res.labels, minlength=3).min() >= 1

    def test_deterministic(self, default_x):
        a = T.train_rq_kmeans(default_x[:100], 2, 8, 10, 4)
        b = T.train_rq_kmeans(default_x[:100], 2, 8, 10, 4)
        assert T.codebook_bytes(a) == T.codebook_bytes(b)

    def test_utilization_over_half(self, default_x, default_cb):
        util = T.code_utilization(T.quantize_all(default_x, default_cb[0]), 32)
        assert min(util) > 0.5

    def test_nearest_ties_lowest_index(self):
        c = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
        lab, _ = T.nearest(np.array([[0.0, 0.0], [1.0, 0.0]]), c)
        assert lab.tolist() == [0, 0]


class TestQuantize:
    def test_telescoping(self, default_x, default_cb):
        cb = default_cb[0]
        for a in T.quantize_all(default_x, cb):
            rebuilt = T.reconstruct(a.codes, cb) + a.residual
            assert np.abs(rebuilt - default_x[a.item_id]).max() <= 1e-12

    @given(arrays(np.float64, 16, elements=st.floats(-3, 3)))
    @settings(max_examples=100, deadline=None)
    def test_argmin_matches_exhaustive_scan(self, x):
        cb = _small_book()
        a = T.quantize(x, cb)
        r = x.copy()
        for lvl, code in enumerate(a.codes):
            dists = [float(((r - c) ** 2).sum()) for c in cb.centroids[lvl]]
            assert code == int(np.argmin(dists))
            r = r - cb.centroids[lvl][code]
        np.testing.assert_array_equal(a.residual, r)

    def test_exact_centroid_with_zero_levels(self, rng):
        cents = rng.normal(size=(3, 4, 5))
        cents[1, 2] = 0.0
        cents[2, 3] = 0.0
        cb = T.Codebook(cents)
        a = T.quantize(cents[0, 1], cb)
        assert a.codes == (1, 2, 3)
        assert not a.residual.any()

    def test_quantize_all_matches_quantize(self, default_x, default_cb):
        cb = default_cb[0]
        batch = T.quantize_all(default_x[:50], cb)
        for i, a in enumerate(batch):
            assert a.codes == T.quantize(default_x[i], cb).codes

    def test_dim_mismatch(self, default_cb):
        with pytest.raises(ValueError, match="dim"):
            T.quantize(np.zeros(3), default_cb[0])


class TestReconstruct:
    def test_zero_centroids(self):
        assert not T.reconstruct((0, 1, 2), T.Codebook(np.zeros((3, 4, 5)))).any()

    def test_error_is_residual_norm(self, default_x, default_cb):
        cb = default_cb[0]
        a = T.quantize(default_x[7], cb)
        err = np.linalg.norm(default_x[7] - T.reconstruct(a.codes, cb))
        assert err == pytest.approx(np.linalg.norm(a.residual), abs=1e-12)

    @pytest.mark.parametrize("codes", [(0, 1), (0, 1, 32), (-1, 0, 0)])
    def test_rejects_bad_codes(self, default_cb, codes):
        with pytest.raises(ValueError):
            T.reconstruct(codes, default_cb[0])

    def test_mse_decreases_with_levels(self, default_x):
        mse = [T.reconstruction_mse(default_x, T.train_rq_kmeans(default_x, L, 32, 50, 0)) for L in (1, 2, 3)]
        assert mse[0] > mse[1] > mse[2]


class TestCollisions:
    def assign(self, *codes):
        return [T.SidAssignment(i, c, np.zeros(1)) for i, c in enumerate(codes)]

    def test_none(self):
        out = T.disambiguate_collisions(self.assign((0, 0, 0), (0, 0, 1)))
        assert [a.disambiguation for a in out] == [0, 0]
        assert not any(a.extended for a in out)

    def test_pair_in_id_order(self):
        out = T.disambiguate_collisions(self.assign((1, 2, 3), (0, 0, 0), (1, 2, 3)))
        assert [(a.disambiguation, a.extended) for a in out] == [(0, True), (0, False), (1, True)]

    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40))
    def test_unique_keys(self, codes):
        out = T.disambiguate_collisions(self.assign(*codes))
        keys = [(a.codes, a.disambiguation) for a in out]
        assert len(set(keys)) == len(keys)

    def test_table_round_trip(self, tmp_path, default_x, default_cb):
        table = T.sid_table(default_x[:80], default_cb[0])
        T.save_sid_table(table, tmp_path / "s.jsonl")
        back = T.load_sid_table(tmp_path / "s.jsonl")
        assert [(a.item_id, a.codes, a.disambiguation) for a in back] == [
            (a.item_id, a.codes, a.disambiguation) for a in table
        ]


class TestCodebookFile:
    def test_round_trip_bytes(self, tmp_path, default_cb):
        cb = default_cb[0]
        T.save_codebook(cb, tmp_path / "a.rqcb")
        back = T.load_codebook(tmp_path / "a.rqcb")
        T.save_codebook(back, tmp_path / "b.rqcb")
        assert (tmp_path / "a.rqcb").read_bytes() == (tmp_path / "b.rqcb").read_bytes()
        np.testing.assert_array_equal(back.centroids, cb.centroids)

    def test_truncated(self, tmp_path, default_cb):
        T.save_codebook(default_cb[0], tmp_path / "a.rqcb")
        raw = (tmp_path / "a.rqcb").read_bytes()
        (tmp_path / "a.rqcb").write_bytes(raw[:-5])
        with pytest.raises(T.CodebookFormatError, match="offset"):
            T.load_codebook(tmp_path / "a.rqcb")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(T.CodebookFormatError, match="magic"):
            T.load_codebook(tmp_path / "x")

    def test_version_mismatch(self, tmp_path, default_cb):
        raw = bytearray(T.codebook_bytes(default_cb[0]))
        raw[4:8] = (99).to_bytes(4, "little")
        (tmp_path / "v").write_bytes(bytes(raw))
        with pytest.raises(T.IncompatibleVersionError):
            T.load_codebook(tmp_path / "v")


@pytest.fixture(scope="module")
def toy():
    return C.generate_catalog(0, 200, 8, 8).embeddings


class TestRqVae:
    def tensors(self, x, seed=0, beta=0.25):
        cfg = T.RqVaeConfig(latent_dim=4, hidden=8, levels=2, k=4, beta_commit=beta, seed=seed)
        p = T.init_rq_vae(x.shape[1], cfg)
        p.codebook = T.train_rq_kmeans(p.encode(x), 2, 4, 10, seed)
        tens = {n: ad.Tensor(getattr(p, n).copy(), True, n) for n in T._VAE_NAMES}
        return tens, ad.Tensor(p.codebook.centroids.copy(), True, "codebook")

    def test_gradients_match_finite_differences(self, toy):
        x = toy[:12]
        tens, book = self.tensors(x)
        plist = list(tens.values()) + [book]
        frozen = {}
        with ad.Tape() as tape:
            loss = T.rq_vae_loss(tens, book, x, 0.25, frozen=frozen)
        g = tape.gradient(loss, plist)
        num = ad.finite_difference_gradient(
            lambda: T.rq_vae_loss(tens, book, x, 0.25, frozen=frozen).item(), [p.data for p in plist]
        )
        assert ad.max_relative_error(g, num) < 1e-4

    def test_frozen_replay_matches_fresh_value(self, toy):
        x = toy[:10]
        tens, book = self.tensors(x)
        frozen = {}
        a = T.rq_vae_loss(tens, book, x, 0.25, frozen=frozen).item()
        assert T.rq_vae_loss(tens, book, x, 0.25, frozen=frozen).item() == a == T.rq_vae_loss(tens, book, x, 0.25).item()

    def test_codeword_gradient_only_from_codebook_term(self, toy):
        x = toy[:10]
        tens, book = self.tensors(x)
        with ad.Tape() as tape:
            loss = T.rq_vae_loss(tens, book, x, 0.25)
        g_book = tape.gradient(loss, [book])[0]
        # rows never selected receive no gradient
        used = set()
        frozen = {}
        T.rq_vae_loss(tens, book, x, 0.25, frozen=frozen)
        for lvl in range(2):
            used |= {(lvl, int(c)) for c in frozen[lvl][0]}
        for lvl in range(2):
            for k in range(4):
                if (lvl, k) not in used:
                    assert not g_book[lvl, k].any()

    def test_beta_zero_drops_commitment(self, toy):
        x = toy[:20]
        tens, book = self.tensors(x, beta=0.0)
        parts = {}
        total = T.rq_vae_loss(tens, book, x, 0.0, parts).item()
        assert total == pytest.approx(parts["reco"] + parts["codebook"], rel=1e-12)
        assert parts["commit"] > 0

    def test_loss_decreases(self, toy):
        cfg = T.RqVaeConfig(latent_dim=8, hidden=32, levels=3, k=8, steps=50, batch_size=64, lr=3e-3, seed=0)
        h = np.array(T.train_rq_vae(toy, cfg).loss_history)
        smooth = np.convolve(h, np.ones(5) / 5, mode="valid")
        assert all(b <= a * 1.10 for a, b in zip(smooth, smooth[1:]))
        assert smooth[-1] < smooth[0]

    def test_assignments_unique(self, toy):
        vae = T.train_rq_vae(toy, T.RqVaeConfig(latent_dim=4, hidden=8, levels=3, k=8, steps=5, seed=1))
        keys = [(a.codes, a.disambiguation) for a in vae.assignments(toy)]
        assert len(set(keys)) == len(toy)
        assert vae.encode(toy).shape[1] == vae.codebook.dim

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_keeps_checkpoint(self, toy):
        cfg = T.RqVaeConfig(latent_dim=4, hidden=8, levels=1, k=4, steps=10, lr=1e300, seed=0)
        with pytest.raises(T.TrainingDiverged) as info:
            T.train_rq_vae(toy * 1e150, cfg)
        assert info.value.checkpoint is not None


_BOOK = []


def _small_book():
    if not _BOOK:
        x = C.generate_catalog(5, 120, 16, 6).embeddings
        _BOOK.append(T.train_rq_kmeans(x, 3, 8, 20, 0))
    return _BOOK[0]
