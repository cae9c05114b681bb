import numpy as np
import pytest

from geodenoise import autodiff as ad
from geodenoise.autodiff import Tensor, finite_diff_check
from geodenoise.encoder import (
    EncoderConfig,
    encode,
    encode_types_distances,
    init_encoder_params,
    pair_representation,
    rbf_expand,
    readout,
)
from geodenoise.geometry import (
    MoleculeGeometry,
    apply_rigid_transform,
    pairwise_distances,
    random_rotation,
    sample_atom_mask,
)
from geodenoise.reference import encode_plain
from geodenoise.selfcheck import random_molecule

TINY = EncoderConfig(embedding_dim=8, num_layers=2, rbf_count=8)


@pytest.fixture
def params():
    return init_encoder_params(TINY, np.random.default_rng(0))


class TestEncode:
    def test_single_atom_is_output_mlp_of_embedding(self, params):
        g = MoleculeGeometry(np.array([6]), np.zeros((1, 3)))
        h = encode(g, TINY, params).data
        z = params["encoder.embedding"][np.array([6])]
        expected = (
            np.matmul(
                np.logaddexp(0.0, np.matmul(z, params["encoder.out.w1"]) + params["encoder.out.b1"]) - np.log(2),
                params["encoder.out.w2"],
            )
            + params["encoder.out.b2"]
        )
        np.testing.assert_allclose(h, expected, rtol=0, atol=0)

    @pytest.mark.parametrize("seed", range(5))
    def test_rigid_invariance(self, params, seed):
        rng = np.random.default_rng(seed)
        g = random_molecule(rng)
        t = random_rotation(rng)
        h0 = encode(g, TINY, params).data
        h1 = encode(apply_rigid_transform(g, t), TINY, params).data
        np.testing.assert_allclose(h1, h0, atol=1e-10 * max(1, np.abs(h0).max()))

    def test_rigid_invariance_hundred_transforms(self, params):
        rng = np.random.default_rng(99)
        worst = 0.0
        for trial in range(100):
            g = random_molecule(rng) if trial % 10 == 0 else g
            t = random_rotation(rng)
            h0 = encode(g, TINY, params).data
            h1 = encode(apply_rigid_transform(g, t), TINY, params).data
            worst = max(worst, np.max(np.abs(h1 - h0)) / max(1.0, np.abs(h0).max()))
        assert worst < 1e-10

    def test_permutation_equivariance(self, params):
        rng = np.random.default_rng(10)
        g = random_molecule(rng, 5, 7)
        perm = rng.permutation(g.n)
        h = encode(g, TINY, params).data
        hp = encode(g.permute(perm), TINY, params).data
        np.testing.assert_allclose(hp, h[perm], atol=1e-12)

    def test_rejects_out_of_table_type(self, params):
        g = MoleculeGeometry(np.array([119]), np.zeros((1, 3)))
        with pytest.raises(ValueError, match="embedding table"):
            encode(g, TINY, params)

    def test_mask_drops_atoms_entirely(self, params):
        rng = np.random.default_rng(3)
        g = random_molecule(rng, 6, 6)
        mask = sample_atom_mask(g.n, 0.4, rng)
        masked = encode(g, TINY, params, mask=mask).data
        direct = encode(g.subset(mask.kept_indices), TINY, params).data
        np.testing.assert_array_equal(masked, direct)

    def test_locality_under_cutoff(self, params):
        cfg = EncoderConfig(embedding_dim=8, num_layers=2, rbf_count=8, cutoff=5.0)
        base = MoleculeGeometry(
            np.array([6, 8, 1]),
            np.array([[0.0, 0, 0], [1.2, 0, 0], [0, 1.1, 0]]),
        )
        far = MoleculeGeometry(
            np.array([6, 8, 1, 7]),
            np.vstack([base.coords, [100.0, 100.0, 100.0]]),
        )
        h_base = encode(base, cfg, params).data
        h_far = encode(far, cfg, params).data
        np.testing.assert_array_equal(h_far[:3], h_base)

    def test_matches_straightline_forward(self, params):
        rng = np.random.default_rng(4)
        g = random_molecule(rng, 4, 7)
        dset = pairwise_distances(g)
        h_graph = encode_types_distances(g.atom_types, dset, TINY, params).data
        h_plain = encode_plain(g.atom_types, dset, TINY, params)
        assert np.array_equal(h_graph, h_plain)

    def test_gradient_through_encode_readout(self, params):
        rng = np.random.default_rng(5)
        g = random_molecule(rng, 3, 4)
        names = list(params)

        def f(*leaves):
            table = dict(zip(names, leaves))
            return ad.sum_(readout(encode(g, TINY, table)))

        leaves = [Tensor(params[k]) for k in names]
        err = finite_diff_check(f, leaves, epsilon=1e-4, max_entries_per_leaf=12)
        assert err < 1e-4


class TestReadout:
    def test_single_row(self):
        h = Tensor(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_array_equal(readout(h).data, [1.0, 2.0, 3.0])

    def test_opposite_rows_cancel(self):
        v = np.array([1.0, -2.0, 0.5])
        h = Tensor(np.stack([v, -v]))
        np.testing.assert_allclose(readout(h).data, np.zeros(3), atol=0)

    def test_duplication_invariant(self):
        rng = np.random.default_rng(6)
        rows = rng.standard_normal((3, 4))
        once = readout(Tensor(rows)).data
        twice = readout(Tensor(np.vstack([rows, rows]))).data
        np.testing.assert_allclose(twice, once, rtol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            readout(Tensor(np.zeros((0, 3))))


class TestPairRepresentation:
    def _dset(self, n):
        g = MoleculeGeometry(
            np.ones(n, dtype=int), np.arange(3 * n, dtype=float).reshape(n, 3)
        )
        return pairwise_distances(g)

    def test_equal_rows_double(self):
        v = np.array([1.0, 2.0])
        h = Tensor(np.stack([v, v]))
        rep = pair_representation(h, self._dset(2))
        np.testing.assert_array_equal(rep.data, [2 * v])

    def test_symmetric_under_swap(self):
        rng = np.random.default_rng(7)
        h = Tensor(rng.standard_normal((4, 3)))
        dset = self._dset(4)
        rep = pair_representation(h, dset).data
        flipped = type(dset)(dset.j, dset.i, dset.d, dset.cutoff)
        rep_swapped = pair_representation(h, flipped).data
        np.testing.assert_array_equal(rep, rep_swapped)

    def test_zero_row_is_identity(self):
        h = Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]))
        rep = pair_representation(h, self._dset(2))
        np.testing.assert_array_equal(rep.data, [[3.0, 4.0]])

    def test_index_out_of_range(self):
        h = Tensor(np.zeros((2, 3)))
        with pytest.raises(IndexError):
            pair_representation(h, self._dset(3))


class TestRbfExpand:
    def test_shape_and_peak(self):
        feats = rbf_expand(np.array([0.0, 10.0]), TINY)
        assert feats.shape == (2, TINY.rbf_count)
        assert feats[0, 0] == 1.0  # distance 0 sits on the first center
        assert feats[1, -1] == 1.0  # d_max sits on the last center

    def test_accepts_negative_inputs(self):
        feats = rbf_expand(np.array([-3.0]), TINY)
        assert np.all(np.isfinite(feats))


class TestEncoderConfig:
    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            EncoderConfig(embedding_dim=0)
        with pytest.raises(ValueError):
            EncoderConfig(rbf_gamma=-1.0)
        with pytest.raises(ValueError):
            EncoderConfig(cutoff=0.0)

    def test_centers_span(self):
        cfg = EncoderConfig(rbf_count=5, rbf_dmax=2.0)
        np.testing.assert_allclose(cfg.centers, [0.0, 0.5, 1.0, 1.5, 2.0])
