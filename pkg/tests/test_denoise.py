import math

import numpy as np
import pytest

from geodenoise import autodiff as ad
from geodenoise.autodiff import Tensor, finite_diff_check, init_adam
from geodenoise.denoise import (
    NoiseSchedule,
    ScoreNetConfig,
    TrainState,
    build_schedule,
    coordinate_score_oracle,
    ddm_alignment,
    ddm_loss,
    dsm_target,
    init_score_params,
    perturb_distances,
    pretrain_step,
    score_pairs,
)
from geodenoise.encoder import EncoderConfig, encode, init_encoder_params, pair_representation
from geodenoise.geometry import (
    DistanceSet,
    GeometryPair,
    MoleculeGeometry,
    apply_rigid_transform,
    pairwise_distances,
    perturb_coordinates,
    random_rotation,
)
from geodenoise.reference import ddm_loss_plain, single_level_dsm_plain
from geodenoise.selfcheck import random_molecule

TINY = EncoderConfig(embedding_dim=8, num_layers=2, rbf_count=8)
TINY_SCORE = ScoreNetConfig(dist_hidden=8, fusion_hidden=8)


def make_params(seed=0):
    rng = np.random.default_rng(seed)
    params = init_encoder_params(TINY, rng)
    params.update(init_score_params(TINY_SCORE, TINY, rng))
    return params


def make_pair(seed=0, n_lo=4, n_hi=6):
    rng = np.random.default_rng(seed)
    g = random_molecule(rng, n_lo, n_hi)
    return perturb_coordinates(g, 0.3, rng)


def frozen_noise(pair, levels, seed=100):
    rng = np.random.default_rng(seed)
    count = pair.g1.n * (pair.g1.n - 1) // 2
    table = {
        (d, l): rng.standard_normal(count)
        for d in (1, 2)
        for l in range(1, levels + 1)
    }
    return lambda d, l: table[(d, l)]


class TestBuildSchedule:
    def test_geometric_mean_midpoint(self):
        s = build_schedule(3, 0.01, 10.0, 0.2)
        assert s.sigmas[1] == pytest.approx(math.sqrt(0.1), abs=1e-12)

    @pytest.mark.parametrize("levels", [30, 50])
    def test_endpoints_exact(self, levels):
        s = build_schedule(levels, 0.01, 10.0, 0.2)
        assert s.sigmas[0] == 0.01
        assert s.sigmas[-1] == 10.0
        assert np.all(np.diff(s.sigmas) > 0)

    def test_single_level(self):
        s = build_schedule(1, 0.5, 0.5, 0.0)
        assert s.sigmas.tolist() == [0.5]

    def test_single_level_requires_equal_endpoints(self):
        with pytest.raises(ValueError):
            build_schedule(1, 0.1, 0.5)

    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            build_schedule(5, 0.0, 1.0)
        with pytest.raises(ValueError):
            build_schedule(5, 2.0, 1.0)
        with pytest.raises(ValueError):
            build_schedule(0, 0.1, 1.0)

    def test_schedule_type_invariants(self):
        with pytest.raises(ValueError):
            NoiseSchedule(np.array([0.5, 0.4]), 0.2)
        with pytest.raises(ValueError):
            NoiseSchedule(np.array([0.0, 1.0]), 0.2)


class TestPerturbDistances:
    def _dset(self, seed=0, n=5):
        return pairwise_distances(random_molecule(np.random.default_rng(seed), n, n))

    def test_zero_noise_limit(self):
        dset = self._dset()
        s = NoiseSchedule(np.array([1e-12]), 0.0)
        pd = perturb_distances(dset, 1, s, np.random.default_rng(0))
        np.testing.assert_allclose(pd.d_tilde, pd.d, atol=1e-10)

    def test_seeded_replay_fixture(self):
        dset = DistanceSet(
            np.array([0, 0, 1]), np.array([1, 2, 2]), np.array([1.0, 2.0, 3.0])
        )
        s = build_schedule(2, 0.3, 1.0, 0.0)
        pd = perturb_distances(dset, 1, s, np.random.default_rng(7))
        expected = np.array(
            [1.0003690460072447, 2.089623661252541, 2.917758643391335]
        )
        np.testing.assert_allclose(pd.d_tilde, expected, rtol=0, atol=0)

    def test_variance_monte_carlo(self):
        dset = DistanceSet(
            np.zeros(100_000, dtype=np.int64),
            np.ones(100_000, dtype=np.int64),
            np.full(100_000, 2.0),
        )
        s = NoiseSchedule(np.array([0.5]), 0.0)
        pd = perturb_distances(dset, 1, s, np.random.default_rng(3))
        assert abs(np.var(pd.d_tilde - pd.d) - 0.25) < 0.01

    def test_invalid_level(self):
        with pytest.raises(ValueError):
            perturb_distances(self._dset(), 3, build_schedule(2, 0.1, 1.0), np.random.default_rng(0))

    def test_literal_shift_mode(self):
        dset = self._dset()
        s = build_schedule(2, 0.3, 1.0, 0.0)
        pd = perturb_distances(dset, 2, s, np.random.default_rng(0), literal_shift=True)
        np.testing.assert_array_equal(pd.d_tilde, dset.d + 1.0)

    def test_clean_distances_retained(self):
        dset = self._dset()
        s = build_schedule(1, 5.0, 5.0)
        pd = perturb_distances(dset, 1, s, np.random.default_rng(1))
        np.testing.assert_array_equal(pd.d, dset.d)
        # large noise may push a perturbed distance negative; that is allowed
        assert pd.d_tilde.shape == dset.d.shape


class TestDsmTarget:
    def test_hand_value_one(self):
        assert dsm_target(2.0, 2.5, 0.5) == (2.0 - 2.5) / 0.5**2

    def test_zero_residual(self):
        assert dsm_target(2.0, 2.0, 0.5) == 0.0

    def test_hand_value_two(self):
        assert dsm_target(1.0, 0.9, 0.1) == (1.0 - 0.9) / 0.1**2

    def test_vectorized(self):
        out = dsm_target(np.array([1.0, 2.0]), np.array([1.5, 1.5]), 0.5)
        np.testing.assert_allclose(out, [-2.0, 2.0])

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            dsm_target(1.0, 1.0, 0.0)


class TestScorePairs:
    def test_zero_parameters_zero_output(self):
        params = make_params()
        for k in params:
            if k.startswith("score."):
                params[k] = np.zeros_like(params[k])
        rep = np.random.default_rng(0).standard_normal((4, TINY.embedding_dim))
        out = score_pairs(np.array([1.0, 2.0, -0.5, 8.0]), rep, TINY, params)
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_swap_symmetry_through_pair_rep(self):
        params = make_params(1)
        g = random_molecule(np.random.default_rng(2), 4, 4)
        dset = pairwise_distances(g)
        h = encode(g, TINY, params)
        rep = pair_representation(h, dset)
        swapped = pair_representation(h, DistanceSet(dset.j, dset.i, dset.d))
        a = score_pairs(dset.d, rep, TINY, params).data
        b = score_pairs(dset.d, swapped, TINY, params).data
        np.testing.assert_array_equal(a, b)

    def test_rigid_invariance_of_conditioning(self):
        params = make_params(1)
        rng = np.random.default_rng(3)
        g = random_molecule(rng, 4, 6)
        t = random_rotation(rng)
        moved = apply_rigid_transform(g, t)
        dset = pairwise_distances(g)
        d_tilde = dset.d + 0.1
        rep0 = pair_representation(encode(g, TINY, params), dset)
        rep1 = pair_representation(encode(moved, TINY, params), pairwise_distances(moved))
        a = score_pairs(d_tilde, rep0, TINY, params).data
        b = score_pairs(d_tilde, rep1, TINY, params).data
        np.testing.assert_allclose(a, b, atol=1e-10 * max(1.0, np.abs(a).max()))


class TestDdmLoss:
    def test_zero_score_zero_noise_gives_zero(self):
        params = make_params()
        for k in params:
            if k.startswith("score."):
                params[k] = np.zeros_like(params[k])
        pair = make_pair()
        schedule = build_schedule(3, 0.1, 1.0, 0.2)
        report = ddm_loss(
            pair, None, schedule, TINY, TINY_SCORE, params,
            np.random.default_rng(0), noise_override=0.0,
        )
        assert report.total == 0.0
        np.testing.assert_array_equal(report.per_level, np.zeros((2, 3)))

    def test_single_pair_hand_value(self):
        # one pair, one level, sigma 1, beta 0, zero score, forced shift 0.5
        params = make_params()
        for k in params:
            if k.startswith("score."):
                params[k] = np.zeros_like(params[k])
        g = MoleculeGeometry(np.array([1, 1]), np.array([[0.0, 0, 0], [2.0, 0, 0]]))
        pair = GeometryPair(g, g, 0.0)
        schedule = build_schedule(1, 1.0, 1.0, 0.0)
        report = ddm_loss(
            pair, None, schedule, TINY, TINY_SCORE, params,
            np.random.default_rng(0), noise_override=0.5,
        )
        assert report.direction_1 == pytest.approx(0.125, abs=1e-12)
        assert report.direction_2 == pytest.approx(0.125, abs=1e-12)
        assert report.total == pytest.approx(0.25, abs=1e-12)

    def test_report_consistency(self):
        params = make_params(2)
        pair = make_pair(3)
        schedule = build_schedule(4, 0.05, 2.0, 0.7)
        report = ddm_loss(pair, None, schedule, TINY, TINY_SCORE, params, np.random.default_rng(5))
        assert report.total == report.direction_1 + report.direction_2
        assert report.per_level.shape == (2, 4)
        assert np.all(report.per_level >= 0)
        assert report.direction_1 == pytest.approx(
            report.per_level[0].sum() / (2 * 4), rel=1e-12
        )

    def test_matches_straightline_evaluation(self):
        # 3-atom molecule, two levels, random parameters, shared draws
        rng = np.random.default_rng(6)
        g = random_molecule(rng, 3, 3)
        pair = perturb_coordinates(g, 0.3, rng)
        params = make_params(7)
        schedule = build_schedule(2, 0.1, 1.0, 0.3)
        noise = frozen_noise(pair, 2)
        graph = ddm_loss(
            pair, None, schedule, TINY, TINY_SCORE, params,
            np.random.default_rng(0), noise_override=noise,
        ).total
        plain = ddm_loss_plain(
            pair, None, schedule.sigmas, schedule.beta, TINY, params, noise
        )
        assert graph == plain

    def test_single_level_reduction_bitwise(self):
        pair = make_pair(8)
        params = make_params(9)
        schedule = build_schedule(1, 0.5, 0.5, 0.0)
        noise = frozen_noise(pair, 1)
        graph = ddm_loss(
            pair, None, schedule, TINY, TINY_SCORE, params,
            np.random.default_rng(0), noise_override=noise,
        ).total
        plain = single_level_dsm_plain(pair, None, 0.5, TINY, params, noise)
        assert graph == plain

    @pytest.mark.parametrize("which", ["g1", "g2"])
    def test_rigid_invariance(self, which):
        params = make_params(10)
        pair = make_pair(11)
        schedule = build_schedule(3, 0.05, 2.0, 0.2)
        rng = np.random.default_rng(12)
        t = random_rotation(rng)
        moved = GeometryPair(
            apply_rigid_transform(pair.g1, t) if which == "g1" else pair.g1,
            apply_rigid_transform(pair.g2, t) if which == "g2" else pair.g2,
            pair.coord_noise_sigma,
        )
        a = ddm_loss(pair, None, schedule, TINY, TINY_SCORE, params, np.random.default_rng(77)).total
        b = ddm_loss(moved, None, schedule, TINY, TINY_SCORE, params, np.random.default_rng(77)).total
        assert abs(a - b) / abs(a) < 1e-6

    def test_permutation_invariance(self):
        params = make_params(13)
        pair = make_pair(14, 5, 5)
        schedule = build_schedule(2, 0.1, 1.0, 0.2)
        rng = np.random.default_rng(15)
        perm = rng.permutation(pair.g1.n)
        permuted = GeometryPair(
            pair.g1.permute(perm), pair.g2.permute(perm), pair.coord_noise_sigma
        )

        base_noise = frozen_noise(pair, 2)
        old_pairs = pairwise_distances(pair.g1)
        old_index = {
            frozenset((i, j)): k for k, (i, j) in enumerate(zip(old_pairs.i, old_pairs.j))
        }
        new_pairs = pairwise_distances(permuted.g1)
        remap = np.array(
            [
                old_index[frozenset((perm[a], perm[b]))]
                for a, b in zip(new_pairs.i, new_pairs.j)
            ]
        )
        permuted_noise = lambda d, l: base_noise(d, l)[remap]

        a = ddm_loss(pair, None, schedule, TINY, TINY_SCORE, params,
                     np.random.default_rng(0), noise_override=base_noise).total
        b = ddm_loss(permuted, None, schedule, TINY, TINY_SCORE, params,
                     np.random.default_rng(0), noise_override=permuted_noise).total
        assert a == pytest.approx(b, rel=1e-12)

    def test_beta_reweighting_identity(self):
        params = make_params(16)
        pair = make_pair(17)
        noise = frozen_noise(pair, 3)
        base = ddm_loss(pair, None, build_schedule(3, 0.05, 2.0, 0.2), TINY, TINY_SCORE,
                        params, np.random.default_rng(0), noise_override=noise)
        bumped = ddm_loss(pair, None, build_schedule(3, 0.05, 2.0, 1.7), TINY, TINY_SCORE,
                          params, np.random.default_rng(0), noise_override=noise)
        sigmas = build_schedule(3, 0.05, 2.0, 0.2).sigmas
        expected = base.per_level * sigmas[None, :] ** 1.5
        np.testing.assert_allclose(bumped.per_level, expected, rtol=1e-12)

    def test_degenerate_single_atom(self):
        params = make_params()
        g = MoleculeGeometry(np.array([6]), np.zeros((1, 3)))
        pair = GeometryPair(g, g, 0.0)
        with pytest.raises(ValueError, match="degenerate"):
            ddm_loss(pair, None, build_schedule(1, 1.0, 1.0), TINY, TINY_SCORE,
                     params, np.random.default_rng(0))

    def test_same_seed_same_loss(self):
        params = make_params(18)
        pair = make_pair(19)
        schedule = build_schedule(3, 0.1, 1.0, 0.2)
        a = ddm_loss(pair, None, schedule, TINY, TINY_SCORE, params, np.random.default_rng(5)).total
        b = ddm_loss(pair, None, schedule, TINY, TINY_SCORE, params, np.random.default_rng(5)).total
        assert a == b

    def test_gradient_finite_difference(self):
        params = make_params(20)
        pair = make_pair(21, 4, 4)
        schedule = build_schedule(2, 0.5, 2.0, 0.2)
        noise = frozen_noise(pair, 2)
        names = list(params)

        def f(*leaves):
            table = dict(zip(names, leaves))
            return ddm_loss(pair, None, schedule, TINY, TINY_SCORE, table,
                            np.random.default_rng(0), noise_override=noise).loss

        leaves = [Tensor(params[k]) for k in names]
        err = finite_diff_check(f, leaves, epsilon=1e-3, max_entries_per_leaf=10)
        assert err < 1e-4

    def test_literal_shift_flag(self):
        params = make_params(22)
        pair = make_pair(23)
        schedule = build_schedule(2, 0.1, 1.0, 0.2)
        a = ddm_loss(pair, None, schedule, TINY, TINY_SCORE, params,
                     np.random.default_rng(0), literal_shift=True).total
        b = ddm_loss(pair, None, schedule, TINY, TINY_SCORE, params,
                     np.random.default_rng(0), literal_shift=True).total
        assert a == b  # deterministic: no randomness in the shift


class TestPretrainStep:
    def _state(self, lr_unused=None, seed=24):
        rng = np.random.default_rng(seed)
        params = init_encoder_params(TINY, rng)
        params.update(init_score_params(TINY_SCORE, TINY, rng))
        return TrainState(
            params=params,
            adam=init_adam(params),
            rng=rng,
            schedule=build_schedule(3, 0.1, 1.0, 0.2),
            enc_cfg=TINY,
            score_cfg=TINY_SCORE,
            coord_sigma=0.3,
            mask_ratio=0.0,
        )

    def test_zero_lr_keeps_parameters(self):
        state = self._state()
        before = {k: v.copy() for k, v in state.params.items()}
        report = pretrain_step([random_molecule(np.random.default_rng(0), 4, 5)], state, lr=0.0)
        assert report.loss > 0
        for k in before:
            np.testing.assert_array_equal(state.params[k], before[k])

    def test_deterministic_trajectories(self):
        def run():
            state = self._state()
            mols = [random_molecule(np.random.default_rng(1), 4, 6) for _ in range(3)]
            return [pretrain_step(mols, state, lr=1e-3).loss for _ in range(4)]

        assert run() == run()

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            pretrain_step([], self._state(), lr=1e-3)

    def test_mask_ratio_applied(self):
        state = self._state()
        state.mask_ratio = 0.3
        mol = random_molecule(np.random.default_rng(2), 6, 8)
        report = pretrain_step([mol], state, lr=1e-3)
        assert math.isfinite(report.loss)


class TestCoordinateScoreOracle:
    def test_sum_of_squared_distances(self):
        coords = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        head = lambda d: ad.sum_(ad.square(d))
        tape, decomposed = coordinate_score_oracle(coords, head)
        np.testing.assert_allclose(tape, [[-4.0, 0, 0], [4.0, 0, 0]], atol=1e-12)
        np.testing.assert_allclose(decomposed, tape, atol=1e-12)

    def test_constant_head_zero(self):
        coords = np.random.default_rng(0).normal(size=(4, 3))
        head = lambda d: ad.mul(ad.sum_(d), 0.0)
        tape, decomposed = coordinate_score_oracle(coords, head)
        np.testing.assert_array_equal(tape, np.zeros((4, 3)))
        np.testing.assert_array_equal(decomposed, np.zeros((4, 3)))

    @pytest.mark.parametrize("seed", range(6))
    def test_random_head_agreement(self, seed):
        rng = np.random.default_rng(seed)
        g = random_molecule(rng, 4, 4)
        w1 = rng.standard_normal((1, 5))
        w2 = rng.standard_normal((5, 1))

        def head(d):
            x = ad.reshape(d, (-1, 1))
            return ad.sum_(ad.matmul(ad.shifted_softplus(ad.matmul(x, w1)), w2))

        tape, decomposed = coordinate_score_oracle(g.coords, head)
        scale = max(np.max(np.abs(tape)), 1e-12)
        assert np.max(np.abs(tape - decomposed)) / scale < 1e-8

    def test_cross_check_with_finite_differences(self):
        rng = np.random.default_rng(42)
        g = random_molecule(rng, 4, 4)
        w1 = rng.standard_normal((1, 5))
        w2 = rng.standard_normal((5, 1))

        def head(d):
            x = ad.reshape(d, (-1, 1))
            return ad.sum_(ad.matmul(ad.shifted_softplus(ad.matmul(x, w1)), w2))

        def value(coords):
            i, j = np.triu_indices(coords.shape[0], k=1)
            d = np.sqrt(np.sum((coords[i] - coords[j]) ** 2, axis=1))
            return head(Tensor(d)).item()

        tape, _ = coordinate_score_oracle(g.coords, head)
        eps = 1e-6
        numeric = np.zeros_like(g.coords)
        work = g.coords.copy()
        for r in range(work.shape[0]):
            for c in range(3):
                orig = work[r, c]
                work[r, c] = orig + eps
                up = value(work)
                work[r, c] = orig - eps
                down = value(work)
                work[r, c] = orig
                numeric[r, c] = (up - down) / (2 * eps)
        np.testing.assert_allclose(tape, numeric, atol=1e-6)

    def test_coincident_atoms_rejected(self):
        coords = np.zeros((2, 3))
        with pytest.raises(ValueError, match="coincident"):
            coordinate_score_oracle(coords, lambda d: ad.sum_(d))


class TestDdmAlignment:
    def test_bounded_and_deterministic(self):
        params = make_params(30)
        pair = make_pair(31)
        schedule = build_schedule(3, 0.1, 1.0, 0.2)
        a = ddm_alignment(pair, None, schedule, TINY, TINY_SCORE, params, np.random.default_rng(1))
        b = ddm_alignment(pair, None, schedule, TINY, TINY_SCORE, params, np.random.default_rng(1))
        assert -1.0 <= a <= 1.0
        assert a == b
