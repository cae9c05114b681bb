"""Built-in invariant and oracle suite behind the `check` CLI command.

Each check is deterministic (fixed seeds), fast, and self-contained; the
suite returns one (name, passed, detail) result per property so the CLI
can print a pass/fail line for each. The heavyweight variants of the same
properties live in the test suite; this module keeps run times in seconds
so `check` is usable as a smoke test on any install.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import reference
from .autodiff import Tensor, finite_diff_check
from .baselines import (
    loss_ebm_nce,
    loss_infonce_from_reps,
    loss_type_pred,
)
from .config import TrainingConfig
from .denoise import (
    ScoreNetConfig,
    build_schedule,
    ddm_loss,
    coordinate_score_oracle,
    dsm_target,
    init_score_params,
)
from .elements import NUM_ELEMENTS
from .encoder import EncoderConfig, encode, init_encoder_params
from .geometry import (
    MoleculeGeometry,
    apply_rigid_transform,
    pairwise_distances,
    perturb_coordinates,
    random_rotation,
)
from .harness import run_pretrain
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = ["random_molecule", "run_all_checks", "CHECKS"]


def random_molecule(
    rng: np.random.Generator, n_min: int = 3, n_max: int = 9
) -> MoleculeGeometry:
    """Random small molecule with well-separated atoms."""
    n = int(rng.integers(n_min, n_max + 1))
    types = rng.choice([1, 6, 7, 8], size=n)
    while True:
        coords = rng.uniform(-2.0, 2.0, size=(n, 3))
        d = pairwise_distances(MoleculeGeometry(types, coords)).d
        if d.size == 0 or d.min() > 0.5:
            return MoleculeGeometry(types, coords)


def _tiny_setup(seed: int = 0):
    rng = np.random.default_rng(seed)
    enc_cfg = EncoderConfig(embedding_dim=8, num_layers=2, rbf_count=8)
    score_cfg = ScoreNetConfig(dist_hidden=8, fusion_hidden=8)
    params = init_encoder_params(enc_cfg, rng)
    params.update(init_score_params(score_cfg, enc_cfg, rng))
    return rng, enc_cfg, score_cfg, params


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-30)


def check_distance_isometry() -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        g = random_molecule(rng)
        t = random_rotation(rng)
        d0 = pairwise_distances(g).d
        d1 = pairwise_distances(apply_rigid_transform(g, t)).d
        worst = max(worst, float(np.max(np.abs(d0 - d1))))
    return worst < 1e-10, f"max distance drift {worst:.2e}"


def check_encoder_invariance() -> tuple[bool, str]:
    rng, enc_cfg, _, params = _tiny_setup(1)
    worst = 0.0
    for _ in range(10):
        g = random_molecule(rng)
        t = random_rotation(rng)
        h0 = encode(g, enc_cfg, params).data
        h1 = encode(apply_rigid_transform(g, t), enc_cfg, params).data
        worst = max(worst, float(np.max(np.abs(h0 - h1)) / np.max(np.abs(h0))))
    return worst < 1e-10, f"max embedding drift {worst:.2e}"


def check_ddm_invariance() -> tuple[bool, str]:
    rng, enc_cfg, score_cfg, params = _tiny_setup(2)
    schedule = build_schedule(4, 0.01, 10.0, 0.2)
    worst = 0.0
    for k in range(5):
        g = random_molecule(rng)
        pair = perturb_coordinates(g, 0.3, rng)
        t = random_rotation(rng)
        moved = replace(pair, g2=apply_rigid_transform(pair.g2, t))
        a = ddm_loss(pair, None, schedule, enc_cfg, score_cfg, params,
                     np.random.default_rng(100 + k)).total
        b = ddm_loss(moved, None, schedule, enc_cfg, score_cfg, params,
                     np.random.default_rng(100 + k)).total
        worst = max(worst, _rel(a, b))
    return worst < 1e-6, f"max relative loss drift {worst:.2e}"


def check_score_decomposition() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    w1 = rng.standard_normal((1, 7))
    w2 = rng.standard_normal((7, 1))

    def head(d: Tensor) -> Tensor:
        x = ad.reshape(d, (-1, 1))
        return ad.sum_(ad.matmul(ad.shifted_softplus(ad.matmul(x, w1)), w2))

    worst = 0.0
    for _ in range(20):
        g = random_molecule(rng, 4, 6)
        tape, decomposed = coordinate_score_oracle(g.coords, head)
        scale = max(float(np.max(np.abs(tape))), 1e-12)
        worst = max(worst, float(np.max(np.abs(tape - decomposed)) / scale))
    return worst < 1e-8, f"max relative disagreement {worst:.2e}"


def check_gradients() -> tuple[bool, str]:
    # epsilon 1e-3 balances truncation against roundoff at this loss scale
    rng, enc_cfg, score_cfg, params = _tiny_setup(4)
    g = random_molecule(rng, 4, 5)
    pair = perturb_coordinates(g, 0.3, rng)
    schedule = build_schedule(2, 0.5, 2.0, 0.2)
    pair_count = g.n * (g.n - 1) // 2
    frozen = {
        (direction, level): rng.standard_normal(pair_count)
        for direction in (1, 2)
        for level in (1, 2)
    }

    names = list(params)

    def loss_fn(*leaf_list):
        table = dict(zip(names, leaf_list))
        return ddm_loss(
            pair, None, schedule, enc_cfg, score_cfg, table,
            np.random.default_rng(0),
            noise_override=lambda d, l: frozen[(d, l)],
        ).loss

    leaves = [Tensor(params[k]) for k in names]
    err = finite_diff_check(loss_fn, leaves, epsilon=1e-3, max_entries_per_leaf=20)
    return err < 1e-4, f"max relative gradient error {err:.2e}"


def check_schedule_anchors() -> tuple[bool, str]:
    for levels in (30, 50):
        s = build_schedule(levels, 0.01, 10.0, 0.2)
        if s.sigmas[0] != 0.01 or s.sigmas[-1] != 10.0:
            return False, f"endpoints off for L={levels}"
    mid = build_schedule(3, 0.01, 10.0, 0.2).sigmas[1]
    if abs(mid - math.sqrt(0.1)) > 1e-12:
        return False, f"geometric midpoint off: {mid}"
    return True, "endpoints exact for L in {30, 50}"


def check_beta_reweighting() -> tuple[bool, str]:
    rng, enc_cfg, score_cfg, params = _tiny_setup(5)
    g = random_molecule(rng, 4, 5)
    pair = perturb_coordinates(g, 0.3, rng)
    pair_count = pair.g1.n * (pair.g1.n - 1) // 2
    noise = {
        (d, l): rng.standard_normal(pair_count) for d in (1, 2) for l in (1, 2, 3)
    }
    kwargs = dict(noise_override=lambda d, l: noise[(d, l)])
    base = ddm_loss(pair, None, build_schedule(3, 0.01, 10.0, 0.2),
                    enc_cfg, score_cfg, params, np.random.default_rng(0), **kwargs)
    bumped = ddm_loss(pair, None, build_schedule(3, 0.01, 10.0, 1.4),
                      enc_cfg, score_cfg, params, np.random.default_rng(0), **kwargs)
    sigmas = build_schedule(3, 0.01, 10.0, 0.2).sigmas
    expected = base.per_level * sigmas[None, :] ** 1.2
    worst = float(np.max(np.abs(bumped.per_level - expected) / np.abs(expected)))
    return worst < 1e-12, f"max relative reweighting error {worst:.2e}"


def check_dsm_closed_form() -> tuple[bool, str]:
    ok = (
        dsm_target(2.0, 2.5, 0.5) == (2.0 - 2.5) / 0.5**2
        and dsm_target(1.0, 1.0, 0.3) == 0.0
        and dsm_target(1.0, 0.9, 0.1) == (1.0 - 0.9) / 0.1**2
    )
    return ok, "hand values reproduced exactly"


def check_analytic_anchors() -> tuple[bool, str]:
    rng = np.random.default_rng(6)
    z = rng.standard_normal(5)
    same = ad.concat([ad.reshape(Tensor(z), (1, -1))] * 4, axis=0)
    infonce = float(loss_infonce_from_reps(same, same, 0.1).data)
    if abs(infonce - math.log(4)) > 1e-10:
        return False, f"contrastive anchor off: {infonce}"

    _, enc_cfg, _, params = _tiny_setup(7)
    g = random_molecule(np.random.default_rng(7), 4, 5)
    pair = perturb_coordinates(g, 0.3, np.random.default_rng(8))
    pairs = [pair, perturb_coordinates(g, 0.3, np.random.default_rng(9))]
    zero_critic = lambda x: ad.mul(ad.sum_(x, axis=1), 0.0)
    ebm = float(
        loss_ebm_nce(pairs, enc_cfg, params, zero_critic,
                     np.random.default_rng(0)).data
    )
    if abs(ebm - 2 * math.log(2)) > 1e-10:
        return False, f"discrimination anchor off: {ebm}"

    zero_head = lambda x: ad.mul(
        ad.matmul(x, np.zeros((x.data.shape[1], NUM_ELEMENTS))), 1.0
    )
    tp = float(
        loss_type_pred(g, enc_cfg, params, zero_head, 0.5,
                       np.random.default_rng(1)).data
    )
    if abs(tp - math.log(NUM_ELEMENTS)) > 1e-10:
        return False, f"classification anchor off: {tp}"
    return True, "ln B, 2 ln 2, and ln C anchors hit"


def check_straightline_match() -> tuple[bool, str]:
    rng, enc_cfg, score_cfg, params = _tiny_setup(8)
    g = random_molecule(rng, 4, 6)
    pair = perturb_coordinates(g, 0.3, rng)
    pair_count = pair.g1.n * (pair.g1.n - 1) // 2
    noise = {(d, l): rng.standard_normal(pair_count) for d in (1, 2) for l in (1, 2)}
    schedule = build_schedule(2, 0.1, 1.0, 0.7)
    graph_value = ddm_loss(
        pair, None, schedule, enc_cfg, score_cfg, params,
        np.random.default_rng(0), noise_override=lambda d, l: noise[(d, l)],
    ).total
    plain_value = reference.ddm_loss_plain(
        pair, None, schedule.sigmas, schedule.beta, enc_cfg, params,
        lambda d, l: noise[(d, l)],
    )
    ok = graph_value == plain_value
    return ok, f"graph {graph_value!r} vs straight-line {plain_value!r}"


def check_single_level_reduction() -> tuple[bool, str]:
    rng, enc_cfg, score_cfg, params = _tiny_setup(9)
    g = random_molecule(rng, 4, 6)
    pair = perturb_coordinates(g, 0.3, rng)
    pair_count = pair.g1.n * (pair.g1.n - 1) // 2
    noise = {(1, 1): rng.standard_normal(pair_count), (2, 1): rng.standard_normal(pair_count)}
    schedule = build_schedule(1, 0.5, 0.5, 0.0)
    graph_value = ddm_loss(
        pair, None, schedule, enc_cfg, score_cfg, params,
        np.random.default_rng(0), noise_override=lambda d, l: noise[(d, l)],
    ).total
    plain_value = reference.single_level_dsm_plain(
        pair, None, 0.5, enc_cfg, params, lambda d, l: noise[(d, l)]
    )
    return graph_value == plain_value, f"graph {graph_value!r} vs one-level {plain_value!r}"


def check_run_determinism() -> tuple[bool, str]:
    import tempfile
    from pathlib import Path

    config = TrainingConfig(
        objective="ddm", seed=3, epochs=2, batch_size=2, num_levels=3,
        embedding_dim=8, num_layers=1, rbf_count=8,
    )
    rng = np.random.default_rng(0)
    dataset = [random_molecule(rng, 4, 6) for _ in range(4)]
    with tempfile.TemporaryDirectory() as tmp:
        p1, p2 = Path(tmp, "a.ckpt"), Path(tmp, "b.ckpt")
        save_checkpoint(run_pretrain(config, dataset=dataset).checkpoint, p1)
        save_checkpoint(run_pretrain(config, dataset=dataset).checkpoint, p2)
        same = p1.read_bytes() == p2.read_bytes()
        roundtrip = load_checkpoint(p1)
        save_checkpoint(roundtrip, p2)
        stable = p1.read_bytes() == p2.read_bytes()
    return same and stable, "repeat runs and reload both byte-identical"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("distance-isometry", check_distance_isometry),
    ("encoder-rigid-invariance", check_encoder_invariance),
    ("objective-rigid-invariance", check_ddm_invariance),
    ("coordinate-score-decomposition", check_score_decomposition),
    ("gradient-finite-difference", check_gradients),
    ("noise-ladder-anchors", check_schedule_anchors),
    ("level-reweighting-identity", check_beta_reweighting),
    ("denoising-target-closed-form", check_dsm_closed_form),
    ("analytic-loss-anchors", check_analytic_anchors),
    ("straight-line-evaluation-match", check_straightline_match),
    ("single-level-reduction", check_single_level_reduction),
    ("run-determinism", check_run_determinism),
]


def run_all_checks(verbose_print=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        verbose_print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return all_ok
