"""Multi-level denoising of pairwise atomic distances.

The pretraining objective perturbs a molecule's pair distances with
Gaussian noise at a ladder of scales and trains an invariant score network
to predict the closed-form regression target (d - d_tilde) / sigma^2. Two
mirrored directions are trained jointly: denoise view 1's distances
conditioned on view 2's embeddings, and vice versa, with both directions
sharing every parameter. Per-level terms are weighted by sigma^beta and
the network output is scaled by 1 / sigma inside the loss.

Also provides the gradient-decomposition oracle that cross-checks the
identity between the coordinate gradient of any distance-based scalar and
its per-distance assembly sum_j (1/d_ij) * (df/dd_ij) * (r_i - r_j).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step, collect_grads, wrap_params
from .encoder import (
    EncoderConfig,
    encode,
    pair_representation,
    rbf_expand,
)
from .geometry import (
    AtomMask,
    DistanceSet,
    GeometryPair,
    MoleculeGeometry,
    pairwise_distances,
    perturb_coordinates,
    sample_atom_mask,
)

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "PerturbedDistances",
    "perturb_distances",
    "dsm_target",
    "ScoreNetConfig",
    "init_score_params",
    "score_pairs",
    "DdmLossReport",
    "ddm_loss",
    "TrainState",
    "pretrain_step",
    "coordinate_score_oracle",
    "ddm_alignment",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric ladder of noise scales with per-level weight sigma^beta."""

    sigmas: np.ndarray
    beta: float

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        object.__setattr__(self, "sigmas", s)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("schedule needs at least one level")
        if np.any(s <= 0):
            raise ValueError("noise levels must be positive")
        if s.size > 1 and np.any(np.diff(s) <= 0):
            raise ValueError("noise levels must be strictly increasing")
        if not np.all(np.isfinite(s.astype(float) ** self.beta)):
            raise ValueError("per-level weights sigma^beta must be finite")

    @property
    def levels(self) -> int:
        return self.sigmas.size

    def sigma(self, level: int) -> float:
        if not 1 <= level <= self.levels:
            raise ValueError(f"level {level} outside 1..{self.levels}")
        return float(self.sigmas[level - 1])

    def weight(self, level: int) -> float:
        return self.sigma(level) ** self.beta


def build_schedule(
    levels: int,
    sigma_min: float = 0.01,
    sigma_max: float = 10.0,
    beta: float = 0.2,
) -> NoiseSchedule:
    """Geometric sequence from sigma_min to sigma_max with exact endpoints."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if not 0 < sigma_min <= sigma_max:
        raise ValueError("need 0 < sigma_min <= sigma_max")
    if levels == 1:
        if sigma_min != sigma_max:
            raise ValueError("a single-level ladder needs sigma_min == sigma_max")
        return NoiseSchedule(np.array([sigma_min]), beta)
    sigmas = np.exp(np.linspace(math.log(sigma_min), math.log(sigma_max), levels))
    sigmas[0] = sigma_min
    sigmas[-1] = sigma_max
    return NoiseSchedule(sigmas, beta)


@dataclass(frozen=True, eq=False)
class PerturbedDistances:
    """Clean and perturbed distances for one noise level (1-based)."""

    i: np.ndarray
    j: np.ndarray
    d: np.ndarray
    d_tilde: np.ndarray
    level: int


def perturb_distances(
    dset: DistanceSet,
    level: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    literal_shift: bool = False,
    noise: np.ndarray | float | None = None,
) -> PerturbedDistances:
    """Gaussian perturbation d_tilde = d + sigma_l * eps with eps ~ N(0, 1).

    `noise` replaces the sampled eps (scalar or per-pair array) so tests
    and gradient checks can replay a fixed draw. `literal_shift` instead
    adds the constant sigma_l to every distance, a debug mode for
    comparing against the deterministic-shift reading of the update rule.
    """
    sigma = schedule.sigma(level)
    count = len(dset)
    if literal_shift:
        d_tilde = dset.d + sigma
    else:
        if noise is None:
            eps = rng.standard_normal(count)
        else:
            eps = np.broadcast_to(np.asarray(noise, dtype=np.float64), (count,))
        d_tilde = dset.d + sigma * eps
    return PerturbedDistances(dset.i, dset.j, dset.d.copy(), d_tilde, level)


def dsm_target(d, d_tilde, sigma_l: float) -> np.ndarray:
    """Closed-form denoising target (d - d_tilde) / sigma^2."""
    if sigma_l <= 0:
        raise ValueError("sigma must be positive")
    return (np.asarray(d, dtype=np.float64) - np.asarray(d_tilde, dtype=np.float64)) / (
        sigma_l * sigma_l
    )


@dataclass(frozen=True)
class ScoreNetConfig:
    """Widths of the two MLP stages mapping (distance, pair vector) to a scalar."""

    dist_hidden: int = 64
    fusion_hidden: int = 64

    def __post_init__(self):
        if self.dist_hidden < 1 or self.fusion_hidden < 1:
            raise ValueError("score network widths must be positive")


def init_score_params(
    score_cfg: ScoreNetConfig, enc_cfg: EncoderConfig, rng: np.random.Generator
):
    r, d = enc_cfg.rbf_count, enc_cfg.embedding_dim
    dh, fh = score_cfg.dist_hidden, score_cfg.fusion_hidden
    p: dict[str, np.ndarray] = {}
    p["score.dist.w1"] = ad.glorot_uniform(rng, r, dh)
    p["score.dist.b1"] = np.zeros(dh)
    p["score.dist.w2"] = ad.glorot_uniform(rng, dh, dh)
    p["score.dist.b2"] = np.zeros(dh)
    p["score.fuse.w1"] = ad.glorot_uniform(rng, dh + d, fh)
    p["score.fuse.b1"] = np.zeros(fh)
    p["score.fuse.w2"] = ad.glorot_uniform(rng, fh, 1)
    p["score.fuse.b2"] = np.zeros(1)
    return p


def score_pairs(
    d_tilde: np.ndarray,
    pair_rep: Tensor | np.ndarray,
    enc_cfg: EncoderConfig,
    params: Mapping[str, np.ndarray | Tensor],
) -> Tensor:
    """One scalar per pair from the perturbed distance and the pair vector.

    The distance branch sees the radial-basis expansion of d_tilde; its
    output is concatenated with the conditioning pair vector and fused
    down to a scalar. Symmetric under i <-> j and rigid motions because
    both inputs are.
    """
    feats = rbf_expand(np.asarray(d_tilde, dtype=np.float64), enc_cfg)
    x = ad.add(
        ad.matmul(
            ad.shifted_softplus(
                ad.add(ad.matmul(feats, params["score.dist.w1"]), params["score.dist.b1"])
            ),
            params["score.dist.w2"],
        ),
        params["score.dist.b2"],
    )
    fused = ad.concat([x, pair_rep], axis=1)
    s = ad.add(
        ad.matmul(
            ad.shifted_softplus(
                ad.add(ad.matmul(fused, params["score.fuse.w1"]), params["score.fuse.b1"])
            ),
            params["score.fuse.w2"],
        ),
        params["score.fuse.b2"],
    )
    return ad.reshape(s, (-1,))


@dataclass
class DdmLossReport:
    """Loss value plus its per-direction and per-level decomposition."""

    loss: Tensor
    total: float
    direction_1: float
    direction_2: float
    per_level: np.ndarray  # shape (2, L), weighted terms before the 1/(2L) factor


NoiseOverride = float | np.ndarray | Callable[[int, int], "float | np.ndarray"] | None


def _resolve_noise(noise_override: NoiseOverride, direction: int, level: int):
    if callable(noise_override):
        return noise_override(direction, level)
    return noise_override


def ddm_loss(
    pair: GeometryPair,
    mask: AtomMask | None,
    schedule: NoiseSchedule,
    enc_cfg: EncoderConfig,
    score_cfg: ScoreNetConfig,
    params: Mapping[str, np.ndarray | Tensor],
    rng: np.random.Generator,
    literal_shift: bool = False,
    noise_override: NoiseOverride = None,
    condition_rng: np.random.Generator | None = None,
    condition_sigma: float = 0.0,
) -> DdmLossReport:
    """Symmetric two-direction denoising objective over all noise levels.

    For each direction (perturb view a's distances, condition on view b's
    embeddings) and each level l, builds
    sigma_l^beta * mean_pairs (s / sigma_l - (d - d_tilde) / sigma_l^2)^2
    and averages the levels with a 1/(2L) prefactor per direction. Noise
    is drawn per direction (1 then 2), per level in ascending order, one
    value per pair. `noise_override` may be a constant, a per-pair array,
    or a callable(direction, level).

    With `condition_sigma` > 0 the conditioning view is re-perturbed with
    fresh coordinate noise before encoding (optional variant; default off).
    """
    if mask is not None:
        view1 = pair.g1.subset(mask.kept_indices)
        view2 = pair.g2.subset(mask.kept_indices)
    else:
        view1, view2 = pair.g1, pair.g2
    if view1.n < 2:
        raise ValueError("degenerate input: fewer than 2 kept atoms")
    d1 = pairwise_distances(view1, enc_cfg.cutoff)
    d2 = pairwise_distances(view2, enc_cfg.cutoff)
    if len(d1) == 0 or len(d2) == 0:
        raise ValueError("degenerate input: no pairs within cutoff")

    def conditioning(view: MoleculeGeometry) -> Tensor:
        if condition_sigma > 0.0:
            gen = condition_rng if condition_rng is not None else rng
            view = perturb_coordinates(view, condition_sigma, gen).g2
        return encode(view, enc_cfg, params)

    h2 = conditioning(view2)
    h1 = conditioning(view1)

    level_terms: list[list[Tensor]] = [[], []]
    for direction, (dset, h_cond) in enumerate(((d1, h2), (d2, h1)), start=1):
        rep = pair_representation(h_cond, dset)
        for level in range(1, schedule.levels + 1):
            sigma = schedule.sigma(level)
            pd = perturb_distances(
                dset,
                level,
                schedule,
                rng,
                literal_shift=literal_shift,
                noise=_resolve_noise(noise_override, direction, level),
            )
            s = score_pairs(pd.d_tilde, rep, enc_cfg, params)
            target = dsm_target(pd.d, pd.d_tilde, sigma)
            residual = ad.sub(ad.div(s, sigma), target)
            term = ad.mul(ad.mean_(ad.square(residual)), schedule.weight(level))
            level_terms[direction - 1].append(term)

    def direction_total(terms: list[Tensor]) -> Tensor:
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return ad.div(acc, 2.0 * schedule.levels)

    dir1 = direction_total(level_terms[0])
    dir2 = direction_total(level_terms[1])
    loss = ad.add(dir1, dir2)
    per_level = np.array(
        [[float(t.data) for t in terms] for terms in level_terms]
    )
    return DdmLossReport(
        loss=loss,
        total=float(loss.data),
        direction_1=float(dir1.data),
        direction_2=float(dir2.data),
        per_level=per_level,
    )


@dataclass
class TrainState:
    """Single-writer bundle of everything one pretraining run mutates."""

    params: dict[str, np.ndarray]
    adam: AdamState
    rng: np.random.Generator
    schedule: NoiseSchedule
    enc_cfg: EncoderConfig
    score_cfg: ScoreNetConfig
    coord_sigma: float = 0.3
    mask_ratio: float = 0.0
    literal_shift: bool = False
    condition_sigma: float = 0.0
    step: int = 0


@dataclass
class StepReport:
    loss: float
    per_level: np.ndarray  # direction-averaged, shape (L,)


def pretrain_step(
    batch: list[MoleculeGeometry], state: TrainState, lr: float
) -> StepReport:
    """One optimizer step of the denoising objective on a molecule batch.

    Per molecule: draw the noisy second view, draw the shared atom mask,
    evaluate the loss; losses are averaged over the batch and a single
    Adam update is applied to all parameters.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    leaves = wrap_params(state.params)
    total: Tensor | None = None
    per_level = np.zeros(state.schedule.levels)
    for g in batch:
        pair = perturb_coordinates(g, state.coord_sigma, state.rng)
        mask = (
            sample_atom_mask(g.n, state.mask_ratio, state.rng)
            if state.mask_ratio > 0.0
            else None
        )
        report = ddm_loss(
            pair,
            mask,
            state.schedule,
            state.enc_cfg,
            state.score_cfg,
            leaves,
            state.rng,
            literal_shift=state.literal_shift,
            condition_sigma=state.condition_sigma,
        )
        total = report.loss if total is None else ad.add(total, report.loss)
        per_level += report.per_level.mean(axis=0)
    loss = ad.div(total, float(len(batch)))
    ad.backward(loss)
    adam_step(state.adam, state.params, collect_grads(leaves), lr)
    state.step += 1
    return StepReport(loss=float(loss.data), per_level=per_level / len(batch))


def coordinate_score_oracle(
    coords: np.ndarray,
    scalar_head: Callable[[Tensor], Tensor],
) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate gradient of a distance-based scalar, computed two ways.

    (a) Differentiates through the full chain with coordinates as leaves.
    (b) Differentiates the scalar with respect to the distances alone and
    reassembles per-atom vectors as sum_j (1/d_ij) * s_ij * (r_i - r_j).
    The two results must agree to high relative accuracy; they are
    returned as (tape_gradient, decomposed_gradient), each of shape (n, 3).

    `scalar_head` maps the length-P tensor of pair distances (complete
    graph, ordered by (i, j)) to a scalar. Coincident atoms are rejected
    since 1/d is singular there.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    i_idx, j_idx = np.triu_indices(n, k=1)
    d_np = np.sqrt(np.sum((coords[i_idx] - coords[j_idx]) ** 2, axis=1))
    if np.any(d_np < 1e-12):
        raise ValueError("coincident atoms: distance decomposition is singular")

    # (a) full chain through the distance computation
    leaf = Tensor(coords)
    ri = ad.gather(leaf, i_idx)
    rj = ad.gather(leaf, j_idx)
    diff = ad.sub(ri, rj)
    dist = ad.sqrt_(ad.sum_(ad.square(diff), axis=1))
    out = scalar_head(dist)
    ad.backward(out)
    tape_grad = leaf.grad.copy()

    # (b) per-distance gradients reassembled against the unit bond vectors
    d_leaf = Tensor(d_np)
    out2 = scalar_head(d_leaf)
    ad.backward(out2)
    s_ij = d_leaf.grad
    contrib = (s_ij / d_np)[:, None] * (coords[i_idx] - coords[j_idx])
    decomposed = np.zeros_like(coords)
    np.add.at(decomposed, i_idx, contrib)
    np.add.at(decomposed, j_idx, -contrib)
    return tape_grad, decomposed


def ddm_alignment(
    pair: GeometryPair,
    mask: AtomMask | None,
    schedule: NoiseSchedule,
    enc_cfg: EncoderConfig,
    score_cfg: ScoreNetConfig,
    params: Mapping[str, np.ndarray],
    rng: np.random.Generator,
) -> float:
    """Cosine between stacked scaled predictions and denoising targets.

    Concatenates s / sigma_l and (d - d_tilde) / sigma_l^2 over every
    direction, level, and pair into two long vectors, then returns their
    cosine similarity. Near 1.0 means the trained network reproduces the
    closed-form targets on this molecule.
    """
    if mask is not None:
        view1 = pair.g1.subset(mask.kept_indices)
        view2 = pair.g2.subset(mask.kept_indices)
    else:
        view1, view2 = pair.g1, pair.g2
    d1 = pairwise_distances(view1, enc_cfg.cutoff)
    d2 = pairwise_distances(view2, enc_cfg.cutoff)
    h2 = encode(view2, enc_cfg, params)
    h1 = encode(view1, enc_cfg, params)
    preds: list[np.ndarray] = []
    targets: list[np.ndarray] = []
    for dset, h_cond in ((d1, h2), (d2, h1)):
        rep = pair_representation(h_cond, dset)
        for level in range(1, schedule.levels + 1):
            sigma = schedule.sigma(level)
            pd = perturb_distances(dset, level, schedule, rng)
            s = score_pairs(pd.d_tilde, rep, enc_cfg, params)
            preds.append(s.data / sigma)
            targets.append(dsm_target(pd.d, pd.d_tilde, sigma))
    p = np.concatenate(preds)
    t = np.concatenate(targets)
    denom = np.linalg.norm(p) * np.linalg.norm(t)
    if denom == 0.0:
        return 0.0
    return float(np.dot(p, t) / denom)
