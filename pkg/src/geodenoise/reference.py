"""Straight-line numpy evaluation of the forward pipeline.

Everything here recomputes the encoder, the score network, and the
denoising objective directly on arrays, with no differentiation graph
involved. It exists purely as a cross-check: given the same parameters
and the same noise draws, these functions must reproduce the graph-built
values bit for bit. Keep this module free of any import from the
autodiff machinery.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from .encoder import EncoderConfig
from .geometry import AtomMask, DistanceSet, GeometryPair, pairwise_distances

__all__ = [
    "encode_plain",
    "pair_representation_plain",
    "score_plain",
    "ddm_loss_plain",
    "single_level_dsm_plain",
]

_LN2 = math.log(2.0)


def _ssp(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x) - _LN2


def _rbf(d: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    centers = np.linspace(0.0, cfg.rbf_dmax, cfg.rbf_count)
    delta = d[:, None] - centers[None, :]
    return np.exp(-cfg.rbf_gamma * delta * delta)


def encode_plain(
    atom_types: np.ndarray,
    dset: DistanceSet,
    cfg: EncoderConfig,
    params: Mapping[str, np.ndarray],
    type_override: np.ndarray | None = None,
) -> np.ndarray:
    rows = atom_types if type_override is None else np.asarray(type_override)
    n = atom_types.size
    z = params["encoder.embedding"][rows]
    if len(dset) > 0:
        src = np.concatenate([dset.j, dset.i])
        dst = np.concatenate([dset.i, dset.j])
        feats = _rbf(np.concatenate([dset.d, dset.d]), cfg)
        for layer in range(cfg.num_layers):
            pre = f"encoder.layer{layer}"
            w = (
                np.matmul(
                    _ssp(np.matmul(feats, params[f"{pre}.filter.w1"]) + params[f"{pre}.filter.b1"]),
                    params[f"{pre}.filter.w2"],
                )
                + params[f"{pre}.filter.b2"]
            )
            messages = z[src] * w
            agg = np.zeros((n, z.shape[1]), dtype=np.float64)
            np.add.at(agg, dst, messages)
            update = np.matmul(
                _ssp(np.matmul(agg, params[f"{pre}.update.w1"])),
                params[f"{pre}.update.w2"],
            )
            z = z + update
    h = (
        np.matmul(
            _ssp(np.matmul(z, params["encoder.out.w1"]) + params["encoder.out.b1"]),
            params["encoder.out.w2"],
        )
        + params["encoder.out.b2"]
    )
    return h


def pair_representation_plain(h: np.ndarray, dset: DistanceSet) -> np.ndarray:
    return h[dset.i] + h[dset.j]


def score_plain(
    d_tilde: np.ndarray,
    pair_rep: np.ndarray,
    cfg: EncoderConfig,
    params: Mapping[str, np.ndarray],
) -> np.ndarray:
    feats = _rbf(np.asarray(d_tilde, dtype=np.float64), cfg)
    x = (
        np.matmul(
            _ssp(np.matmul(feats, params["score.dist.w1"]) + params["score.dist.b1"]),
            params["score.dist.w2"],
        )
        + params["score.dist.b2"]
    )
    fused = np.concatenate([x, pair_rep], axis=1)
    s = (
        np.matmul(
            _ssp(np.matmul(fused, params["score.fuse.w1"]) + params["score.fuse.b1"]),
            params["score.fuse.w2"],
        )
        + params["score.fuse.b2"]
    )
    return s.reshape(-1)


def ddm_loss_plain(
    pair: GeometryPair,
    mask: AtomMask | None,
    sigmas: np.ndarray,
    beta: float,
    enc_cfg: EncoderConfig,
    params: Mapping[str, np.ndarray],
    noise: Callable[[int, int], np.ndarray],
) -> float:
    """Arithmetic of the two-direction objective, written out longhand.

    `noise(direction, level)` must supply the same per-pair draws used by
    the graph-built loss for the comparison to be exact.
    """
    if mask is not None:
        view1 = pair.g1.subset(mask.kept_indices)
        view2 = pair.g2.subset(mask.kept_indices)
    else:
        view1, view2 = pair.g1, pair.g2
    d1 = pairwise_distances(view1, enc_cfg.cutoff)
    d2 = pairwise_distances(view2, enc_cfg.cutoff)
    h2 = encode_plain(view2.atom_types, d2, enc_cfg, params)
    h1 = encode_plain(view1.atom_types, d1, enc_cfg, params)
    levels = sigmas.size
    totals = []
    for direction, (dset, h_cond) in enumerate(((d1, h2), (d2, h1)), start=1):
        rep = pair_representation_plain(h_cond, dset)
        acc = None
        for level in range(1, levels + 1):
            sigma = float(sigmas[level - 1])
            eps = np.broadcast_to(
                np.asarray(noise(direction, level), dtype=np.float64), (len(dset),)
            )
            d_tilde = dset.d + sigma * eps
            s = score_plain(d_tilde, rep, enc_cfg, params)
            target = (dset.d - d_tilde) / (sigma * sigma)
            residual = s / sigma - target
            term = np.mean(residual * residual) * (sigma**beta)
            acc = term if acc is None else acc + term
        totals.append(acc / (2.0 * levels))
    return float(totals[0] + totals[1])


def single_level_dsm_plain(
    pair: GeometryPair,
    mask: AtomMask | None,
    sigma: float,
    enc_cfg: EncoderConfig,
    params: Mapping[str, np.ndarray],
    noise: Callable[[int, int], np.ndarray],
) -> float:
    """Classic one-level denoising objective, both directions, no ladder."""
    if mask is not None:
        view1 = pair.g1.subset(mask.kept_indices)
        view2 = pair.g2.subset(mask.kept_indices)
    else:
        view1, view2 = pair.g1, pair.g2
    d1 = pairwise_distances(view1, enc_cfg.cutoff)
    d2 = pairwise_distances(view2, enc_cfg.cutoff)
    h2 = encode_plain(view2.atom_types, d2, enc_cfg, params)
    h1 = encode_plain(view1.atom_types, d1, enc_cfg, params)
    halves = []
    for direction, (dset, h_cond) in enumerate(((d1, h2), (d2, h1)), start=1):
        rep = pair_representation_plain(h_cond, dset)
        eps = np.broadcast_to(
            np.asarray(noise(direction, 1), dtype=np.float64), (len(dset),)
        )
        d_tilde = dset.d + sigma * eps
        s = score_plain(d_tilde, rep, enc_cfg, params)
        target = (dset.d - d_tilde) / (sigma * sigma)
        residual = s / sigma - target
        halves.append((np.mean(residual * residual) * (sigma**0.0)) / 2.0)
    return float(halves[0] + halves[1])
