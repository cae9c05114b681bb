"""Comparable pretraining objectives sharing the same encoder.

Five losses: pairwise-distance regression, hidden-atom-type
classification, cross-view representation reconstruction with a blocked
target gradient, temperature-scaled contrastive alignment over a batch,
and logistic discrimination of matched versus shuffled view pairs.

Prediction heads are passed in as callables so a test can pin them to a
constant or the identity; `mlp_head` builds the standard parameter-backed
two-layer head used in training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .elements import NUM_ELEMENTS
from .encoder import (
    EncoderConfig,
    encode,
    encode_types_distances,
    pair_representation,
    readout,
)
from .geometry import GeometryPair, MoleculeGeometry, pairwise_distances

__all__ = [
    "BaselineConfig",
    "mlp_head",
    "init_head_params",
    "loss_distance_pred",
    "loss_type_pred",
    "loss_rr",
    "loss_infonce",
    "loss_infonce_from_reps",
    "loss_ebm_nce",
]

BASELINE_NAMES = ("distance_pred", "type_pred", "rr", "infonce", "ebm_nce")


@dataclass(frozen=True)
class BaselineConfig:
    which: str = "distance_pred"
    head_hidden: int = 64
    type_mask_ratio: float = 0.15
    temperature: float = 0.1
    coord_sigma: float = 0.3

    def __post_init__(self):
        if self.which not in BASELINE_NAMES:
            raise ValueError(f"unknown baseline {self.which!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 < self.type_mask_ratio < 1.0:
            raise ValueError("type mask ratio must lie in (0, 1)")


def init_head_params(
    prefix: str,
    in_dim: int,
    hidden: int,
    out_dim: int,
    rng: np.random.Generator,
    zero_last: bool = False,
) -> dict[str, np.ndarray]:
    p = {
        f"{prefix}.w1": ad.glorot_uniform(rng, in_dim, hidden),
        f"{prefix}.b1": np.zeros(hidden),
        f"{prefix}.w2": (
            np.zeros((hidden, out_dim))
            if zero_last
            else ad.glorot_uniform(rng, hidden, out_dim)
        ),
        f"{prefix}.b2": np.zeros(out_dim),
    }
    return p


def mlp_head(
    params: Mapping[str, np.ndarray | Tensor], prefix: str
) -> Callable[[Tensor], Tensor]:
    """Two-layer head closure reading its weights from `params` by prefix."""

    def head(x: Tensor) -> Tensor:
        hidden = ad.shifted_softplus(
            ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])
        )
        return ad.add(ad.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])

    return head


def loss_distance_pred(
    g: MoleculeGeometry,
    enc_cfg: EncoderConfig,
    params: Mapping[str, np.ndarray | Tensor],
    head: Callable[[Tensor], Tensor],
) -> Tensor:
    """MSE between a scalar head on each pair vector and the true distance."""
    if g.n < 2:
        raise ValueError("distance prediction needs at least 2 atoms")
    dset = pairwise_distances(g, enc_cfg.cutoff)
    if len(dset) == 0:
        raise ValueError("no pairs within cutoff")
    h = encode(g, enc_cfg, params)
    rep = pair_representation(h, dset)
    pred = ad.reshape(head(rep), (-1,))
    return ad.mean_(ad.square(ad.sub(pred, dset.d)))


def loss_type_pred(
    g: MoleculeGeometry,
    enc_cfg: EncoderConfig,
    params: Mapping[str, np.ndarray | Tensor],
    head: Callable[[Tensor], Tensor],
    mask_ratio: float,
    rng: np.random.Generator,
    masked_indices: np.ndarray | None = None,
) -> Tensor:
    """Cross-entropy of predicting the true types of hidden atoms.

    ceil(mask_ratio * n) atoms have their type embedding replaced by the
    reserved hidden-type token before encoding; the head classifies each
    hidden atom over the atomic-number classes. `masked_indices` pins the
    hidden subset for replayable gradient checks.
    """
    n = g.n
    if masked_indices is None:
        k = int(np.ceil(mask_ratio * n))
        if k < 1:
            raise ValueError("mask ratio leaves no atom hidden")
        masked_indices = np.sort(rng.choice(n, size=min(k, n), replace=False))
    masked_indices = np.asarray(masked_indices, dtype=np.int64)
    override = g.atom_types.copy()
    override[masked_indices] = 0  # hidden-type token row
    dset = pairwise_distances(g, enc_cfg.cutoff)
    h = encode_types_distances(g.atom_types, dset, enc_cfg, params, type_override=override)
    hm = ad.gather(h, masked_indices)
    logits = head(hm)  # (M, NUM_ELEMENTS)
    classes = g.atom_types[masked_indices] - 1
    onehot = np.zeros((masked_indices.size, NUM_ELEMENTS))
    onehot[np.arange(masked_indices.size), classes] = 1.0
    shift = np.max(logits.data, axis=1, keepdims=True)  # constant, value-preserving
    lse = ad.add(
        ad.log_(ad.sum_(ad.exp_(ad.sub(logits, shift)), axis=1)), shift.reshape(-1)
    )
    true_logit = ad.sum_(ad.mul(logits, onehot), axis=1)
    return ad.mean_(ad.sub(lse, true_logit))


def loss_rr(
    pair: GeometryPair,
    enc_cfg: EncoderConfig,
    params: Mapping[str, np.ndarray | Tensor],
    predictor: Callable[[Tensor], Tensor],
) -> Tensor:
    """Predict each view's readout from the other; targets carry no gradient.

    Averages the two directions of || predictor(readout(a)) - readout(b) ||^2
    with the target branch wrapped in a stop-gradient.
    """
    z1 = readout(encode(pair.g1, enc_cfg, params))
    z2 = readout(encode(pair.g2, enc_cfg, params))
    v1 = ad.stop_gradient(z1)
    v2 = ad.stop_gradient(z2)
    r12 = ad.sum_(ad.square(ad.sub(_as_row(predictor, z1), v2)))
    r21 = ad.sum_(ad.square(ad.sub(_as_row(predictor, z2), v1)))
    return ad.div(ad.add(r12, r21), 2.0)


def _as_row(predictor, z: Tensor) -> Tensor:
    # heads are written for 2-D batches; readouts are 1-D vectors
    return ad.reshape(predictor(ad.reshape(z, (1, -1))), (-1,))


def _stack_readouts(
    geoms: Sequence[MoleculeGeometry],
    enc_cfg: EncoderConfig,
    params: Mapping[str, np.ndarray | Tensor],
) -> Tensor:
    rows = [ad.reshape(readout(encode(g, enc_cfg, params)), (1, -1)) for g in geoms]
    return ad.concat(rows, axis=0)


def _normalize_rows(z: Tensor) -> Tensor:
    norms = ad.sqrt_(ad.sum_(ad.square(z), axis=1))
    return ad.div(z, ad.reshape(norms, (-1, 1)))


def _row_logsumexp(s: Tensor) -> Tensor:
    shift = np.max(s.data, axis=1, keepdims=True)
    return ad.add(ad.log_(ad.sum_(ad.exp_(ad.sub(s, shift)), axis=1)), shift.reshape(-1))


def loss_infonce_from_reps(z1: Tensor, z2: Tensor, temperature: float) -> Tensor:
    """Symmetric contrastive cross-entropy on cosine-similarity logits.

    Positives sit on the diagonal of the (B, B) similarity matrix between
    the two view batches; every off-diagonal entry is a negative.
    """
    b = z1.data.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    sims = ad.div(
        ad.matmul(_normalize_rows(z1), ad.transpose(_normalize_rows(z2))), temperature
    )
    eye = np.eye(b)
    diag = ad.sum_(ad.mul(sims, eye), axis=1)
    d1 = ad.mean_(ad.sub(_row_logsumexp(sims), diag))
    sims_t = ad.transpose(sims)
    diag_t = ad.sum_(ad.mul(sims_t, eye), axis=1)
    d2 = ad.mean_(ad.sub(_row_logsumexp(sims_t), diag_t))
    return ad.div(ad.add(d1, d2), 2.0)


def loss_infonce(
    pairs: Sequence[GeometryPair],
    enc_cfg: EncoderConfig,
    params: Mapping[str, np.ndarray | Tensor],
    temperature: float = 0.1,
) -> Tensor:
    if len(pairs) < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    z1 = _stack_readouts([p.g1 for p in pairs], enc_cfg, params)
    z2 = _stack_readouts([p.g2 for p in pairs], enc_cfg, params)
    return loss_infonce_from_reps(z1, z2, temperature)


def loss_ebm_nce(
    pairs: Sequence[GeometryPair],
    enc_cfg: EncoderConfig,
    params: Mapping[str, np.ndarray | Tensor],
    critic: Callable[[Tensor], Tensor],
    rng: np.random.Generator,
    shifts: tuple[int, int] | None = None,
) -> Tensor:
    """Logistic discrimination of matched view pairs against shuffled ones.

    The critic scores the concatenated readouts of a view pair. Negatives
    pair each first view with the second view of another batch element via
    a cyclic shift (never a fixed point), drawn per direction from `rng`
    unless `shifts` pins them.
    """
    b = len(pairs)
    if b < 2:
        raise ValueError("noise-contrastive loss needs a batch of at least 2")
    if shifts is None:
        shifts = (int(rng.integers(1, b)), int(rng.integers(1, b)))
    z1 = _stack_readouts([p.g1 for p in pairs], enc_cfg, params)
    z2 = _stack_readouts([p.g2 for p in pairs], enc_cfg, params)
    halves = []
    for (za, zb), shift in zip(((z1, z2), (z2, z1)), shifts):
        rolled = ad.gather(za, np.roll(np.arange(b), -shift))
        f_pos = ad.reshape(critic(ad.concat([za, zb], axis=1)), (-1,))
        f_neg = ad.reshape(critic(ad.concat([rolled, zb], axis=1)), (-1,))
        pos_term = ad.mean_(ad.log_sigmoid(f_pos))
        neg_term = ad.mean_(ad.log_sigmoid(ad.neg(f_neg)))  # log(1 - sigmoid(f))
        halves.append(ad.mul(ad.add(neg_term, pos_term), -0.5))
    return ad.add(halves[0], halves[1])
