"""SE(3)-invariant molecular encoder.

Continuous-filter message passing over interatomic distances: atom-type
embeddings are updated layer by layer with messages weighted by filters
generated from a radial-basis expansion of each pair distance, then a
per-node output MLP produces the final embeddings. Because coordinates
enter only through pairwise distances, the embeddings are exactly
invariant under rigid motions and equivariant under atom relabeling.

Message MLPs carry no biases, and the activation maps zero to zero, so an
atom without neighbors keeps its bare type embedding through every layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .elements import NUM_ELEMENTS
from .geometry import AtomMask, DistanceSet, MoleculeGeometry, pairwise_distances

__all__ = [
    "EncoderConfig",
    "MASK_TOKEN",
    "init_encoder_params",
    "rbf_expand",
    "encode",
    "encode_types_distances",
    "readout",
    "pair_representation",
]

# Embedding row 0 is reserved for the hidden-type token used by the
# type-prediction objective; rows 1..118 are the atomic numbers.
MASK_TOKEN = 0


@dataclass(frozen=True)
class EncoderConfig:
    embedding_dim: int = 64
    num_layers: int = 3
    rbf_count: int = 32
    rbf_gamma: float = 10.0
    rbf_dmax: float = 10.0
    cutoff: float | None = None

    def __post_init__(self):
        if self.embedding_dim < 1 or self.num_layers < 1 or self.rbf_count < 2:
            raise ValueError("encoder sizes must be positive (rbf_count >= 2)")
        if self.rbf_gamma <= 0 or self.rbf_dmax <= 0:
            raise ValueError("rbf_gamma and rbf_dmax must be positive")
        if self.cutoff is not None and self.cutoff <= 0:
            raise ValueError("cutoff must be positive when set")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(0.0, self.rbf_dmax, self.rbf_count)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator):
    """Seeded parameter table; insertion order fixes serialization order."""
    d, r = cfg.embedding_dim, cfg.rbf_count
    p: dict[str, np.ndarray] = {}
    p["encoder.embedding"] = ad.glorot_uniform(rng, d, d, shape=(NUM_ELEMENTS + 1, d))
    for layer in range(cfg.num_layers):
        pre = f"encoder.layer{layer}"
        p[f"{pre}.filter.w1"] = ad.glorot_uniform(rng, r, d)
        p[f"{pre}.filter.b1"] = np.zeros(d)
        p[f"{pre}.filter.w2"] = ad.glorot_uniform(rng, d, d)
        p[f"{pre}.filter.b2"] = np.zeros(d)
        # update path is bias-free so a zero message makes a zero update
        p[f"{pre}.update.w1"] = ad.glorot_uniform(rng, d, d)
        p[f"{pre}.update.w2"] = ad.glorot_uniform(rng, d, d)
    p["encoder.out.w1"] = ad.glorot_uniform(rng, d, d)
    p["encoder.out.b1"] = np.zeros(d)
    p["encoder.out.w2"] = ad.glorot_uniform(rng, d, d)
    p["encoder.out.b2"] = np.zeros(d)
    return p


def rbf_expand(d: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Gaussian radial basis features exp(-gamma * (d - mu_k)^2)."""
    d = np.asarray(d, dtype=np.float64)
    delta = d[:, None] - cfg.centers[None, :]
    return np.exp(-cfg.rbf_gamma * delta * delta)


def _check_types(types: np.ndarray) -> None:
    if np.any(types < 1) or np.any(types > NUM_ELEMENTS):
        raise ValueError(f"atom type outside embedding table (1..{NUM_ELEMENTS})")


def encode(
    g: MoleculeGeometry,
    cfg: EncoderConfig,
    params: Mapping[str, np.ndarray | Tensor],
    mask: AtomMask | None = None,
) -> Tensor:
    """Per-atom embeddings of the kept atoms, one row per kept atom.

    Masked-out atoms are dropped before distance extraction, so they
    contribute to nothing downstream.
    """
    sub = g.subset(mask.kept_indices) if mask is not None else g
    dset = pairwise_distances(sub, cfg.cutoff)
    return encode_types_distances(sub.atom_types, dset, cfg, params)


def encode_types_distances(
    atom_types: np.ndarray,
    dset: DistanceSet,
    cfg: EncoderConfig,
    params: Mapping[str, np.ndarray | Tensor],
    type_override: np.ndarray | None = None,
) -> Tensor:
    """Encoder forward pass from explicit types and distances.

    `type_override` substitutes embedding-row indices (e.g. the hidden-type
    token) without touching the geometry.
    """
    _check_types(atom_types)
    rows = atom_types if type_override is None else np.asarray(type_override)
    n = atom_types.size
    z = ad.gather(params["encoder.embedding"], rows)
    if len(dset) > 0:
        src = np.concatenate([dset.j, dset.i])
        dst = np.concatenate([dset.i, dset.j])
        feats = rbf_expand(np.concatenate([dset.d, dset.d]), cfg)
        for layer in range(cfg.num_layers):
            pre = f"encoder.layer{layer}"
            w = ad.add(
                ad.matmul(
                    ad.shifted_softplus(
                        ad.add(ad.matmul(feats, params[f"{pre}.filter.w1"]),
                               params[f"{pre}.filter.b1"])
                    ),
                    params[f"{pre}.filter.w2"],
                ),
                params[f"{pre}.filter.b2"],
            )
            messages = ad.mul(ad.gather(z, src), w)
            agg = ad.scatter_add(messages, dst, n)
            update = ad.matmul(
                ad.shifted_softplus(ad.matmul(agg, params[f"{pre}.update.w1"])),
                params[f"{pre}.update.w2"],
            )
            z = ad.add(z, update)
    h = ad.add(
        ad.matmul(
            ad.shifted_softplus(
                ad.add(ad.matmul(z, params["encoder.out.w1"]), params["encoder.out.b1"])
            ),
            params["encoder.out.w2"],
        ),
        params["encoder.out.b2"],
    )
    return h


def readout(h: Tensor) -> Tensor:
    """Molecule vector: arithmetic mean over atom rows."""
    if h.data.shape[0] < 1:
        raise ValueError("readout of an empty embedding set")
    return ad.mean_(h, axis=0)


def pair_representation(h: Tensor, dset: DistanceSet) -> Tensor:
    """Per-pair vectors h_i + h_j, symmetric in (i, j) by construction."""
    n = h.data.shape[0]
    if len(dset) and (dset.i.max() >= n or dset.j.max() >= n):
        raise IndexError("pair index out of range for the embedding rows")
    return ad.add(ad.gather(h, dset.i), ad.gather(h, dset.j))
