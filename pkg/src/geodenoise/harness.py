"""Run orchestration: datasets, pretraining and fine-tuning loops, metrics.

Desk-scale data comes from `generate_synthetic_conformers`, which scatters
Gaussian coordinate noise around a fixed template molecule and labels each
sample with a smooth, exactly computable surrogate property: the summed
squared deviation of its pair distances from the template's. A 9-atom
ethanol-like geometry ships as the default template.

Every run owns a single seeded generator; all randomness (view noise,
masks, splits, negative pairings) is drawn from it sequentially, so a
(config, seed, dataset) triple fully determines every metric row and every
checkpoint byte. Batches iterate in fixed dataset order, which keeps
resuming from a checkpoint exact. Wall-clock timing in metrics is opt-in
(`wall_clock = true`) because measured times would break byte-level
reproducibility of the metric files.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import (
    AdamState,
    adam_step,
    collect_grads,
    cosine_lr,
    init_adam,
    wrap_params,
)
from .baselines import (
    init_head_params,
    loss_distance_pred,
    loss_ebm_nce,
    loss_infonce,
    loss_rr,
    loss_type_pred,
    mlp_head,
)
from .checkpoint import Checkpoint, CheckpointError
from .config import TrainingConfig
from .denoise import TrainState, init_score_params, pretrain_step
from .elements import NUM_ELEMENTS
from .encoder import encode, init_encoder_params, readout
from .geometry import (
    MoleculeGeometry,
    pairwise_distances,
    parse_xyz,
    perturb_coordinates,
    sample_atom_mask,
)

__all__ = [
    "ETHANOL_XYZ",
    "ethanol_template",
    "displacement_energy",
    "generate_synthetic_conformers",
    "MetricsRow",
    "emit_metrics",
    "write_labels",
    "read_labels",
    "PretrainResult",
    "run_pretrain",
    "FinetuneResult",
    "run_finetune",
    "seed_comparison",
]

ETHANOL_XYZ = """9
ethanol-like template
C -0.8880 0.1671 0.0000
C 0.4664 -0.5062 0.0000
O 1.5020 0.4576 0.0000
H -0.9756 0.8013 0.8824
H -0.9756 0.8013 -0.8824
H -1.6882 -0.5684 0.0000
H 0.5579 -1.1455 0.8788
H 0.5579 -1.1455 -0.8788
H 2.3471 -0.0127 0.0000
"""


def ethanol_template() -> MoleculeGeometry:
    return parse_xyz(ETHANOL_XYZ)[0]


def displacement_energy(g: MoleculeGeometry, template: MoleculeGeometry) -> float:
    """Sum over pairs of (d_ij - d_ij_template)^2, zero at the template."""
    d = pairwise_distances(g).d
    d0 = pairwise_distances(template).d
    return float(np.sum((d - d0) ** 2))


def generate_synthetic_conformers(
    template: MoleculeGeometry,
    count: int,
    sigma: float,
    rng: np.random.Generator,
) -> tuple[list[MoleculeGeometry], np.ndarray]:
    """Noisy copies of a template, each labeled with its displacement energy."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    samples = [perturb_coordinates(template, sigma, rng).g2 for _ in range(count)]
    labels = np.array([displacement_energy(g, template) for g in samples])
    return samples, labels


@dataclass
class MetricsRow:
    step: int
    loss: float
    lr: float
    seconds: float
    per_level: np.ndarray | None = None


def emit_metrics(rows: Sequence[MetricsRow], path: str | Path) -> None:
    """Write one CSV row per step with 10-significant-digit formatting."""
    if not rows:
        raise ValueError("metrics rows must be non-empty")
    levels = 0 if rows[0].per_level is None else len(rows[0].per_level)
    header = "step,loss,lr,seconds"
    if levels:
        header += "," + ",".join(f"level_{k}" for k in range(1, levels + 1))
    lines = [header]
    last_step = None
    for row in rows:
        if last_step is not None and row.step <= last_step:
            raise ValueError("steps must be strictly increasing")
        last_step = row.step
        cells = [str(row.step), f"{row.loss:.10g}", f"{row.lr:.10g}", f"{row.seconds:.10g}"]
        row_levels = 0 if row.per_level is None else len(row.per_level)
        if row_levels != levels:
            raise ValueError("per-level column count varies between rows")
        if levels:
            cells.extend(f"{v:.10g}" for v in row.per_level)
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_labels(labels: np.ndarray, path: str | Path) -> None:
    lines = ["index,label"]
    lines.extend(f"{k},{v:.10g}" for k, v in enumerate(labels))
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "index,label":
        raise ValueError(f"malformed labels file {path}: expected 'index,label' header")
    return np.array([float(line.split(",")[1]) for line in lines[1:]])


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bit = np.random.PCG64()
    bit.state = state
    return np.random.Generator(bit)


def init_params_for(config: TrainingConfig, rng: np.random.Generator):
    """Full parameter table for the configured objective, in a fixed order."""
    enc_cfg = config.encoder_config()
    params = init_encoder_params(enc_cfg, rng)
    d = enc_cfg.embedding_dim
    if config.objective in ("ddm", "none"):
        params.update(init_score_params(config.score_config(), enc_cfg, rng))
    elif config.objective == "distance_pred":
        params.update(init_head_params("head.distance", d, d, 1, rng))
    elif config.objective == "type_pred":
        params.update(init_head_params("head.type", d, d, NUM_ELEMENTS, rng))
    elif config.objective == "rr":
        params.update(init_head_params("head.rr", d, d, d, rng))
    elif config.objective == "ebm_nce":
        params.update(init_head_params("head.critic", 2 * d, d, 1, rng))
    return params


def _make_pair(g: MoleculeGeometry, config: TrainingConfig, rng: np.random.Generator):
    pair = perturb_coordinates(g, config.coord_sigma, rng)
    if config.mask_ratio > 0.0:
        mask = sample_atom_mask(g.n, config.mask_ratio, rng)
        pair = replace(
            pair,
            g1=pair.g1.subset(mask.kept_indices),
            g2=pair.g2.subset(mask.kept_indices),
        )
    return pair


def _baseline_step(
    batch: list[MoleculeGeometry],
    config: TrainingConfig,
    params: dict[str, np.ndarray],
    adam: AdamState,
    rng: np.random.Generator,
    lr: float,
) -> float:
    enc_cfg = config.encoder_config()
    leaves = wrap_params(params)
    objective = config.objective
    if objective == "infonce":
        pairs = [_make_pair(g, config, rng) for g in batch]
        loss = loss_infonce(pairs, enc_cfg, leaves, config.temperature)
    elif objective == "ebm_nce":
        pairs = [_make_pair(g, config, rng) for g in batch]
        loss = loss_ebm_nce(pairs, enc_cfg, leaves, mlp_head(leaves, "head.critic"), rng)
    else:
        total = None
        for g in batch:
            if objective == "distance_pred":
                term = loss_distance_pred(g, enc_cfg, leaves, mlp_head(leaves, "head.distance"))
            elif objective == "type_pred":
                term = loss_type_pred(
                    g, enc_cfg, leaves, mlp_head(leaves, "head.type"),
                    config.type_mask_ratio, rng,
                )
            elif objective == "rr":
                pair = _make_pair(g, config, rng)
                term = loss_rr(pair, enc_cfg, leaves, mlp_head(leaves, "head.rr"))
            else:
                raise ValueError(f"unknown objective {objective!r}")
            total = term if total is None else ad.add(total, term)
        loss = ad.div(total, float(len(batch)))
    ad.backward(loss)
    adam_step(adam, params, collect_grads(leaves), lr)
    return float(loss.data)


def _batches(n: int, batch_size: int, min_size: int) -> list[np.ndarray]:
    out = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        if idx.size >= min_size:
            out.append(idx)
    return out


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    rows: list[MetricsRow]
    params: dict[str, np.ndarray]


def run_pretrain(
    config: TrainingConfig,
    dataset: list[MoleculeGeometry] | None = None,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
) -> PretrainResult:
    """Execute the configured objective and return the final checkpoint.

    `max_steps` caps how many optimizer steps this invocation performs;
    passing the resulting checkpoint back via `resume` continues the run
    exactly where it stopped (the generator state rides along in the
    checkpoint). Resuming under a different config is rejected.
    """
    config.validate()
    if dataset is None:
        if not config.dataset:
            raise ValueError("config has no dataset path and none was provided")
        dataset = parse_xyz(Path(config.dataset).read_text())
    if not dataset:
        raise ValueError("dataset is empty")

    if resume is not None:
        if resume.config_text != config.canonical_text():
            raise CheckpointError("checkpoint config does not match the current config")
        params = resume.params()
        adam = init_adam(params)
        adam.m, adam.v = resume.adam_moments()
        adam.t = resume.adam_t
        rng = _rng_from_state(resume.rng_state)
        step = resume.step
    else:
        rng = np.random.default_rng(config.seed)
        params = init_params_for(config, rng)
        adam = init_adam(params)
        step = 0

    min_batch = 2 if config.objective in ("infonce", "ebm_nce") else 1
    batches = _batches(len(dataset), config.batch_size, min_batch)
    if not batches:
        raise ValueError(
            f"objective {config.objective} needs batches of at least {min_batch} molecules"
        )
    total_steps = config.epochs * len(batches)

    rows: list[MetricsRow] = []
    if config.objective != "none":
        state = TrainState(
            params=params,
            adam=adam,
            rng=rng,
            schedule=config.noise_schedule(),
            enc_cfg=config.encoder_config(),
            score_cfg=config.score_config(),
            coord_sigma=config.coord_sigma,
            mask_ratio=config.mask_ratio,
            literal_shift=config.literal_shift,
            condition_sigma=config.coord_sigma if config.condition_extra_noise else 0.0,
            step=step,
        )
        done_this_call = 0
        while step < total_steps:
            if max_steps is not None and done_this_call >= max_steps:
                break
            batch = [dataset[k] for k in batches[step % len(batches)]]
            lr = cosine_lr(step, total_steps, config.learning_rate, config.lr_min)
            started = time.perf_counter()
            if config.objective == "ddm":
                report = pretrain_step(batch, state, lr)
                loss_value, per_level = report.loss, report.per_level
            else:
                loss_value = _baseline_step(batch, config, params, adam, rng, lr)
                per_level = None
            seconds = time.perf_counter() - started if config.wall_clock else 0.0
            step += 1
            done_this_call += 1
            rows.append(MetricsRow(step, loss_value, lr, seconds, per_level))

    ckpt_tensors = dict(params)
    ckpt_tensors.update({f"adam.m.{k}": v for k, v in adam.m.items()})
    ckpt_tensors.update({f"adam.v.{k}": v for k, v in adam.v.items()})
    ckpt = Checkpoint(
        config_text=config.canonical_text(),
        step=step,
        adam_t=adam.t,
        rng_state=_rng_state(rng),
        tensors=ckpt_tensors,
    )
    return PretrainResult(ckpt, rows, params)


@dataclass
class FinetuneResult:
    test_mae: float
    val_mae: float
    rows: list[MetricsRow]
    params: dict[str, np.ndarray]


def _predict(
    geoms: Sequence[MoleculeGeometry], config: TrainingConfig, params, leaves=None
):
    enc_cfg = config.encoder_config()
    table = leaves if leaves is not None else params
    head = mlp_head(table, "head.regression")
    preds = []
    for g in geoms:
        z = ad.reshape(readout(encode(g, enc_cfg, table)), (1, -1))
        preds.append(ad.reshape(head(z), (1,)))
    return ad.concat(preds, axis=0)


def run_finetune(
    config: TrainingConfig,
    geoms: Sequence[MoleculeGeometry] | None = None,
    labels: np.ndarray | None = None,
    init: Checkpoint | None = None,
) -> FinetuneResult:
    """Train a fresh regression head (plus the encoder) and report test MAE.

    Data splits 80/10/10 by a seeded shuffle (fractions configurable). The
    head's output layer starts at zero, so an untrained model predicts
    exactly zero. Training minimizes squared error; the reported metric is
    mean absolute error on the held-out test split.
    """
    config.validate()
    if geoms is None:
        geoms = parse_xyz(Path(config.dataset).read_text())
        labels = read_labels(config.labels)
    labels = np.asarray(labels, dtype=np.float64)
    if len(geoms) != labels.size:
        raise ValueError("geometry count and label count differ")

    rng = np.random.default_rng(config.seed)
    n = len(geoms)
    order = rng.permutation(n)
    n_train = math.floor(config.train_frac * n)
    n_val = math.floor(config.val_frac * n)
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("split too small: need at least 1 sample per split")
    idx_train = order[:n_train]
    idx_val = order[n_train : n_train + n_val]
    idx_test = order[n_train + n_val :]

    enc_cfg = config.encoder_config()
    if init is not None:
        from .config import parse_config

        ckpt_config = parse_config(init.config_text)
        if not config.encoder_keys_match(ckpt_config):
            raise CheckpointError(
                "checkpoint encoder configuration does not match the current config"
            )
        loaded = {
            k: v for k, v in init.params().items() if k.startswith("encoder.")
        }
        fresh = init_encoder_params(enc_cfg, rng)
        for name, array in fresh.items():
            if name not in loaded or loaded[name].shape != array.shape:
                raise CheckpointError(
                    f"checkpoint is missing or mismatches encoder tensor {name!r}"
                )
        params = {name: loaded[name] for name in fresh}
    else:
        params = init_encoder_params(enc_cfg, rng)
    d = enc_cfg.embedding_dim
    params.update(init_head_params("head.regression", d, d, 1, rng, zero_last=True))
    adam = init_adam(params)

    batches = _batches(n_train, config.batch_size, 1)
    total_steps = config.epochs * len(batches)
    rows: list[MetricsRow] = []
    step = 0
    while step < total_steps:
        batch_idx = idx_train[batches[step % len(batches)]]
        batch = [geoms[k] for k in batch_idx]
        target = labels[batch_idx]
        lr = cosine_lr(step, total_steps, config.learning_rate, config.lr_min)
        started = time.perf_counter()
        leaves = wrap_params(params)
        pred = _predict(batch, config, params, leaves)
        loss = ad.mean_(ad.square(ad.sub(pred, target)))
        ad.backward(loss)
        adam_step(adam, params, collect_grads(leaves), lr)
        seconds = time.perf_counter() - started if config.wall_clock else 0.0
        step += 1
        rows.append(MetricsRow(step, float(loss.data), lr, seconds))

    def mae(indices) -> float:
        pred = _predict([geoms[k] for k in indices], config, params).data
        return float(np.mean(np.abs(pred - labels[indices])))

    return FinetuneResult(mae(idx_test), mae(idx_val), rows, params)


def seed_comparison(
    config: TrainingConfig,
    seeds: Sequence[int],
    dataset: list[MoleculeGeometry],
    labels: np.ndarray,
) -> list[dict]:
    """Fine-tune MAE with and without pretraining, one row per seed."""
    table = []
    for seed in seeds:
        cfg = replace(config, seed=seed, objective="ddm")
        pre = run_pretrain(cfg, dataset=dataset)
        tuned = run_finetune(cfg, dataset, labels, init=pre.checkpoint)
        scratch = run_finetune(cfg, dataset, labels, init=None)
        table.append(
            {
                "seed": seed,
                "pretrained_mae": tuned.test_mae,
                "random_init_mae": scratch.test_mae,
            }
        )
    return table
