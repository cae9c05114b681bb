"""Pretraining SE(3)-invariant molecular encoders by denoising pair distances."""

from .autodiff import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    cosine_lr,
    finite_diff_check,
    init_adam,
)
from .baselines import (
    BaselineConfig,
    loss_distance_pred,
    loss_ebm_nce,
    loss_infonce,
    loss_rr,
    loss_type_pred,
)
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainingConfig, load_config, parse_config
from .denoise import (
    DdmLossReport,
    NoiseSchedule,
    PerturbedDistances,
    ScoreNetConfig,
    TrainState,
    build_schedule,
    coordinate_score_oracle,
    ddm_loss,
    dsm_target,
    perturb_distances,
    pretrain_step,
    score_pairs,
)
from .encoder import EncoderConfig, encode, pair_representation, readout
from .geometry import (
    AtomMask,
    DistanceSet,
    GeometryPair,
    MoleculeGeometry,
    RigidTransform,
    XyzParseError,
    apply_rigid_transform,
    pairwise_distances,
    parse_xyz,
    perturb_coordinates,
    sample_atom_mask,
    serialize_xyz,
)
from .harness import (
    MetricsRow,
    emit_metrics,
    ethanol_template,
    generate_synthetic_conformers,
    run_finetune,
    run_pretrain,
    seed_comparison,
)

__version__ = "0.1.0"
