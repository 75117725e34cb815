"""Region-adaptive conditional MeanFlow (RA-CMF) image enhancement.

A conditional MeanFlow backbone learns image-to-image enhancement as an
average-velocity flow; a reinforcement-learned controller redistributes
tile-wise refinement where degradation is worst. Includes the full metric
stack: PSNR/SSIM, radiomic-feature CCC, and noise power spectra.
"""

from .arrayio import read_arrays, write_arrays
from .backbone import BackboneConfig, FlowUNet, RTEmbedding, TimePair
from .cmf import (
    TrainingSample,
    base_loss,
    evaluate_image_loss,
    image_loss,
    load_backbone_checkpoint,
    make_intermediate,
    meanflow_loss,
    meanflow_target,
    reconstruct_one_step,
    sample_time_pair,
    save_backbone_checkpoint,
    train_backbone,
)
from .config import DataConfig, EvalConfig, ExperimentConfig, config_from_dict, load_config
from .controller import (
    Controller,
    ControllerConfig,
    RandomPolicy,
    UniformBudget,
    ZeroBudget,
    action_entropy,
    action_log_prob,
    extract_state_features,
    load_controller_checkpoint,
    policy_forward,
    sample_action,
    save_controller_checkpoint,
)
from .errors import (
    ContractError,
    DimensionError,
    FormatError,
    NumericalError,
    RacmfError,
    SpecificationError,
)
from .metrics import (
    NPSProfile,
    PsnrResult,
    ccc,
    masked_psnr,
    masked_ssim,
    nps,
    nps_profile_distance,
    psnr,
    ssim,
)
from .radiomics import (
    FAMILIES,
    FEATURE_CATALOG,
    CCCReport,
    ccc_report,
    feature_vector,
    quantize_roi,
)
from .rl import (
    PPOConfig,
    RewardConfig,
    Trajectory,
    compute_advantages,
    evaluate_policy,
    ppo_update,
    quality_score,
    step_reward,
    train_controller,
)
from .rollout import (
    RefinementAction,
    RolloutConfig,
    RolloutTrace,
    Schedule,
    TileGrid,
    build_masks,
    coarse_step,
    enhance,
    make_schedule,
    micro_step,
)
from .synth import (
    DegradationField,
    DegradationSpec,
    ImagePair,
    PhantomSpec,
    build_dataset,
    degrade,
    generate_phantom,
    load_manifest,
    manifest_pairs,
    read_pair,
    to_pseudo_hu,
    write_pair,
)

__version__ = "0.1.0"
