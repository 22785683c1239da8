"""Curation, unification and alignment tools for robot demonstration data."""
from .align import (
    FlowEstimate,
    TrajectoryResampler,
    alignment_factor,
    mean_flow_magnitude,
    pchip_eval,
    resample_episode,
    resample_trajectory,
)
from .augment import AugmentConfig, mirror_episode, reverse_episode
from .dataqa import QaConfig, QualityReport, qa_episode, sharpness_score, state_diversity, tremble_score, visual_diversity
from .episode import Episode, FilterConfig, ValidationResult, load_episode, save_episode, validate_episode
from .guards import (
    CameraModel,
    GmmDensityModel,
    GmmOodDetector,
    fit_gmm,
    gmm_density_grad,
    lift_point,
    ood_correct,
    progress_labels,
)
from .rl_align import RefineConfig, expectile_loss, iql_losses, refine_action, refine_trajectory
from .sampler import SamplerSchedule, mixture_weights, sample_plan
from .unify import (
    EmbodimentDescriptor,
    UnifiedAction,
    UnifiedActionMapper,
    UnifiedLayout,
    control_prompt,
    map_from_unified,
    map_to_unified,
    masked_bc_loss,
    retarget,
)

__version__ = "0.1.0"
