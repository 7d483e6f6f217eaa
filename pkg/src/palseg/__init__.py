"""palseg: policy-based active learning on video motion priors for
cross-domain foreground segmentation.

The package is organized around the pipeline stages: `imagecore` (grids and
the IoU metric), `flowprior` (dense flow and candidate patches), `segmenter`
(the small trainable pixel classifier), `policymem` (the memory-network
selection policy), `rlloop` (episodic REINFORCE training), `adapt`
(target-domain harvesting and baselines), and `synthbench` (the synthetic
cross-domain benchmark). `cli` ties the stages into an experiment runner.
"""

from .imagecore import BinaryMask, Image, Rect, crop, crop_mask, iou, mean_iou
from .flowprior import (
    FlowConfig,
    FlowField,
    MotionPrior,
    PatchSample,
    binarize,
    estimate_flow,
    extract_patches,
    prior_precision,
)
from .segmenter import (
    SegmenterParams,
    TrainBatch,
    TrainSettings,
    init_segmenter,
    seg_eval,
    seg_forward,
    seg_loss_grad,
    seg_train,
)
from .policymem import (
    ActionOutcome,
    Decision,
    MemoryState,
    PolicyConfig,
    PolicyParams,
    act,
    encode,
    init_policy,
    logpi_grad,
    memory_read,
    memory_write,
)
from .rlloop import (
    EpisodeConfig,
    EpisodeResult,
    PolicyTrainResult,
    RewardBaseline,
    policy_update,
    reward,
    run_episode,
    train_policy,
)
from .adapt import (
    AdaptReport,
    StrongPriorSet,
    baseline_oracle,
    baseline_random,
    evaluate_crossdomain,
    finetune_target,
    select_target,
)
from .synthbench import (
    DomainTransform,
    SceneSpec,
    SplitManifest,
    corrupt_candidate_priors,
    corrupt_prior,
    generate,
    render_video,
)

__version__ = "0.1.0"
