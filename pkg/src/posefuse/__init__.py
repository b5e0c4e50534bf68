"""Registration and fusion of splat models captured in several object poses."""
from .errors import (
    AllCandidatesDegenerate, DegenerateAlignment, DegeneratePair, DimensionMismatch, IdMismatch,
    ImageTooSmall, InsufficientCorrespondence, NoVerifiedPairs, NonFiniteLoss, PoseFuseError,
    PreconditionError, StageError, ZeroDescriptor,
)
from .geometry import (
    CameraIntrinsics, CameraPose, PoseSet, Sim3, align_pose_pair, pair_scale, sim3_apply_pose,
    sim3_apply_pose_set, sim3_compose, sim3_invert,
)
from .splatrender import SilhouetteMask, RgbImage, SoftOccupancy, SplatCloud, mask_iou, render_mask, render_occupancy, render_rgb
from .selection import MixedPoseSelector, select_mixed_set
from .fusion import GlobalRegistration, SilhouetteConsensusFusion, global_register, silhouette_consensus_fusion
from .refine import LocalRefiner, RefineConfig, local_refine, refine_photometric, refine_silhouette
from .complete import TrainConfig, balanced_schedule, finetune_splats, iterate_auxiliary_poses
from .metrics import holdout_split, psnr, registration_error, ssim
from .synth import SynthConfig, gen_object, make_dataset
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"
