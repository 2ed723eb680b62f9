"""Semantic keypoints from patch-embedding grids, plus a synthetic benchmark.

The pipeline: pool patch features from expert demos, cluster them,
vote by per-frame attention saliency, keep the top centroids as
references, locate each reference in new frames by cosine argmax, and
behaviour-clone a policy on the resulting keypoint coordinates.
"""

__version__ = "0.1.0"

from .errors import DvkError
from .formats import (
    DemoDataset,
    PatchGrid,
    RefConfig,
    ReferenceSet,
    read_demos,
    read_grid,
    read_references,
    write_demos,
    write_grid,
    write_references,
)
from .keypoints import Keypoint, KeypointVector, cosine, extract_keypoints, policy_input
from .policy import (
    Policy,
    TrainConfig,
    TrainReport,
    act,
    bc_grad,
    bc_loss,
    forward,
    init_policy,
    load_policy,
    save_policy,
    train,
    train_on_arrays,
)
from .references import (
    Clustering,
    FeatureBag,
    InitConfig,
    SaliencyTable,
    collect_features,
    init_references,
    kmeans,
    saliency,
    vote_and_select,
)
from .world import (
    CATALOG,
    INTER_TEST,
    INTER_TRAIN,
    INTRA_VARIANTS,
    EnvState,
    ObjectInstance,
    World,
    expert_action,
    handle_center_uv,
    initial_state,
    render,
    rollout,
    spawn_object,
    step,
)
from .bench import (
    BenchConfig,
    collect_demos,
    evaluate,
    pooled_input,
    cls_like_input,
    run_benchmark,
)

__all__ = [name for name in dir() if not name.startswith("_")]
