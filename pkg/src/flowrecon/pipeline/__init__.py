from .recon import (
    DepthCues,
    IdentityFlow,
    MetricsReport,
    ModelFlow,
    NoValidTargets,
    OracleFlow,
    PairRecord,
    ReconConfig,
    RefineResult,
    equally_spaced,
    evaluate,
    generate_pairs,
    initial_reconstruction,
    pairs_to_flow_batches,
    random_init_scene,
    refine_reconstruction,
    voxel_dedup,
    write_metrics_csv,
)
from .synthetic import ORBIT, SPLINE, SyntheticScene, generate_synthetic_scene, make_trajectory, random_gt_scene
from .toydata import CorruptionDataset, corrupt, decode_residual, encode, make_corruption_dataset, upsample
