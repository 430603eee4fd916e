"""Training-free pairwise merging and bit-packed storage for toy mixture-of-experts models."""

from .bitcodec import PackedExpertPair, SaturationCounter, decode_word, pack_pair, pack_word, unpack_pair
from .calibration import CalibrationStats, collect_norms
from .compress import run_compression
from .container import Container, read_container, write_container
from .grouping import PairingPlan, group_random, group_search
from .kernel import bench_gemv, gemv_fused, gemv_reference
from .merge import MergeArtifacts, MaskSet, build_masks, merge_experts, merge_pair, reconstruct
from .toy_moe import ToyMoEConfig, ToyMoEModel, eval_deviation, forward, generate_toy

__version__ = "0.1.0"
