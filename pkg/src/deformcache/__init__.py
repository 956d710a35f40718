"""Simulator for cache-aware multi-scale deformable attention.

Reference and fused attention kernels, a bit-true fixed-point model, the
distance-based out-of-order query scheduler, a trace-driven feature-cache
model, top-k query pruning and an experiment harness.
"""

from .attention import (AttentionOutput, FeaturePyramid, ProjectionWeights, PyramidDims, QueryBatch,
                        bilinear_sample, fold_projections, msdeformattn_fused, msdeformattn_reference,
                        random_weights)
from .cache import (CacheGeometry, SimReport, TimingConfig, footprints, prefetch_radii, prefetch_region,
                    simulate_baseline, simulate_dooq_pingpong, t_stall_analytic)
from .config import ExperimentConfig, load_config
from .errors import (ConfigurationError, ContractViolation, DataCorruptionError, DeformCacheError,
                     QuantOverflowError, RejectedInputError)
from .experiment import run_experiment
from .fixed_point import (FixedPointFormat, PrecisionPlan, SaturationStats, msdeformattn_fused_quantized,
                          quantized_softmax)
from .report import emit_report, load_report
from .scheduler import Schedule, SchedulerConfig, dooq_schedule, sorter_cost
from .tracefile import TraceFile
from .verify import verify_kernels
from .workload import IndexRemap, WorkloadSpec, build_workload, prune_topk, scatter_restore

__version__ = "0.1.0"
