"""2+1D decomposition pipeline for 3D volume classification.

Volumes are down-sampled into 8 neighbor-offset sub-volumes, sliced
along three anatomical views, fed through a pluggable 2D feature
extractor, max-pooled across the 8 offsets, reduced by learned slice and
channel selection, classified per (metric, view) branch with a small 1D
convolutional network trained from scratch, and fused across the nine
branches. Evaluation uses repeated stratified cross-validation.
"""

import os as _os

# The workload is dominated by small GEMMs; multithreaded BLAS spin-waits
# cost more than they save, and single-threaded kernels keep results
# bit-reproducible across processes. Honored only if numpy is not yet
# loaded and the variables are otherwise unset.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .decompose import (
    DEFAULT_DESCRIPTOR,
    REFERENCE_DESCRIPTOR,
    ExtractorDescriptor,
    SliceStack,
    SubVolumeSet,
    View,
    adapt_slice,
    adapt_stack,
    decompose8,
    extract_view_slices,
)
from .errors import ConfigError, DataError, PipelineError
from .evaluate import (
    CVSettings,
    Metrics,
    compute_metrics,
    fuse,
    make_folds,
    roc_auc,
    run_cv,
)
from .extraction import (
    FeatureMapSet,
    MaxPooledFeatures,
    StubExtractor,
    import_external_features,
    maxpool8,
    stub_extract,
)
from .net import (
    Net1D,
    TrainConfig,
    build_net,
    loss,
    parameter_count_for,
    predict_positive,
    train_branch,
)
from .pooling import (
    SelectionIndices,
    TrainingFeatureCorpus,
    apply_selection,
    identity_selection,
    learn_channel_selection,
    learn_selection,
    learn_slice_selection,
)
from .tensor import Tensor, read_array, tensor_read, tensor_write, write_array
from .volumes import (
    BrainVolume,
    DatasetManifest,
    EffectRegion,
    Label,
    Metric,
    PhantomSpec,
    generate_phantom_cohort,
    load_manifest,
    load_volume,
    pad_to_even,
)

__version__ = "0.1.0"
