"""Structured lottery-ticket toolkit.

Turns unstructured sparse masks into hardware-friendly structured ones
(channel-wise refilling, group-wise regrouping), runs the resulting
block-sparse convolutions against dense and CSR baselines, and accounts
sparsity and MACs.
"""

from .archive import Archive, ArchiveLayer, load_archive, save_archive
from .core import (
    ImpState,
    LayerShape,
    SparseMask,
    WeightTensor,
    density,
    global_magnitude_prune,
    one_shot_magnitude_prune,
    random_prune,
)
from .errors import (
    ArchiveFormatError,
    CongruenceError,
    ConsistencyError,
    CriterionError,
    LayoutError,
    ParameterError,
    ShapeError,
    SltkError,
    TrainingError,
    ValidationError,
    WiringError,
)
from .executors import (
    BenchCase,
    BenchReport,
    FeatureMap,
    bench,
    block_conv,
    dense_conv,
    im2col,
    masked_conv_csr,
    outputs_agree,
    row_split,
)
from .flops import SparsityReport, bundled_shape_file, flops, load_shapes
from .refill import ChannelScore, refill, refill_plus, score_channels
from .regroup import (
    BlockLayout,
    DenseBlock,
    Hypergraph,
    RegroupParams,
    build_hypergraph,
    extract_blocks,
    jaccard,
    partition,
    regroup_mask,
)

__version__ = "0.1.0"
