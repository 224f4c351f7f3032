"""NumPy reference blocks for a compact hybrid detector encoder.

Modules: ``tensor`` (NCHW ops), ``oracle`` (naive references and gradient
checking), ``xfa``, ``spga``, ``gcfc3`` (the three blocks), ``assembly``,
``flops``, ``archive`` and ``cli``.
"""
from .archive import ArchiveError, WeightArchive, archive_read, archive_write
from .assembly import AssemblyConfig, AssemblyParams, assembly_forward, count_flops, fuse_assembly, init_assembly, load_assembly
from .gcfc3 import FusedGCFC3, GCFC3Params, fuse_branches, gcfc3_forward_deploy, gcfc3_forward_train, init_gcfc3
from .oracle import GradReport, conv2d_naive, dense_attention_naive, grad_check
from .spga import SPGAParams, init_spga, spga_forward, sparse_shsa
from .tensor import BNParams, ConvParams, ShapeError, conv2d
from .xfa import XFAConfig, init_xfa_block, init_xfa_unit, xfa_block_forward, xfa_unit_forward

__version__ = "0.1.0"

__all__ = [
    "ArchiveError", "WeightArchive", "archive_read", "archive_write",
    "AssemblyConfig", "AssemblyParams", "assembly_forward", "count_flops", "fuse_assembly",
    "init_assembly", "load_assembly",
    "FusedGCFC3", "GCFC3Params", "fuse_branches", "gcfc3_forward_deploy", "gcfc3_forward_train",
    "init_gcfc3",
    "GradReport", "conv2d_naive", "dense_attention_naive", "grad_check",
    "SPGAParams", "init_spga", "spga_forward", "sparse_shsa",
    "BNParams", "ConvParams", "ShapeError", "conv2d",
    "XFAConfig", "init_xfa_block", "init_xfa_unit", "xfa_block_forward", "xfa_unit_forward",
]
