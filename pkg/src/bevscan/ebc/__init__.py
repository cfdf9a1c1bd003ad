"""Environment-aware BEV compressor (patch scan with surround orders)."""
from .block import EBCBlock, SsmBranch, patchify, unpatchify
from .permutation import (BAND_EDGES, PatchPermutation, ScanKind, band_index, band_partition,
                          build_permutation, patch_centers)
from .scan import discretize, selective_scan, zoh_input_exact

__all__ = [
    "EBCBlock", "SsmBranch", "patchify", "unpatchify", "BAND_EDGES", "PatchPermutation", "ScanKind",
    "band_index", "band_partition", "build_permutation", "patch_centers", "discretize",
    "selective_scan", "zoh_input_exact",
]
