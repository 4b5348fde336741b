"""danmpsim: a desk-scale simulator of a non-uniform near-memory accelerator
for multi-scale deformable attention.

The package pairs a functional attention reference (`msda`) with a DDR5
timing and energy model (`dram`), the accelerator instruction format
(`isa`), a hot/cold data placement policy (`placement`), the
clustering-and-packing query scheduler (`cap`), a three-tier processing
element engine (`engine`), synthetic workload generation (`workloads`),
and a batch CLI (`cli`).
"""

__version__ = "0.1.0"

from .errors import ConfigError, InvariantViolation, LocalityError

__all__ = ["ConfigError", "InvariantViolation", "LocalityError", "__version__"]
