"""Product-key memory layers with a small language-model harness."""

from .memory import ProductKeyMemory, init_memory, memory_backward, memory_forward
from .search import ProductKeyIndex, flat_search, product_search

__version__ = "1.0.0"

__all__ = [
    "ProductKeyIndex",
    "ProductKeyMemory",
    "flat_search",
    "init_memory",
    "memory_backward",
    "memory_forward",
    "product_search",
]
