import os
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

PACKAGE_DIR = Path(__file__).resolve().parent
BUNDLED_CORPUS = PACKAGE_DIR / "data" / "tiny.txt"

PKM_THREADS = int(os.getenv("PKM_THREADS", str(os.cpu_count() or 1)))
PKM_FLAT_CEILING = int(os.getenv("PKM_FLAT_CEILING", str(2 ** 18)))
PKM_LOG_LEVEL = os.getenv("PKM_LOG_LEVEL", "INFO").upper()
PKM_DATA = os.getenv("PKM_DATA", str(BUNDLED_CORPUS))

# Batch norm defaults for the query networks
BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5

# Optimizer defaults
LR_MAIN = 2.5e-4
LR_VALUES = 1e-3
ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-9
VALUE_ADAM_EPS = 1e-8
WARMUP_STEPS = 400
CLIP_NORM = 5.0


def worker_count() -> int:
    """Thread/worker cap, never below one."""
    return max(1, PKM_THREADS)
