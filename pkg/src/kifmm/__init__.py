"""Kernel-independent fast multipole method for the 3D Laplace kernel."""
import warnings

# numba falls back to its own thread pool when the system TBB is too old; the
# notice is noise for users of this package
warnings.filterwarnings("ignore", message="The TBB threading layer")

from .fmm import Fmm, FmmConfig, FmmState, direct, relative_error, run
from .generators import Distribution, sample
from .lists import InteractionLists, build_lists
from .morton import Domain
from .operators import OperatorCache, precompute
from .persistence import load_cache, save_cache
from .tree import LinearTree, ParticleSet, build_tree

__version__ = "0.1.0"

__all__ = [
    "Domain", "Distribution", "Fmm", "FmmConfig", "FmmState", "InteractionLists",
    "LinearTree", "OperatorCache", "ParticleSet", "build_lists", "build_tree", "direct",
    "load_cache", "precompute", "relative_error", "run", "sample", "save_cache",
]
