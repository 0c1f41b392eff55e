"""Entity-aware neural re-ranking over BM25 candidates, sized for a laptop CPU."""
from .model import AblationFlags, RegentConfig, RegentModel, backward, fuse
from .trec import RankedRun

__all__ = ["AblationFlags", "RegentConfig", "RegentModel", "RankedRun", "backward", "fuse"]
__version__ = "0.1.0"
