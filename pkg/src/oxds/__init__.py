"""Open cross-domain visual search on precomputed features.

Each domain gets its own mapper onto fixed category prototypes on the unit
sphere, so any domain can be searched from any other without joint training.
"""

from .errors import OxdsError, ValidationError
from .hypersphere import angle, cosine_distance, normalize, slerp, spherical_average
from .itq import BitCode, ItqModel, fit_itq, hamming_search
from .mapper import DomainMapper, TrainConfig, batch_gradient, batch_loss, posterior, train
from .metrics import RelevanceList, average_precision, evaluate
from .prototypes import PrototypeBook, exemplar_prototype, load_prototypes, refine_support
from .search import GalleryIndex, classify, refine_query, search
from .synth import SynthConfig, generate

__version__ = "0.1.0"

__all__ = [
    "OxdsError", "ValidationError",
    "angle", "cosine_distance", "normalize", "slerp", "spherical_average",
    "BitCode", "ItqModel", "fit_itq", "hamming_search",
    "DomainMapper", "TrainConfig", "batch_gradient", "batch_loss", "posterior", "train",
    "RelevanceList", "average_precision", "evaluate",
    "PrototypeBook", "exemplar_prototype", "load_prototypes", "refine_support",
    "GalleryIndex", "classify", "refine_query", "search",
    "SynthConfig", "generate",
]
