from .elliptic import Elliptic1dModel, KlExpansion, kl_build
from .toys import QuadraticToyModel

__all__ = ["Elliptic1dModel", "KlExpansion", "kl_build", "QuadraticToyModel"]
