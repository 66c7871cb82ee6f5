"""
Explanation Lab - Error Types
Exception hierarchy shared by every module. Each concrete error also derives
from the matching builtin so callers can catch ``ValueError`` etc.
"""

from typing import Any, Dict, Optional


class ExplanationLabError(Exception):
    """Base class for all library errors"""


class DimensionError(ExplanationLabError, ValueError):
    """Shape mismatch between a tensor and what an operation expects"""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


class ClassIndexError(ExplanationLabError, IndexError):
    """Class index outside [0, K)"""


class ActivationKindError(ExplanationLabError, ValueError):
    """Operation needs a different hidden activation than the network has"""


class NonSmoothNetworkError(ActivationKindError):
    """Second-order quantities requested on a relu network"""

    def __init__(self, operation: str):
        super().__init__(f"{operation}: non-smooth surrogate required (relu'' = 0); use with_activation(net, Activation.softplus(beta))")


class DimensionGuardError(ExplanationLabError, ValueError):
    """Dense matrix requested for an input dimension above the guard"""


class AsymmetricMatrixError(ExplanationLabError, ValueError):
    """Matrix expected to be symmetric is not"""

    def __init__(self, asymmetry: float, tolerance: float):
        self.asymmetry = asymmetry
        super().__init__(f"matrix asymmetry {asymmetry:.3e} exceeds {tolerance:.1e}")


class DegenerateMapError(ExplanationLabError, ValueError):
    """Map cannot be sum-normalized (zero sum or negative entries)"""


class UndefinedCorrelationError(ExplanationLabError, ValueError):
    """Pearson correlation of a zero-variance input"""


class VanishingGradientError(ExplanationLabError, ArithmeticError):
    """Gradient norm too small to define a unit normal"""

    def __init__(self, gradient_norm: float, threshold: float):
        self.gradient_norm = gradient_norm
        super().__init__(f"gradient norm {gradient_norm:.3e} <= {threshold:.1e}; normal undefined")


class MissingMethodInputError(ExplanationLabError, ValueError):
    """Method needs an input (IG baseline, PA patterns) that was not supplied"""


class EmptyDatasetError(ExplanationLabError, ValueError):
    """Dataset without samples"""


class LabelRangeError(ExplanationLabError, ValueError):
    """Label not below the class count"""


class IdxFormatError(ExplanationLabError, ValueError):
    """Malformed IDX file"""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)


class WeightsFileError(ExplanationLabError, ValueError):
    """Weights manifest or blob does not validate"""


class AttackDivergedError(ExplanationLabError, ArithmeticError):
    """Manipulation loss became non-finite"""

    def __init__(self, iteration: int, beta: float, components: Dict[str, Any]):
        self.iteration = iteration
        self.beta = beta
        self.components = components
        parts = ", ".join(f"{name}={value!r}" for name, value in components.items())
        super().__init__(f"non-finite loss at iteration {iteration} (beta={beta:.4g}): {parts}")


class ConfigError(ExplanationLabError, ValueError):
    """Invalid experiment configuration"""
