from typing import Any, Dict, List, Optional

import numpy as np

class WildfireRndError(Exception):
    """Base class for every error raised by the package"""
    exit_code = 1

class ConfigError(WildfireRndError):
    exit_code = 2

class DataError(WildfireRndError):
    exit_code = 3

class DependencyError(DataError):
    """A stage was asked to run before the artifact it consumes exists"""

    def __init__(self, stage: str, artifact: str):
        super().__init__(f"stage '{stage}' needs missing artifact {artifact}")
        self.stage = stage
        self.artifact = artifact

class ParameterError(WildfireRndError, ValueError):
    exit_code = 4

class NumericError(WildfireRndError):
    exit_code = 4

class OutOfBandError(NumericError):
    """Price outside the static no-arbitrage band"""

    def __init__(self, bound: str, value: float, limit: float):
        super().__init__(f"price {value:.6g} violates {bound} bound {limit:.6g}")
        self.bound = bound
        self.value = value
        self.limit = limit

class PricingError(NumericError):
    """Fourier integral could not be truncated within tolerance"""

    def __init__(self, message: str, bound: float):
        super().__init__(f"{message} (truncation bound {bound:.3e})")
        self.bound = bound

class ConvergenceError(NumericError):
    def __init__(self, message: str, best_params: Optional[np.ndarray] = None,
                 grad_norm: float = float("nan")):
        super().__init__(f"{message} (gradient norm {grad_norm:.3e})")
        self.best_params = best_params
        self.grad_norm = grad_norm

class RepairError(NumericError):
    def __init__(self, message: str, constraints: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.constraints = constraints or {}

class CalibrationError(NumericError):
    def __init__(self, message: str, diagnostics: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []
