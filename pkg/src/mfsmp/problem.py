"""A controlled mean-field chain together with its cost."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import GeneratorMatrix, InitialLaw, Intensity
from .cost import CostSpec


@dataclass(frozen=True)
class ControlProblem:
    """Everything the adjoint machinery needs besides a control.

    ``kappa`` is the functional whose mean enters the intensities (ignored for
    mean-free intensities); ``bounds`` is the control set U = [lo, hi].
    """

    intensity: Intensity
    G: GeneratorMatrix
    cost: CostSpec
    law: InitialLaw
    horizon: float
    kappa: object = None
    bounds: tuple[float, float] = (0.0, np.inf)
    name: str = "custom"

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if not self.bounds[0] <= self.bounds[1]:
            raise ValueError("control bounds must satisfy lo <= hi")
        if self.intensity.uses_mean and self.kappa is None:
            raise ValueError("a mean-dependent intensity needs kappa")

    @property
    def states(self) -> np.ndarray:
        return self.G.states
