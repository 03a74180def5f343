import enum
import math
from dataclasses import dataclass
from typing import FrozenSet, Optional

import numpy as np

from fbsdex.exceptions import DimensionError
from fbsdex.paths import PathBundle

__all__ = [
    'EndowmentKind',
    'Endowment',
]


class EndowmentKind(enum.Enum):
    NONE = 'none'
    CONSTANT = 'constant'
    LINEAR = 'linear'
    AFFINE_TANH = 'affine_tanh'
    CALL = 'call'


@dataclass(frozen=True)
class Endowment:
    """
    Terminal endowment H as a tagged functional of one terminal Brownian value W^i_T

        constant     a
        linear       a + b W^i_T
        affine_tanh  a + b tanh(c W^i_T)
        call         min((W^i_T - strike)^+, cap)
    """
    kind: EndowmentKind = EndowmentKind.NONE
    component: int = 0
    a: float = 0.0
    b: float = 0.0
    c: float = 1.0
    strike: float = 0.0
    cap: Optional[float] = None

    @classmethod
    def none(cls) -> 'Endowment':
        return cls()

    @property
    def is_zero(self) -> bool:
        if self.kind is EndowmentKind.NONE:
            return True

        if self.kind is EndowmentKind.CONSTANT:
            return self.a == 0.0

        return False

    @property
    def components(self) -> FrozenSet[int]:
        """
        Brownian components the endowment reads
        """
        if self.kind in (EndowmentKind.NONE, EndowmentKind.CONSTANT):
            return frozenset()

        if self.kind in (EndowmentKind.LINEAR, EndowmentKind.AFFINE_TANH) and self.b == 0.0:
            return frozenset()

        return frozenset([self.component])

    @property
    def bound(self) -> float:
        """
        sup |H|, infinite for unbounded functionals
        """
        if self.kind is EndowmentKind.NONE:
            return 0.0

        if self.kind is EndowmentKind.CONSTANT:
            return abs(self.a)

        if self.kind is EndowmentKind.LINEAR:
            return abs(self.a) if self.b == 0.0 else math.inf

        if self.kind is EndowmentKind.AFFINE_TANH:
            return abs(self.a) + abs(self.b)

        return math.inf if self.cap is None else abs(self.cap)

    def evaluate(self, bundle: PathBundle) -> np.ndarray:
        """
        H per path, shape (M,)
        """
        if self.components and self.component >= bundle.dim:
            raise DimensionError(
                f'Endowment reads component {self.component} of a {bundle.dim}-dimensional Brownian motion'
            )

        if self.kind is EndowmentKind.NONE:
            return np.zeros(bundle.n_paths)

        if self.kind is EndowmentKind.CONSTANT or not self.components:
            return np.full(bundle.n_paths, float(self.a))

        w = bundle.levels[:, -1, self.component]

        if self.kind is EndowmentKind.LINEAR:
            return self.a + self.b * w

        if self.kind is EndowmentKind.AFFINE_TANH:
            return self.a + self.b * np.tanh(self.c * w)

        payoff = np.maximum(w - self.strike, 0.0)

        return payoff if self.cap is None else np.minimum(payoff, self.cap)

    def describe(self) -> dict:
        return {
            'kind': self.kind.value,
            'component': self.component,
            'a': self.a,
            'b': self.b,
            'c': self.c,
            'strike': self.strike,
            'cap': self.cap,
        }
