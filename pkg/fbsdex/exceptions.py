from typing import List, Sequence

__all__ = [
    'FbsdexError',
    'ConfigValidationError',
    'ConstructionError',
    'DimensionError',
    'DomainError',
    'AllocationError',
    'IntegrationError',
    'IllConditionedBasisError',
    'ImplicitStepError',
    'IterationDivergedError',
    'InfeasibleError',
    'InsufficientSampleError',
    'NotApplicableError',
    'CacheDecodeError',
]


class FbsdexError(Exception):
    pass


class ConfigValidationError(FbsdexError, ValueError):
    def __init__(self, message: str, path: str = ''):
        self.path = path
        super().__init__(f'{path}: {message}' if path else message)


class ConstructionError(FbsdexError, ValueError):
    pass


class DimensionError(FbsdexError, ValueError):
    pass


class DomainError(FbsdexError, ValueError):
    pass


class AllocationError(FbsdexError, MemoryError):
    pass


class IntegrationError(FbsdexError):
    def __init__(self, message: str, *, path: int, step: int):
        self.path = path
        self.step = step
        super().__init__(f'{message} (path {path}, step {step})')


class IllConditionedBasisError(FbsdexError):
    def __init__(self, *, node: int, condition: float):
        self.node = node
        self.condition = condition
        super().__init__(
            f'Regression design matrix at node {node} has condition number {condition:.3e}'
        )


class ImplicitStepError(FbsdexError):
    def __init__(self, message: str, *, node: int, path: int):
        self.node = node
        self.path = path
        super().__init__(f'{message} (node {node}, path {path})')


class IterationDivergedError(FbsdexError):
    def __init__(self, residuals: Sequence[float]):
        self.residuals: List[float] = list(residuals)
        super().__init__(
            f'Picard iteration diverged after {len(self.residuals)} iterations, '
            f'last residual {self.residuals[-1]:.3e}'
        )


class InfeasibleError(FbsdexError):
    pass


class InsufficientSampleError(FbsdexError):
    pass


class NotApplicableError(FbsdexError):
    pass


class CacheDecodeError(FbsdexError):
    pass
