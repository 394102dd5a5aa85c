from typing import Optional, Sequence


class CamaError(RuntimeError):
    pass


class ShapeError(CamaError, ValueError):
    def __init__(self, node: str, expected: Sequence[int], got: Sequence[int], detail: str = ''):
        self.node = node
        self.expected = tuple(expected)
        self.got = tuple(got)
        message = f'Shape mismatch at node "{node}": {self.expected} vs {self.got}'
        if detail:
            message = f'{message} ({detail})'
        super().__init__(message)


class NonFiniteError(CamaError):
    def __init__(self, node: str, message: Optional[str] = None):
        self.node = node
        super().__init__(message or f'Non-finite value produced by node "{node}"')


class GraphError(CamaError):
    pass


class MaskError(CamaError):
    pass


class BatchError(CamaError, ValueError):
    pass


class FormatError(CamaError):
    pass


class ConfigError(CamaError, ValueError):
    pass


class SchemaError(CamaError):
    pass


class MechanismMismatchError(CamaError):
    pass
