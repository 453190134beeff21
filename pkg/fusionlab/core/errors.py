from typing import Optional


class FusionLabError(Exception):
    """Base class for every error raised by fusionlab"""


class ConfigError(FusionLabError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class GeometryError(FusionLabError):
    pass


class DatasetError(FusionLabError):
    def __init__(self, message: str, path: Optional[str] = None,
                 line: Optional[int] = None, offset: Optional[int] = None):
        self.path = path
        self.line = line
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line} (scene {line - 1})")
        if offset is not None:
            where.append(f"byte offset {offset}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class MaskError(FusionLabError):
    pass


class MatchingError(FusionLabError):
    pass


class DecoderError(FusionLabError):
    pass


class TrainingError(FusionLabError):
    def __init__(self, message: str, step: Optional[int] = None, **diagnostics):
        self.step = step
        self.diagnostics = diagnostics
        details = ", ".join(f"{k}={v}" for k, v in sorted(diagnostics.items()))
        text = message if step is None else f"step {step}: {message}"
        super().__init__(f"{text} ({details})" if details else text)


class WeightsError(FusionLabError):
    pass


class DepthError(FusionLabError):
    pass


class EvaluationError(FusionLabError):
    pass
