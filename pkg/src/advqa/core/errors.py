"""Exception hierarchy shared across the toolkit."""


class AdvqaError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatchError(AdvqaError):
    """Two tensors that must agree in shape do not."""

    def __init__(self, shape_a, shape_b, what: str = "tensors"):
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{what} have mismatched shapes {self.shape_a} vs {self.shape_b}")


class ConfigError(AdvqaError):
    """Invalid configuration value, key, or combination."""


class CapabilityError(AdvqaError):
    """An adapter lacks a capability required by the requested operation."""


class DatasetError(AdvqaError):
    """Dataset or report file is malformed or unusable."""


class TemplateError(AdvqaError):
    """Masked-template construction failed for every answer."""


class EmbeddingError(AdvqaError):
    """A sentence or word embedding is degenerate (zero norm)."""


class LlmUnavailableError(AdvqaError):
    """The LLM endpoint could not produce a usable reply."""


class NonFiniteError(AdvqaError):
    """A loss or gradient became non-finite mid-run; carries the trace so far."""

    def __init__(self, message: str, trace=None):
        self.trace = trace
        super().__init__(message)
