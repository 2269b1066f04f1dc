"""Exception types shared across the package."""


class AspdError(Exception):
    """Base class for all errors raised by this package."""


class LayoutError(AspdError, ValueError):
    """Malformed block list or invalid layout argument."""


class ModeError(LayoutError):
    """Operation not permitted in the layout's current serial/parallel mode."""


class BranchStateError(LayoutError):
    """Token or close request for a branch that is not active."""


class MaskError(AspdError, ValueError):
    pass


class ConfigError(AspdError, ValueError):
    pass


class ShapeError(AspdError, ValueError):
    pass


class CacheDesyncError(AspdError, RuntimeError):
    """KV cache length no longer matches the layout it mirrors."""


class ProtocolError(AspdError):
    pass


class SamplingError(AspdError, ValueError):
    pass


class TaggedSyntaxError(AspdError, ValueError):
    """Tagged response text does not follow the group grammar.

    ``offset`` is the character offset where parsing stopped and ``expected``
    names what the parser wanted to see there.
    """

    def __init__(self, message: str, offset: int, expected: str):
        super().__init__(f"{message} at offset {offset} (expected {expected})")
        self.offset = offset
        self.expected = expected


class JudgeTransportError(AspdError, RuntimeError):
    """A judge backend call failed; the caller may retry."""


class ResponseError(AspdError, ValueError):
    """A structured response violates its own invariants and cannot be serialized."""
