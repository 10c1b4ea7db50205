class ActionTxError(Exception):
    pass


class ShapeMismatchError(ActionTxError):

    def __init__(self, expected_shape, actual_shape, op="op"):
        super().__init__(
            f"ShapeMismatchError(op={op}, expected_shape={tuple(expected_shape)}, "
            f"actual_shape={tuple(actual_shape)})"
        )
        self.expected_shape = tuple(expected_shape)
        self.actual_shape = tuple(actual_shape)
        self.op = op


class NonScalarLossError(ActionTxError):

    def __init__(self, shape):
        super().__init__(f"NonScalarLossError(shape={tuple(shape)})")
        self.shape = tuple(shape)


class NonDeterministicGraphError(ActionTxError):

    def __init__(self, op_ids):
        super().__init__(f"NonDeterministicGraphError(op_ids={list(op_ids)})")
        self.op_ids = list(op_ids)


class GeometryError(ActionTxError):
    pass


class PoolingError(ActionTxError):

    def __init__(self, box, feature_box):
        super().__init__(f"PoolingError(box={tuple(box)}, feature_box={tuple(feature_box)})")
        self.box = tuple(box)
        self.feature_box = tuple(feature_box)


class ConfigError(ActionTxError):

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class CheckpointError(ActionTxError):
    pass


class CheckpointConfigMismatch(CheckpointError):

    def __init__(self, expected_hash, actual_hash):
        super().__init__(
            f"CheckpointConfigMismatch(expected_hash={expected_hash}, actual_hash={actual_hash})"
        )
        self.expected_hash = expected_hash
        self.actual_hash = actual_hash


class TruncatedRecordError(CheckpointError):

    def __init__(self, expected, partial):
        super().__init__(
            f"TruncatedRecordError(expected={expected}, partial_length={len(partial)})"
        )
        self.expected = expected
        self.partial = partial


class BadMagicError(CheckpointError):

    def __init__(self, expected, actual):
        super().__init__(f"BadMagicError(expected={expected!r}, actual={actual!r})")
        self.expected = expected
        self.actual = actual


class InvalidTargetError(ActionTxError):

    def __init__(self, values):
        super().__init__(f"InvalidTargetError(values={sorted(set(values))})")
        self.values = sorted(set(values))


class SceneError(ActionTxError):
    pass


class NonFiniteLossError(ActionTxError):

    def __init__(self, step, lr, losses, grad_norms):
        super().__init__(f"NonFiniteLossError(step={step}, lr={lr})")
        self.step = step
        self.lr = lr
        self.losses = dict(losses)
        self.grad_norms = dict(grad_norms)


def interpret_error(exception):

    if isinstance(exception, ConfigError):
        return f"Invalid configuration for `{exception.field}`: {exception.message}"
    elif isinstance(exception, ShapeMismatchError):
        return f"Shape mismatch in `{exception.op}`: expected {exception.expected_shape} " + \
            f"but got {exception.actual_shape}."
    elif isinstance(exception, NonScalarLossError):
        return f"Loss must be a scalar but has shape {exception.shape}."
    elif isinstance(exception, NonDeterministicGraphError):
        return "Graph is not deterministic: live dropout without a fixed mask in " + \
            f"{exception.op_ids}. Pass a RunContext or switch to eval mode."
    elif isinstance(exception, CheckpointConfigMismatch):
        return "Checkpoint was written for a different model configuration " + \
            f"(checkpoint {exception.actual_hash[:12]}, config {exception.expected_hash[:12]})."
    elif isinstance(exception, TruncatedRecordError):
        return f"File is truncated: expected {exception.expected} bytes " + \
            f"but only {len(exception.partial)} were available."
    elif isinstance(exception, BadMagicError):
        return f"Not a recognised file: expected magic {exception.expected!r} " + \
            f"but found {exception.actual!r}."
    elif isinstance(exception, InvalidTargetError):
        return f"Classification targets must be 0 or 1 but include {exception.values}."
    elif isinstance(exception, NonFiniteLossError):
        norms = ", ".join(f"{name}={value:.3g}" for name, value in exception.grad_norms.items())
        return f"Loss became non-finite at step {exception.step} (lr={exception.lr:.4g}). " + \
            f"Gradient norms: {norms or 'unavailable'}."
    elif isinstance(exception, (GeometryError, PoolingError, SceneError, CheckpointError)):
        return str(exception)
    elif isinstance(exception, FileNotFoundError):
        return f"File not found: {exception.filename}"
    elif isinstance(exception, OSError):
        return f"I/O error on {exception.filename}: {exception.strerror}"

    return f"Cannot interpret {exception}, {type(exception)=}"
