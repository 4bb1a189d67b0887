"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ParplanError(Exception):
    exit_code = 1


class InputError(ParplanError):
    """Malformed or inconsistent model/cluster/plan input."""

    exit_code = 1


class ModelError(InputError):
    def __init__(self, reason, node=None):
        self.node = node
        self.reason = reason
        msg = f"{node}: {reason}" if node is not None else reason
        super().__init__(msg)


class UnprofiledOperatorError(InputError):
    def __init__(self, op_id, kind):
        self.op_id = op_id
        super().__init__(f"operator {op_id!r} of kind {kind!r} has no flop estimate; "
                         f"give an explicit 'flop' field")


class PlanningError(ParplanError):
    """The planner could not produce a plan for the given inputs."""

    exit_code = 2


class InsufficientDevicesError(PlanningError):
    def __init__(self, available, requested):
        self.available = available
        self.requested = requested
        super().__init__(f"insufficient devices: {available} available, "
                         f"{requested} requested by the task graphs")


class InfeasibleError(PlanningError):
    def __init__(self, message, overload=None):
        self.overload = dict(overload or {})
        super().__init__(message)


class UnsupportedSplitError(PlanningError):
    def __init__(self, op_id, kind):
        self.op_id = op_id
        super().__init__(f"no sharding pattern matches operator {op_id!r} (kind {kind!r})")


class UnsplittableDimensionError(PlanningError):
    def __init__(self, tensor_id, dim, size, k):
        self.tensor_id = tensor_id
        super().__init__(f"tensor {tensor_id!r} dim {dim} has size {size} < {k} shards")


class MissingBatchDimError(PlanningError):
    def __init__(self, tensor_id):
        self.tensor_id = tensor_id
        super().__init__(f"boundary tensor {tensor_id!r} has no batch_dim but a batch gather is required")
