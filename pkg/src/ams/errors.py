class AMSError(Exception):
    """Base class for runtime errors."""


class ConfigError(AMSError):
    pass


class CollisionError(AMSError):
    """Two different actions hashed to the same virtual-action id."""


class UnknownId(AMSError, KeyError):
    pass


class UnknownBlob(AMSError, KeyError):
    pass


class CapacityError(AMSError):
    pass


class EmptyBuffer(AMSError):
    pass


class HandlerFailure(AMSError):
    """Rollback raised a hardware exception twice in a row."""


class PolicyError(AMSError):
    pass
