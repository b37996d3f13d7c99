class HeError(Exception):
    """Base class for backend failures."""


class ParamError(HeError, ValueError):
    pass


class DepthExhaustedError(HeError):
    """A multiplication was requested on a ciphertext with no level left."""


class KeyMismatchError(HeError):
    pass


class SlotMismatchError(HeError, ValueError):
    pass


class RefreshDisabledError(HeError):
    """Refresh attempted outside an allowed scope while strict mode is on."""


class MissingKeyError(HeError):
    pass
