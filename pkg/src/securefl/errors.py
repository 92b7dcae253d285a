"""Exception types shared across the protocol layers."""


class ProtocolError(RuntimeError):
    """A multi-party protocol was aborted.

    ``party`` names the participant responsible when known (e.g. the node
    that dropped out).
    """

    def __init__(self, message: str, party: str | None = None):
        super().__init__(message)
        self.party = party


class TransportError(ProtocolError):
    """The message layer failed: closed session, timeout, peer gone."""


class FrameError(ProtocolError):
    """A malformed or unexpected wire frame."""


class VersionMismatch(ProtocolError):
    pass


class MaterialExhausted(ProtocolError):
    """Preprocessing material (triples, comparison masks) ran out."""


class DegenerateInputError(ValueError):
    """Input is well-typed but admits no meaningful answer (empty data, N = 0)."""


_WIRE = {c.__name__: c for c in (ProtocolError, TransportError, FrameError, VersionMismatch, MaterialExhausted)}


def error_payload(exc: BaseException) -> bytes:
    """ERROR frame body: ``<ExceptionClass>: <message>``."""
    name = type(exc).__name__ if type(exc).__name__ in _WIRE else "ProtocolError"
    return f"{name}: {exc}".encode()


def remote_error(payload: bytes, party: str | None = None) -> ProtocolError:
    """Rebuild the typed exception a peer reported in an ERROR frame."""
    text = payload.decode(errors="replace")
    name, _, msg = text.partition(": ")
    cls = _WIRE.get(name)
    if cls is None:
        cls, msg = ProtocolError, text
    return cls(f"peer {party} aborted: {msg}", party=party)
