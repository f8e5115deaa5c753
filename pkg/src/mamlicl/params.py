"""Named parameter collections and the live-set audit used for memory accounting."""

from __future__ import annotations

import hashlib
import weakref
from contextlib import contextmanager

import numpy as np

from .autodiff import Tensor


class ParamAudit:
    """Counts simultaneously live ``Params`` objects while active."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.created = 0

    def _born(self, obj):
        self.live += 1
        self.created += 1
        self.peak = max(self.peak, self.live)
        weakref.finalize(obj, self._died)

    def _died(self):
        self.live -= 1


_active_audit: ParamAudit | None = None


@contextmanager
def audit_params():
    global _active_audit
    prev, _active_audit = _active_audit, ParamAudit()
    try:
        yield _active_audit
    finally:
        _active_audit = prev


class Params(dict):
    """name -> Tensor.  One instance is one full parameter set (θ, an adapted θᵢ, ...)."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        if _active_audit is not None:
            _active_audit._born(self)

    @classmethod
    def from_arrays(cls, arrays) -> Params:
        return cls({k: Tensor(np.array(v, dtype=np.float64)) for k, v in arrays.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def detach(self) -> Params:
        return Params({k: v.detach() for k, v in self.items()})

    def copy(self) -> Params:
        return Params({k: Tensor(v.data.copy()) for k, v in self.items()})

    def num_elements(self) -> int:
        return sum(v.size for v in self.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self[k].data, dtype="<f8").tobytes())
        return h.hexdigest()
