"""Adam optimizer over named parameter lists."""

from __future__ import annotations

import numpy as np

from ..volume import VolumeError


class Adam:
    """Standard Adam with bias correction.

    Holds first/second moment buffers keyed by parameter name; ``step``
    updates the parameter arrays in place.  Zero gradients leave parameters
    bit-identical; the very first step moves each coordinate by exactly
    lr * g / (|g| + eps) (magnitude ~lr), the bias-corrected identity.
    """

    def __init__(
        self,
        params: list[tuple[str, np.ndarray]],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise VolumeError(f"lr must be positive, got {lr}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise VolumeError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._params = list(params)
        self.m = {name: np.zeros_like(arr) for name, arr in self._params}
        self.v = {name: np.zeros_like(arr) for name, arr in self._params}

    def step(self, grads: list[tuple[str, np.ndarray]]) -> None:
        if len(grads) != len(self._params):
            raise VolumeError(
                f"got {len(grads)} gradients for {len(self._params)} parameters"
            )
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for (name, param), (gname, grad) in zip(self._params, grads):
            if name != gname:
                raise VolumeError(
                    f"gradient order mismatch: {gname!r} against parameter {name!r}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_entries(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        """Moment buffers as named arrays for checkpointing."""

        out = []
        for name, _ in self._params:
            out.append((f"{prefix}/m/{name}", self.m[name]))
            out.append((f"{prefix}/v/{name}", self.v[name]))
        return out

    def load_state(self, prefix: str, entries: dict, t: int) -> None:
        for name, _ in self._params:
            self.m[name][...] = entries[f"{prefix}/m/{name}"]
            self.v[name][...] = entries[f"{prefix}/v/{name}"]
        self.t = int(t)
