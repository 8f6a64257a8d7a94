"""Deterministic random streams.

All randomness in the library flows through :class:`Rng`, a thin wrapper
around numpy's PCG64 generator (a permuted-congruential, i.e. LCG-family,
generator with a platform-stable sequence). Child streams are derived from
integer keys so that e.g. per-sample augmentation noise depends only on
(seed, epoch, sample index), never on scheduling order.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """Seeded PCG64 stream. Identical seed + key path => identical sequence."""

    def __init__(self, seed: int, _ss: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._ss = _ss if _ss is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._ss))

    def child(self, *keys: int) -> "Rng":
        """Derive an independent stream keyed by integers, e.g. (epoch, index).
        Keys compose: a.child(1).child(2) != a.child(2).child(1)."""
        spawn = tuple(self._ss.spawn_key) + tuple(int(k) for k in keys)
        ss = np.random.SeedSequence(entropy=self._ss.entropy, spawn_key=spawn)
        return Rng(self.seed, _ss=ss)

    # -- sampling helpers (thin passthroughs) --

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def truncated_normal(self, size, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) with rejection outside +/- bound*std."""
        out = self._gen.normal(0.0, std, size)
        bad = np.abs(out) > bound * std
        while np.any(bad):
            out[bad] = self._gen.normal(0.0, std, int(bad.sum()))
            bad = np.abs(out) > bound * std
        return out

    def state(self) -> dict:
        """JSON-serializable generator state (for checkpointing)."""
        st = self._gen.bit_generator.state
        return {
            "algorithm": st["bit_generator"],
            "state": str(st["state"]["state"]),
            "inc": str(st["state"]["inc"]),
            "has_uint32": st["has_uint32"],
            "uinteger": st["uinteger"],
            "seed": self.seed,
        }

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = {
            "bit_generator": state["algorithm"],
            "state": {"state": int(state["state"]), "inc": int(state["inc"])},
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        self.seed = int(state.get("seed", self.seed))
