"""Named parameter collections and the finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, backward
from .checkpoint import load_arrays, save_arrays


class ParamStore:
    """Ordered mapping of unique names to trainable tensors."""

    def __init__(self):
        self._t: dict[str, Tensor] = {}
        self.version = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._t:
            raise KeyError(f"parameter {name!r} registered twice")
        t = value if isinstance(value, Tensor) else Tensor(np.array(value, dtype=np.float64))
        t.requires_grad = True
        self._t[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._t[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self._t

    def __len__(self) -> int:
        return len(self._t)

    def __iter__(self):
        return iter(self._t)

    def names(self) -> list[str]:
        return list(self._t)

    def items(self):
        return self._t.items()

    def values(self):
        return self._t.values()

    def view(self, prefix: str) -> "ParamView":
        return ParamView(self, prefix)

    def num_params(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self._t.items() if n.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        for t in self._t.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        self.version += 1
        return self

    def freeze(self) -> "ParamStore":
        for t in self._t.values():
            t.requires_grad = False
        return self

    def state(self) -> dict:
        return {n: t.data for n, t in self._t.items()}

    def load_state(self, arrays: dict, strict: bool = True, prefix_map=None) -> None:
        """Copy arrays into registered tensors, checking shapes.

        ``prefix_map`` optionally renames source prefixes, e.g.
        ``{"enc.": "enc."}``; names outside it are ignored when given.
        """
        if prefix_map is not None:
            renamed = {}
            for src, dst in prefix_map.items():
                for n, a in arrays.items():
                    if n.startswith(src):
                        renamed[dst + n[len(src):]] = a
            arrays = renamed
        for n, a in arrays.items():
            if n not in self._t:
                if strict:
                    raise KeyError(f"unexpected tensor {n!r} in checkpoint")
                continue
            t = self._t[n]
            if t.data.shape != tuple(a.shape):
                raise ValueError(f"shape mismatch for {n!r}: store {t.data.shape}, checkpoint {a.shape}")
            t.data = np.array(a, dtype=t.data.dtype)
        if strict:
            missing = [n for n in self._t if n not in arrays]
            if missing:
                raise KeyError(f"checkpoint lacks tensor {missing[0]!r}")
        self.version += 1

    def save(self, path, meta: dict | None = None) -> None:
        save_arrays(path, self.state(), meta)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        arrays, meta = load_arrays(path)
        store = cls()
        for n, a in arrays.items():
            store.add(n, Tensor(a))
        return store, meta


class ParamView:
    """Read-only prefix view: ``view["w"]`` resolves ``prefix + ".w"``."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    def __contains__(self, name: str) -> bool:
        return f"{self.prefix}.{name}" in self.store

    def view(self, sub: str) -> "ParamView":
        return ParamView(self.store, f"{self.prefix}.{sub}")


def finite_difference_check(f, params: ParamStore, h: float = 1e-5, n_coords: int | None = 32,
                            rng: np.random.Generator | None = None, floor: float = 1e-7,
                            names=None) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` takes no arguments and returns a scalar Tensor built from
    ``params``.  ``n_coords`` coordinates are sampled per tensor (all of
    them when None or when the tensor is smaller).
    """
    if h <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    rng = rng or np.random.default_rng(0)
    first, second = f(), f()
    if not np.array_equal(first.data, second.data):
        raise ValueError("finite_difference_check: f is not deterministic")
    params.zero_grad()
    backward(first, params)
    worst = 0.0
    for name in names or params.names():
        t = params[name]
        flat = t.data.reshape(-1)
        if n_coords is None or flat.size <= n_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        analytic = t.grad.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = float(f().data)
            flat[c] = orig - h
            down = float(f().data)
            flat[c] = orig
            num = (up - down) / (2.0 * h)
            a = float(analytic[c])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
