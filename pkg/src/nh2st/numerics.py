"""Dense float64 kernels, the parameter tree, and the finite-difference checker.

Every learnable operation in the package follows the same pattern: a forward
function that returns its output together with a cache, and a backward function
that maps an upstream gradient to parameter and input gradients.  ``grad_check``
is the single arbiter of whether those hand-derived backward passes are right.
"""

from __future__ import annotations

import struct
from collections.abc import Callable, Iterator, Mapping
from pathlib import Path

import numpy as np

CKPT_MAGIC = "nh2st-ckpt v1"


def as_matrix(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")
    return a @ b


def softmax(v, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(s: np.ndarray, ds: np.ndarray, axis: int = -1) -> np.ndarray:
    return s * (ds - (ds * s).sum(axis=axis, keepdims=True))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def cosine_sim(a, b) -> float:
    """Cosine similarity of two vectors; 0 if either has zero norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return np.where(norms == 0.0, 0.0, a / safe), norms


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``.

    Works on stacked inputs too (``...×R×d``).  Zero rows get similarity 0
    with everything and receive zero gradient.
    """
    ua, na = _unit_rows(a)
    ub, nb = _unit_rows(b)
    s = np.clip(ua @ np.swapaxes(ub, -1, -2), -1.0, 1.0)
    return s, (ua, na, ub, nb)


def cosine_matrix_backward(ds: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray]:
    ua, na, ub, nb = cache
    dua = ds @ ub
    dub = np.swapaxes(ds, -1, -2) @ ua
    da = _unit_backward(ua, na, dua)
    db = _unit_backward(ub, nb, dub)
    return da, db


def _unit_backward(u: np.ndarray, norms: np.ndarray, du: np.ndarray) -> np.ndarray:
    safe = np.where(norms == 0.0, 1.0, norms)
    g = (du - u * (du * u).sum(axis=-1, keepdims=True)) / safe
    return np.where(norms == 0.0, 0.0, g)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParamTree(Mapping):
    """Flat mapping from dotted path to a 2-D float64 matrix.

    Iteration is lexicographic by path.  ``subtree("query.ca.p2g")`` returns
    the leaves below a prefix with the prefix stripped.
    """

    def __init__(self, leaves: Mapping[str, np.ndarray] | None = None):
        self._leaves: dict[str, np.ndarray] = {}
        for path, value in (leaves or {}).items():
            self[path] = value

    def __getitem__(self, path: str) -> np.ndarray:
        return self._leaves[path]

    def __setitem__(self, path: str, value) -> None:
        self._leaves[path] = as_matrix(value)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._leaves))

    def __len__(self) -> int:
        return len(self._leaves)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{p}: {v.shape}" for p, v in self.items())
        return f"ParamTree({shapes})"

    def copy(self) -> ParamTree:
        return ParamTree({p: v.copy() for p, v in self._leaves.items()})

    def zeros_like(self) -> ParamTree:
        return ParamTree({p: np.zeros_like(v) for p, v in self._leaves.items()})

    def subtree(self, prefix: str) -> dict[str, np.ndarray]:
        head = prefix + "."
        return {p[len(head):]: v for p, v in self._leaves.items() if p.startswith(head)}

    def update(self, prefix: str, leaves: Mapping[str, np.ndarray]) -> None:
        for name, value in leaves.items():
            self[f"{prefix}.{name}"] = value

    def size(self) -> int:
        return sum(v.size for v in self._leaves.values())

    def equals(self, other: ParamTree) -> bool:
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[p], other[p]) for p in self)


def accumulate(grads: ParamTree, prefix: str, leaves: Mapping[str, np.ndarray]) -> None:
    """Add ``leaves`` into ``grads`` under ``prefix``, creating entries as needed."""
    for name, g in leaves.items():
        path = f"{prefix}.{name}" if prefix else name
        if path in grads:
            grads[path] = grads[path] + g
        else:
            grads[path] = g


def grad_check(
    f: Callable[[ParamTree], tuple[float, Mapping[str, np.ndarray]]],
    p: ParamTree,
    eps: float = 1e-5,
    paths: list[str] | None = None,
    value_fn: Callable[[ParamTree], float] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` returns ``(value, grads)``; grads is keyed like ``p``.  The error for
    one entry is ``|a - fd| / max(1e-8, |a| + |fd|)``.  ``value_fn``, if given,
    is used for the perturbed evaluations so gradients are not recomputed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if value_fn is None:
        value_fn = lambda q: f(q)[0]  # noqa: E731
    _, analytic = f(p)
    worst = 0.0
    probe = p.copy()
    for path in paths if paths is not None else list(p):
        leaf = probe[path]
        g = np.asarray(analytic[path], dtype=np.float64).reshape(leaf.shape)
        for idx in np.ndindex(leaf.shape):
            orig = leaf[idx]
            leaf[idx] = orig + eps
            fp = value_fn(probe)
            leaf[idx] = orig - eps
            fm = value_fn(probe)
            leaf[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective when perturbing {path}{list(idx)}")
            fd = (fp - fm) / (2.0 * eps)
            a = g[idx]
            err = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
            worst = max(worst, err)
    return worst


def save_checkpoint(params: ParamTree, path: str | Path) -> None:
    lines = [CKPT_MAGIC]
    lines += [f"{name} {leaf.shape[0]} {leaf.shape[1]}" for name, leaf in params.items()]
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    blobs = b"".join(np.ascontiguousarray(leaf, dtype="<f8").tobytes() for leaf in params.values())
    Path(path).write_bytes(header + blobs)


def load_checkpoint(path: str | Path) -> ParamTree:
    raw = Path(path).read_bytes()
    split = raw.find(b"\n\n")
    if split < 0:
        raise ValueError(f"{path}: missing header terminator")
    header = raw[:split].decode("ascii").split("\n")
    if header[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {header[0]!r}")
    offset = split + 2
    leaves = {}
    for line in header[1:]:
        name, rows, cols = line.split(" ")
        count = int(rows) * int(cols)
        nbytes = count * struct.calcsize("<d")
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated data for {name}")
        buf = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        leaves[name] = buf.reshape(int(rows), int(cols)).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return ParamTree(leaves)
