"""Hankel matrices, persistency of excitation and trajectory span checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lti import LtiSystem, ShapeError, numerical_rank, simulate


class DepthError(ValueError):
    """Hankel depth exceeds the sequence length."""


class PreconditionError(ValueError):
    pass


def _as_samples(seq) -> np.ndarray:
    arr = np.array(seq, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"expected a non-empty sequence of vectors, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class HankelMatrix:
    """Depth-L Hankel matrix; block row i, column j holds sample i + j."""

    data: np.ndarray
    depth: int
    samples: int
    block_dim: int

    @property
    def columns(self) -> int:
        return self.samples - self.depth + 1

    def block(self, i: int) -> np.ndarray:
        """Rows of lag ``i`` (a ``block_dim x columns`` slice)."""
        q = self.block_dim
        return self.data[i * q:(i + 1) * q]


def build_hankel(seq, depth: int) -> HankelMatrix:
    x = _as_samples(seq)
    N, q = x.shape
    if depth < 1:
        raise DepthError(f"depth must be >= 1, got {depth}")
    if depth > N:
        raise DepthError(f"depth {depth} exceeds sequence length {N}")
    cols = N - depth + 1
    # column j is the flattened window x[j:j+depth]
    windows = np.lib.stride_tricks.sliding_window_view(x, (depth, q))[:, 0]
    data = windows.reshape(cols, depth * q).T.copy()
    data.setflags(write=False)
    return HankelMatrix(data=data, depth=depth, samples=N, block_dim=q)


def hankel_rank(u, order: int) -> int:
    u = _as_samples(u)
    if order < 1 or order > u.shape[0]:
        return 0
    return numerical_rank(build_hankel(u, order).data)


def is_persistently_exciting(u, order: int) -> bool:
    """True iff the depth-``order`` Hankel matrix of ``u`` has full row rank.

    Impossible shapes (too few samples for ``m * order`` independent columns)
    return False without a rank computation.
    """
    u = _as_samples(u)
    N, m = u.shape
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if N < order or N - order + 1 < m * order:
        return False
    return hankel_rank(u, order) == m * order


def max_pe_order(u) -> int:
    """Largest order for which ``u`` is persistently exciting (0 if none)."""
    u = _as_samples(u)
    N, m = u.shape
    order = 0
    # PE is monotone in the order, so stop at the first failure
    while order + 1 <= N and is_persistently_exciting(u, order + 1):
        order += 1
    return order


@dataclass(frozen=True)
class OfflineDataset:
    """Noise-free offline record of inputs, states and outputs."""

    inputs: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    pe_order_certified: int

    def __post_init__(self):
        lens = {self.inputs.shape[0], self.states.shape[0], self.outputs.shape[0]}
        if len(lens) != 1:
            raise ShapeError(f"inputs, states and outputs differ in length: {sorted(lens)}")
        for arr in (self.inputs, self.states, self.outputs):
            arr.setflags(write=False)

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def p(self) -> int:
        return self.outputs.shape[1]

    def hankels(self, depth: int) -> tuple[HankelMatrix, HankelMatrix, HankelMatrix]:
        """(H(u), H(y), H(x)) of the given depth."""
        return (
            build_hankel(self.inputs, depth),
            build_hankel(self.outputs, depth),
            build_hankel(self.states, depth),
        )


def make_dataset(inputs, states, outputs) -> OfflineDataset:
    u, x, y = _as_samples(inputs), _as_samples(states), _as_samples(outputs)
    return OfflineDataset(
        inputs=u.copy(), states=x.copy(), outputs=y.copy(), pe_order_certified=max_pe_order(u)
    )


def check_consistency(sys: LtiSystem, inputs, states, outputs, tol: float = 1e-12) -> int | None:
    """Index of the first sample breaking the system recursion, or None.

    Row k fails when x(k+1) != A x(k) + B u(k) or y(k) != C x(k) + D u(k)
    beyond ``tol`` relative to the sample magnitude.
    """
    u, x, y = _as_samples(inputs), _as_samples(states), _as_samples(outputs)
    if u.shape[1] != sys.m or x.shape[1] != sys.n or y.shape[1] != sys.p:
        raise ShapeError(
            f"dataset dims (m={u.shape[1]}, n={x.shape[1]}, p={y.shape[1]}) "
            f"do not match the system (m={sys.m}, n={sys.n}, p={sys.p})"
        )
    x_next = x[:-1] @ sys.A.T + u[:-1] @ sys.B.T
    y_pred = x @ sys.C.T + u @ sys.D.T
    scale = 1.0 + np.max(np.abs(np.hstack([u, x, y])), axis=1)
    bad_x = np.max(np.abs(x[1:] - x_next), axis=1) > tol * scale[1:]
    bad_y = np.max(np.abs(y - y_pred), axis=1) > tol * scale
    bad = np.zeros(len(u), dtype=bool)
    bad[:-1] |= bad_x
    bad |= bad_y
    idx = np.flatnonzero(bad)
    return int(idx[0]) if idx.size else None


def collect_dataset(sys: LtiSystem, inputs, x0=None) -> OfflineDataset:
    """Noise-free offline experiment on ``sys`` driven by ``inputs``."""
    x0 = np.zeros(sys.n) if x0 is None else x0
    traj = simulate(sys, x0, inputs)
    return make_dataset(traj.inputs, traj.states, traj.outputs_clean)


def span_residual(dataset: OfflineDataset, u_win, y_win, depth: int) -> float:
    """Least-squares residual of [H(u); H(y)] alpha = [u_win; y_win].

    Close to zero iff the window is a trajectory of the data-generating
    system (requires PE of order ``depth + n``).
    """
    return span_solve(dataset, u_win, y_win, depth)[1]


def span_solve(dataset: OfflineDataset, u_win, y_win, depth: int) -> tuple[np.ndarray, float]:
    """Minimum-norm alpha and residual for a length-``depth`` window."""
    if dataset.pe_order_certified < depth + dataset.n:
        raise PreconditionError(
            f"dataset is PE of order {dataset.pe_order_certified}, "
            f"need {depth + dataset.n} for depth {depth}"
        )
    Hu, Hy, _ = dataset.hankels(depth)
    u_win = np.asarray(u_win, dtype=float).reshape(-1)
    y_win = np.asarray(y_win, dtype=float).reshape(-1)
    if u_win.size != Hu.data.shape[0] or y_win.size != Hy.data.shape[0]:
        raise ShapeError(
            f"windows must have {Hu.data.shape[0]} input and {Hy.data.shape[0]} output entries"
        )
    M = np.vstack([Hu.data, Hy.data])
    w = np.concatenate([u_win, y_win])
    alpha = np.linalg.pinv(M) @ w
    return alpha, float(np.linalg.norm(M @ alpha - w))


def generate_pe_input(m: int, N: int, low: float = -5.0, high: float = 5.0, seed: int = 0) -> np.ndarray:
    """I.i.d. uniform input samples of shape (N, m), deterministic in ``seed``."""
    if N < 1 or m < 1:
        raise ValueError(f"N and m must be >= 1, got N={N}, m={m}")
    if not low < high:
        raise ValueError(f"need low < high, got [{low}, {high}]")
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.uniform(low, high, size=(N, m))
