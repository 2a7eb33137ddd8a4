"""Sub-Markovian kernels on finite indexed state spaces.

States are addressed by integer index everywhere in the numerical API;
labels are kept for I/O and reporting. The cemetery state is implicit:
its mass is the row deficit ``1 - sum_y p(x, y)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import breadth_first_order, connected_components

ROW_TOL = 1e-12
SOLVE_TOL = 1e-10
DENSE_LIMIT = 2000
SPARSE_DENSITY = 0.1
SPARSE_MIN_SIZE = 32


class QsdError(Exception):
    """Base class for structured numerical errors."""

    def __init__(self, message, **info):
        super().__init__(message)
        self.info = info


class DimensionError(QsdError, ValueError):
    pass


class ExtinctionError(QsdError):
    def __init__(self, step):
        super().__init__(f"total extinction at step {step}", step=step)
        self.step = step


class SingularSystemError(QsdError):
    pass


# ---------------------------------------------------------------- types


@dataclass(frozen=True, eq=False)
class StateSpace:
    labels: tuple
    coords: np.ndarray | None = None
    _lookup: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        labels = tuple(self.labels)
        if len(labels) == 0:
            raise ValueError("state space must be nonempty")
        lookup = {lab: i for i, lab in enumerate(labels)}
        if len(lookup) != len(labels):
            raise ValueError("state labels must be distinct")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "_lookup", lookup)
        if self.coords is not None:
            c = np.array(self.coords, dtype=float)
            if c.ndim == 1:
                c = c[:, None]
            if c.shape[0] != len(labels):
                raise DimensionError("coords rows must match labels",
                                     expected=len(labels), got=c.shape[0])
            c.flags.writeable = False
            object.__setattr__(self, "coords", c)

    @classmethod
    def range(cls, n, coords=None):
        return cls(tuple(range(n)), coords)

    @property
    def size(self):
        return len(self.labels)

    def __len__(self):
        return len(self.labels)

    def index_of(self, label):
        return self._lookup[label]

    def same_as(self, other):
        return self is other or self.labels == other.labels


def subset_indices(n, K):
    """Normalize a subset (indices or boolean mask) to a sorted index array."""
    arr = np.asarray(K)
    if arr.dtype == bool:
        if arr.shape != (n,):
            raise DimensionError("mask length mismatch", expected=n, got=arr.shape[0])
        return np.flatnonzero(arr)
    idx = np.unique(arr.astype(int).ravel())
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise IndexError(f"subset index out of range for size {n}")
    return idx


def subset_mask(n, K):
    m = np.zeros(n, dtype=bool)
    m[subset_indices(n, K)] = True
    return m


@dataclass(frozen=True, eq=False)
class Dist:
    space: StateSpace
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        if w.shape[0] != self.space.size:
            raise DimensionError("distribution length does not match space",
                                 expected=self.space.size, got=w.shape[0])
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("distribution weights must be finite and nonnegative")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, space, x):
        w = np.zeros(space.size)
        w[x] = 1.0
        return cls(space, w)

    @classmethod
    def uniform(cls, space, support=None):
        w = np.zeros(space.size)
        idx = np.arange(space.size) if support is None else subset_indices(space.size, support)
        w[idx] = 1.0 / len(idx)
        return cls(space, w)

    @classmethod
    def normalized(cls, space, w):
        w = np.asarray(w, dtype=float)
        s = w.sum()
        if not s > 0:
            raise ValueError("cannot normalize a zero measure")
        return cls(space, w / s)

    @property
    def mass(self):
        return float(self.weights.sum())

    @property
    def is_probability(self):
        return abs(self.mass - 1.0) <= ROW_TOL

    def __call__(self, f):
        return float(np.dot(self.weights, f))


@dataclass(frozen=True, eq=False)
class SubKernel:
    space: StateSpace
    rows: object  # ndarray or scipy csr matrix

    def __post_init__(self):
        m = self.rows
        n = self.space.size
        if sp.issparse(m):
            m = sp.csr_matrix(m, dtype=float)
            m.eliminate_zeros()
            m.sort_indices()
            data = m.data
        else:
            m = np.array(m, dtype=float)
            data = m
        if m.shape != (n, n):
            raise DimensionError(f"kernel shape {m.shape} does not match space size {n}",
                                 expected=n, got=m.shape)
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ValueError("kernel entries must be finite and nonnegative")
        rs = np.asarray(m.sum(axis=1)).ravel()
        if np.any(rs > 1 + ROW_TOL):
            x = int(np.argmax(rs))
            raise ValueError(f"row {x} sums to {rs[x]!r} > 1")
        if sp.issparse(m):
            m.data.flags.writeable = False
        else:
            m.flags.writeable = False
        object.__setattr__(self, "rows", m)

    @classmethod
    def from_matrix(cls, mat, space=None, sparse=None):
        if not sp.issparse(mat):
            mat = np.asarray(mat, dtype=float)
        n = mat.shape[0]
        space = StateSpace.range(n) if space is None else space
        if sparse is None:
            nnz = mat.nnz if sp.issparse(mat) else np.count_nonzero(mat)
            sparse = n >= SPARSE_MIN_SIZE and nnz < SPARSE_DENSITY * n * n
        mat = sp.csr_matrix(mat) if sparse else (mat.toarray() if sp.issparse(mat) else mat)
        return cls(space, mat)

    @property
    def size(self):
        return self.space.size

    @property
    def is_sparse(self):
        return sp.issparse(self.rows)

    def dense(self):
        return self.rows.toarray() if self.is_sparse else np.array(self.rows)

    def csr(self):
        return self.rows if self.is_sparse else sp.csr_matrix(self.rows)

    def row_sums(self):
        return np.asarray(self.rows.sum(axis=1)).ravel()

    def absorption(self):
        return np.clip(1.0 - self.row_sums(), 0.0, 1.0)

    def lmul(self, v):
        """Row vector times kernel: v P."""
        if self.is_sparse:
            return self.rows.T @ v
        return v @ self.rows

    def rmul(self, f):
        """Kernel times column vector: P f."""
        return self.rows @ f

    def block(self, rows, cols):
        r = subset_indices(self.size, rows)
        c = subset_indices(self.size, cols)
        if self.is_sparse:
            return self.rows[r][:, c]
        return self.rows[np.ix_(r, c)]

    def graph(self):
        """Adjacency of positive entries as a csr matrix."""
        g = self.csr().copy()
        g.data = np.ones_like(g.data)
        return g


def _check_space(k, mu):
    if mu.space.size != k.size:
        raise DimensionError(f"measure on {mu.space.size} states, kernel on {k.size}",
                             expected=k.size, got=mu.space.size)


# ---------------------------------------------------------------- operations


def apply(k: SubKernel, mu: Dist):
    """One step of the left action: returns (mu P, total mass)."""
    _check_space(k, mu)
    sub = np.asarray(k.lmul(mu.weights), dtype=float)
    return sub, float(sub.sum())


def evolve_conditional(k: SubKernel, mu: Dist, n: int) -> Dist:
    """Law of X_n given survival, mu P^n / mu P^n 1."""
    _check_space(k, mu)
    if n < 0:
        raise ValueError("n must be nonnegative")
    w = np.array(mu.weights, dtype=float)
    if w.sum() <= 0:
        raise ExtinctionError(0)
    w = w / w.sum()
    for step in range(1, n + 1):
        w = np.asarray(k.lmul(w))
        s = w.sum()
        if s <= 0:
            raise ExtinctionError(step)
        w = w / s
    return Dist(mu.space, w)


def tv_distance(a: Dist, b: Dist) -> float:
    """sum |a_i - b_i|, the sup over test functions with values in [-1, 1]."""
    if a.space.size != b.space.size:
        raise DimensionError("tv_distance on different spaces",
                             expected=a.space.size, got=b.space.size)
    return float(np.abs(a.weights - b.weights).sum())


def survival_vector(k: SubKernel, n: int):
    """P^n 1 for all states at once."""
    f = np.ones(k.size)
    for _ in range(n):
        f = k.rmul(f)
    return np.asarray(f)


def survival(k: SubKernel, x: int, n: int) -> float:
    return float(survival_vector(k, n)[x])


def backward_reachable(graph, target_mask):
    """States with a directed path (length >= 0) into the target set."""
    n = graph.shape[0]
    targets = np.flatnonzero(target_mask)
    if targets.size == 0:
        return np.zeros(n, dtype=bool)
    rev = sp.csr_matrix(graph.T)
    # super source n pointing at every target
    src = sp.csr_matrix((np.ones(targets.size), (np.full(targets.size, n), targets)),
                        shape=(n + 1, n + 1))
    big = sp.bmat([[rev, None], [None, sp.csr_matrix((1, 1))]], format="csr") + src
    order = breadth_first_order(big, n, directed=True, return_predecessors=False)
    out = np.zeros(n, dtype=bool)
    out[order[order < n]] = True
    return out


def forward_reachable(graph, source_mask):
    return backward_reachable(sp.csr_matrix(graph.T), source_mask)


def survivor_set(k: SubKernel, K) -> np.ndarray:
    """Indices of states from which K can be reached through positive entries."""
    K = subset_indices(k.size, K)
    if K.size == 0:
        return K
    mask = np.zeros(k.size, dtype=bool)
    mask[K] = True
    return np.flatnonzero(backward_reachable(k.graph(), mask))


def strong_classes(graph):
    """Communicating classes: (count, label per state)."""
    return connected_components(graph, directed=True, connection="strong")


def perron_root(block) -> float:
    """Spectral radius of a small nonnegative block."""
    if sp.issparse(block):
        block = block.toarray()
    if block.shape[0] == 1:
        return float(block[0, 0])
    if not np.any(block):
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(block))))


def class_roots(mat, labels, ncomp):
    """Perron root of the diagonal block of each communicating class."""
    roots = np.zeros(ncomp)
    for c in range(ncomp):
        idx = np.flatnonzero(labels == c)
        if sp.issparse(mat):
            blk = mat[idx][:, idx]
        else:
            blk = mat[np.ix_(idx, idx)]
        roots[c] = perron_root(blk)
    return roots


def solve_linear(A, b, states=None):
    """Solve A x = b with LU and iterative refinement to SOLVE_TOL."""
    n = A.shape[0]
    b = np.asarray(b, dtype=float)
    if n == 0:
        return b.copy()
    scale = max(1.0, float(np.max(np.abs(b))))
    if sp.issparse(A) and n > DENSE_LIMIT:
        try:
            lu = spla.splu(sp.csc_matrix(A))
        except RuntimeError as exc:
            raise SingularSystemError("singular linear system", states=states) from exc
        solve = lu.solve
    else:
        Ad = A.toarray() if sp.issparse(A) else np.asarray(A)
        lu, piv = sla.lu_factor(Ad, check_finite=True)
        tiny = np.abs(np.diag(lu)) <= 1e-14 * max(1.0, np.max(np.abs(Ad)))
        if np.any(tiny):
            bad = np.flatnonzero(tiny)
            bad_states = bad if states is None else np.asarray(states)[bad]
            raise SingularSystemError(
                f"singular linear system near states {list(map(int, bad_states))}",
                states=bad_states)
        solve = lambda r: sla.lu_solve((lu, piv), r)
    x = solve(b)
    for _ in range(5):
        r = b - A @ x
        if np.max(np.abs(r)) <= SOLVE_TOL * scale:
            break
        x = x + solve(r)
    return x


@dataclass(frozen=True)
class HittingMoment:
    K: np.ndarray
    theta: float
    values: np.ndarray
    converged: np.ndarray  # per-state flag; values are +inf where False

    @property
    def all_converged(self):
        return bool(np.all(self.converged))


def hitting_moment(k: SubKernel, K, theta: float) -> HittingMoment:
    """E_x[theta^-(T_K ^ tau)] by a linear solve on the complement of K."""
    K = subset_indices(k.size, K)
    if K.size == 0:
        raise ValueError("K must be nonempty")
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    n = k.size
    inK = np.zeros(n, dtype=bool)
    inK[K] = True
    off = np.flatnonzero(~inK)
    values = np.ones(n)
    conv = np.ones(n, dtype=bool)
    if off.size == 0:
        return HittingMoment(K, theta, values, conv)

    P_off = k.block(off, off)
    g_off = sp.csr_matrix(P_off) if not sp.issparse(P_off) else P_off.copy()
    g_off.data = np.ones_like(g_off.data)
    ncomp, lab = strong_classes(g_off)
    roots = class_roots(P_off, lab, ncomp)
    bad_class = roots >= theta * (1 - 1e-12)
    bad = backward_reachable(g_off, bad_class[lab])
    good = np.flatnonzero(~bad)

    # right-hand side: one-step mass into K plus absorption
    into_K = np.asarray(k.block(off, K).sum(axis=1)).ravel()
    rhs = (into_K + k.absorption()[off]) / theta
    if good.size:
        A_good = P_off[good][:, good] if sp.issparse(P_off) else P_off[np.ix_(good, good)]
        if sp.issparse(A_good):
            A = sp.identity(good.size, format="csr") - A_good / theta
        else:
            A = np.eye(good.size) - A_good / theta
        phi = solve_linear(A, rhs[good], states=off[good])
        values[off[good]] = np.maximum(phi, 1.0)
    values[off[bad]] = np.inf
    conv[off[bad]] = False
    values.flags.writeable = False
    return HittingMoment(K, theta, values, conv)


# ---------------------------------------------------------------- file format


def _label_token(label):
    if isinstance(label, tuple):
        tok = ",".join(str(v) for v in label)
    else:
        tok = str(label)
    if not tok or any(ch.isspace() for ch in tok):
        raise ValueError(f"label {label!r} cannot be written")
    return tok


def _parse_label(tok):
    try:
        return int(tok)
    except ValueError:
        pass
    if "," in tok:
        return tuple(_parse_label(v) for v in tok.split(","))
    return tok


def write_kernel(k: SubKernel, path):
    m = k.csr()
    lines = [f"qsdk v1 {k.size}"]
    lines += [f"label {_label_token(lab)}" for lab in k.space.labels]
    for i in range(k.size):
        lo, hi = m.indptr[i], m.indptr[i + 1]
        for j, w in zip(m.indices[lo:hi], m.data[lo:hi]):
            lines.append(f"{i} {j} {float(w)!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_kernel(path, sparse=None) -> SubKernel:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].split()
    if len(head) != 3 or head[:2] != ["qsdk", "v1"]:
        raise ValueError(f"bad header: {lines[0]!r}")
    n = int(head[2])
    labels = []
    rows, cols, vals = [], [], []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "label":
            labels.append(_parse_label(parts[1]))
        else:
            rows.append(int(parts[0]))
            cols.append(int(parts[1]))
            vals.append(float(parts[2]))
    if len(labels) != n:
        raise DimensionError("label count does not match header", expected=n, got=len(labels))
    m = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return SubKernel.from_matrix(m, StateSpace(tuple(labels)), sparse=sparse)
