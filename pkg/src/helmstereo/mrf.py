"""Grid-labeling energy model and max-product (min-sum) belief propagation.

The energy of a labeling is
    sum_p (1 - alpha) * unary_p(z_p)  +  sum_{p,q} alpha * E_s(z_p, z_q)
with one smoothness term per undirected neighbor pair, so the message
updates below minimize exactly the energy that `labeling_energy` reports
(and that `brute_force_map` enumerates). Messages pass synchronously with
optional damping; the solver is exact on tree-structured masks and an
approximation on loopy grids.

Two smoothness families cover the reconstruction methods: S1 penalizes
the angle between the candidate normals of neighboring pixels, and S2
penalizes deviation of the candidate depth gradient from the gradient of
an integrated anchor surface. An explicit-table mode exists for fixtures.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None

from .errors import NonFiniteCost, TooLarge

S1_NORMAL = "s1_normal"
S2_INTEGRATION = "s2_integration"
EXPLICIT = "explicit"

FOUR = "four"
UP_RIGHT = "up_right"

# Default width (in label steps) over which the anchored depth-gradient
# penalty reaches 1; keeps S2 commensurate with the [0, 1] costs of S1 and
# the data term.
S2_STEP_WIDTH = 4.0

_BATCH_ELEMS = 1 << 23  # table elements per message batch (~64 MB float64)


def smoothness_s1(n_p: np.ndarray, n_q: np.ndarray) -> float:
    """Angle between unit normals, scaled to [0, 1]."""
    dot = float(np.clip(np.dot(n_p, n_q), -1.0, 1.0))
    return float(np.arccos(dot) / np.pi)


def smoothness_s2(z_p: float, z_q: float, zin_p: float, zin_q: float, s: float = 1.0) -> float:
    """Squared mismatch between the candidate depth gradient (z_p - z_q)
    and the anchor-surface gradient (zin_p - zin_q), normalized by s."""
    u = ((z_p - z_q) - (zin_p - zin_q)) / s
    return float(u * u)


@dataclass
class GridMrf:
    width: int
    height: int
    mask: np.ndarray  # (h, w) bool
    labels: list  # per node, sorted 1-D depth arrays
    unary: list  # per node, finite costs >= 0
    alpha: float
    smoothness: str = S1_NORMAL
    neighborhood: str = FOUR
    normals: list | None = None  # S1: per node (L, 3)
    zin: np.ndarray | None = None  # S2: (h, w) anchor depths
    s2_literal: bool = False
    s2_width: float = S2_STEP_WIDTH
    s2_fallback_step: float = 1.0
    tables: dict | None = None  # EXPLICIT: {(i, j): (Li, Lj) array}
    # Derived fields.
    node_of: np.ndarray = field(init=False)
    nodes: np.ndarray = field(init=False)
    in_neighbors: list = field(init=False)
    edges: np.ndarray = field(init=False)  # (E, 2) directed (src, dst)
    rev: np.ndarray = field(init=False)
    und_edges: np.ndarray = field(init=False)  # (U, 2) canonical pairs
    _steps: np.ndarray = field(init=False)

    def __post_init__(self):
        if not (0.0 <= self.alpha < 1.0):
            raise ValueError("alpha must be in [0, 1)")
        h, w = self.mask.shape
        self.node_of = np.full((h, w), -1, dtype=np.int64)
        ys, xs = np.nonzero(self.mask)
        self.node_of[ys, xs] = np.arange(ys.size)
        self.nodes = np.stack([ys, xs], axis=1)
        n = ys.size
        for i in range(n):
            u = np.asarray(self.unary[i], dtype=float)
            if u.size == 0:
                raise ValueError(f"node {i}: empty label set")
            if not np.all(np.isfinite(u)) or np.any(u < 0):
                raise NonFiniteCost(f"node {i}: unary costs must be finite and >= 0")

        # Median label step per node, for the S2 normalizer.
        steps = np.full(n, self.s2_fallback_step)
        for i in range(n):
            d = np.asarray(self.labels[i], dtype=float)
            if d.size >= 2:
                steps[i] = float(np.median(np.diff(d)))
        self._steps = np.maximum(steps, 1e-300)

        if self.neighborhood == FOUR:
            offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
        elif self.neighborhood == UP_RIGHT:
            offsets = [(-1, 0), (0, 1)]
        else:
            raise ValueError(f"unknown neighborhood {self.neighborhood!r}")

        in_nb: list[list[int]] = [[] for _ in range(n)]
        src_list, dst_list = [], []
        for i in range(n):
            y, x = self.nodes[i]
            for dy, dx in offsets:
                qy, qx = y + dy, x + dx
                if 0 <= qy < h and 0 <= qx < w and self.mask[qy, qx]:
                    s = int(self.node_of[qy, qx])
                    in_nb[i].append(s)
                    src_list.append(s)
                    dst_list.append(i)
        self.in_neighbors = in_nb
        self.edges = (
            np.stack([np.asarray(src_list), np.asarray(dst_list)], axis=1)
            if src_list
            else np.zeros((0, 2), dtype=np.int64)
        )
        lookup = {(int(s), int(d)): e for e, (s, d) in enumerate(self.edges)}
        self.rev = np.array(
            [lookup.get((int(d), int(s)), -1) for s, d in self.edges], dtype=np.int64
        )

        # Canonical undirected pairs over the full 4-adjacency of the mask;
        # the energy model is the same under both message neighborhoods.
        und = set()
        for i in range(n):
            y, x = self.nodes[i]
            for dy, dx in [(-1, 0), (1, 0), (0, -1), (0, 1)]:
                qy, qx = y + dy, x + dx
                if 0 <= qy < h and 0 <= qx < w and self.mask[qy, qx]:
                    j = int(self.node_of[qy, qx])
                    und.add((min(i, j), max(i, j)))
        self.und_edges = (
            np.array(sorted(und), dtype=np.int64) if und else np.zeros((0, 2), dtype=np.int64)
        )

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def _zin_at(self, i: int) -> float:
        y, x = self.nodes[i]
        return float(self.zin[y, x])

    def _s2_scale(self, i: int, j: int) -> float:
        return self.s2_width * max(self._steps[i], self._steps[j])

    def pair_table(self, i: int, j: int) -> np.ndarray:
        """Unweighted smoothness table E_s over (labels_i, labels_j)."""
        if self.smoothness == S1_NORMAL:
            dots = np.clip(self.normals[i] @ self.normals[j].T, -1.0, 1.0)
            return np.arccos(dots) / np.pi
        if self.smoothness == S2_INTEGRATION:
            dz_in = self._zin_at(i) - self._zin_at(j)
            if self.s2_literal:
                shape = (len(self.labels[i]), len(self.labels[j]))
                return np.full(shape, dz_in * dz_in)
            di = np.asarray(self.labels[i], dtype=float)
            dj = np.asarray(self.labels[j], dtype=float)
            u = (di[:, None] - dj[None, :] - dz_in) / self._s2_scale(i, j)
            return u * u
        if self.smoothness == EXPLICIT:
            if (i, j) in self.tables:
                return np.asarray(self.tables[(i, j)], dtype=float)
            return np.asarray(self.tables[(j, i)], dtype=float).T
        raise ValueError(f"unknown smoothness {self.smoothness!r}")


@dataclass
class MessageField:
    """Messages over the directed edges of a GridMrf; values[e] spans the
    destination node's labels. All zeros at iteration 0."""

    values: list
    iteration: int = 0
    damping: float = 0.0


@dataclass
class BeliefResult:
    beliefs: list  # per node, aggregated cost over labels
    chosen: np.ndarray  # (h, w) label index, -1 off the mask
    energy_trace: np.ndarray  # energy of the argmin labeling, index 0 = data only
    messages: "MessageField | None" = None  # final field, kept for debugging dumps


def init_messages(mrf: GridMrf, damping: float = 0.0) -> MessageField:
    values = [np.zeros(len(mrf.labels[d])) for _, d in mrf.edges]
    return MessageField(values=values, iteration=0, damping=damping)


def _incoming_sums(mrf: GridMrf, msgs: MessageField) -> list:
    sums = [np.zeros(len(mrf.labels[i])) for i in range(mrf.n_nodes)]
    for e, (_, d) in enumerate(mrf.edges):
        sums[d] += msgs.values[e]
    return sums


def send_message(mrf: GridMrf, msgs: MessageField, edge: tuple[int, int]) -> np.ndarray:
    """One message update p -> q (reference implementation).

    The new message is normalized to min 0, then blended with the stored
    message by the damping factor.
    """
    p, q = edge
    e = None
    for k, (s, d) in enumerate(mrf.edges):
        if s == p and d == q:
            e = k
            break
    if e is None:
        raise ValueError(f"no directed edge {p} -> {q}")
    incoming = np.zeros(len(mrf.labels[p]))
    for k, (s, d) in enumerate(mrf.edges):
        if d == p and s != q:
            incoming += msgs.values[k]
    table = mrf.alpha * mrf.pair_table(p, q)
    addend = (1.0 - mrf.alpha) * np.asarray(mrf.unary[p], dtype=float) + incoming
    m = np.min(table + addend[:, None], axis=0)
    m -= m.min()
    return (1.0 - msgs.damping) * m + msgs.damping * msgs.values[e]


# Unary cost assigned to padding slots in the uniform-width solver arrays;
# large enough that padded labels are never selected, small enough to stay
# comfortably finite through message sums.
_PAD_COST = 1e12


class _Padded:
    """Uniform-width views of a ragged model for the vectorized solver.

    Every node is padded to the maximum label count; padding repeats the
    node's last label (and normal), and carries a huge unary cost so no
    minimum is ever attained there. Message semantics over the real labels
    are unchanged.
    """

    def __init__(self, mrf: GridMrf):
        n = mrf.n_nodes
        lmax = max((len(mrf.labels[i]) for i in range(n)), default=1)
        self.lmax = lmax
        self.counts = np.array([len(mrf.labels[i]) for i in range(n)], dtype=np.int64)
        self.labels = np.empty((n, lmax))
        self.unary = np.full((n, lmax), _PAD_COST)
        for i in range(n):
            k = self.counts[i]
            self.labels[i, :k] = mrf.labels[i]
            self.labels[i, k:] = mrf.labels[i][k - 1]
            self.unary[i, :k] = mrf.unary[i]
        if mrf.smoothness == S1_NORMAL:
            self.normals = np.empty((n, lmax, 3))
            for i in range(n):
                k = self.counts[i]
                self.normals[i, :k] = mrf.normals[i]
                self.normals[i, k:] = mrf.normals[i][k - 1]
        if mrf.smoothness == S2_INTEGRATION:
            self.zin = np.array([mrf._zin_at(i) for i in range(n)])
            self.steps = mrf._steps.copy()
        self.src = mrf.edges[:, 0] if mrf.edges.size else np.zeros(0, dtype=np.int64)
        self.dst = mrf.edges[:, 1] if mrf.edges.size else np.zeros(0, dtype=np.int64)
        self.rev = mrf.rev

    def tables(self, mrf: GridMrf, block) -> np.ndarray:
        """Alpha-weighted smoothness tables (b, lmax, lmax) for an edge
        block (slice or index array)."""
        s, d = self.src[block], self.dst[block]
        if mrf.smoothness == S1_NORMAL:
            dots = np.clip(
                np.einsum("eik,ejk->eij", self.normals[s], self.normals[d]), -1.0, 1.0
            )
            return mrf.alpha * (np.arccos(dots) / np.pi)
        if mrf.smoothness == S2_INTEGRATION:
            dzin = self.zin[s] - self.zin[d]
            if mrf.s2_literal:
                t = np.broadcast_to(
                    (dzin * dzin)[:, None, None], (s.size, self.lmax, self.lmax)
                )
                return mrf.alpha * np.ascontiguousarray(t)
            scale = mrf.s2_width * np.maximum(self.steps[s], self.steps[d])
            u = (
                self.labels[s][:, :, None] - self.labels[d][:, None, :] - dzin[:, None, None]
            ) / scale[:, None, None]
            return mrf.alpha * u * u
        tables = np.empty((s.size, self.lmax, self.lmax))
        for k in range(s.size):
            si, di_ = int(s[k]), int(d[k])
            t = mrf.alpha * mrf.pair_table(si, di_)
            padded = np.full((self.lmax, self.lmax), np.nan)
            ks, kd = self.counts[si], self.counts[di_]
            padded[:ks, :kd] = t
            padded[ks:, :kd] = t[ks - 1, :]
            padded[:ks, kd:] = padded[:ks, kd - 1 : kd]
            padded[ks:, kd:] = t[ks - 1, kd - 1]
            tables[k] = padded
        return tables


def _incoming_matrix(pad: _Padded, messages: np.ndarray, n: int) -> np.ndarray:
    incoming = np.zeros((n, pad.lmax))
    np.add.at(incoming, pad.dst, messages)
    return incoming


# Table cache budgets (elements). Small models keep exact float64 tables;
# larger ones drop to float32; beyond the big budget, tables are rebuilt
# chunk-by-chunk every sweep.
_CACHE_F64_ELEMS = 1 << 22  # 32 MB
_CACHE_F32_ELEMS = 1 << 28  # 1 GB


def _table_cache(mrf: GridMrf, pad: _Padded):
    if mrf.alpha == 0.0:
        return None
    total = pad.src.size * pad.lmax * pad.lmax
    if total <= _CACHE_F64_ELEMS:
        dtype = np.float64
    elif total <= _CACHE_F32_ELEMS:
        dtype = np.float32
    else:
        return None
    cache = np.empty((pad.src.size, pad.lmax, pad.lmax), dtype=dtype)
    chunk = max(1, _BATCH_ELEMS // max(pad.lmax * pad.lmax, 1))
    for start in range(0, pad.src.size, chunk):
        block = slice(start, min(start + chunk, pad.src.size))
        cache[block] = pad.tables(mrf, block)
    return cache


if numba is not None:

    @numba.njit(cache=True, fastmath=False)
    def _min_plus_kernel(tables, addend, out):  # pragma: no cover - jitted
        e_count, li, lj = tables.shape
        for e in range(e_count):
            for j in range(lj):
                out[e, j] = tables[e, 0, j] + addend[e, 0]
            for i in range(1, li):
                a = addend[e, i]
                for j in range(lj):
                    v = tables[e, i, j] + a
                    if v < out[e, j]:
                        out[e, j] = v

else:
    _min_plus_kernel = None


def _min_plus(tables: np.ndarray, addend: np.ndarray) -> np.ndarray:
    """out[e, j] = min_i tables[e, i, j] + addend[e, i], without large
    intermediate arrays when the jit kernel is available."""
    if _min_plus_kernel is not None:
        out = np.empty((tables.shape[0], tables.shape[2]))
        _min_plus_kernel(tables, addend, out)
        return out
    return np.min(tables + addend[:, :, None], axis=1)


def _sweep_fast(
    mrf: GridMrf, pad: _Padded, messages: np.ndarray, damping: float, cache=None
) -> np.ndarray:
    """One synchronous update of every directed message (uniform arrays)."""
    n = mrf.n_nodes
    incoming = _incoming_matrix(pad, messages, n)
    node_addend = (1.0 - mrf.alpha) * pad.unary + incoming
    addend = node_addend[pad.src]
    has_rev = pad.rev >= 0
    if has_rev.any():
        addend = addend.copy()
        addend[has_rev] -= messages[pad.rev[has_rev]]
    e_total = pad.src.size
    new = np.empty_like(messages)
    chunk = max(1, _BATCH_ELEMS // max(pad.lmax * pad.lmax, 1))
    for start in range(0, e_total, chunk):
        block = slice(start, min(start + chunk, e_total))
        if mrf.alpha == 0.0:
            b = block.stop - block.start
            m = np.broadcast_to(addend[block].min(axis=1)[:, None], (b, pad.lmax)).copy()
        else:
            tables = cache[block] if cache is not None else pad.tables(mrf, block)
            m = _min_plus(tables, addend[block])
        m -= m.min(axis=1, keepdims=True)
        new[block] = m
    if damping > 0:
        new = (1.0 - damping) * new + damping * messages
    return new


def beliefs_from(mrf: GridMrf, msgs: MessageField) -> list:
    incoming = _incoming_sums(mrf, msgs)
    return [
        (1.0 - mrf.alpha) * np.asarray(mrf.unary[i], dtype=float) + incoming[i]
        for i in range(mrf.n_nodes)
    ]


def _energy_fast(mrf: GridMrf, pad: _Padded, z: np.ndarray) -> float:
    """Vectorized evaluation of the same energy labeling_energy reports."""
    n = mrf.n_nodes
    e = float(((1.0 - mrf.alpha) * pad.unary[np.arange(n), z]).sum())
    if mrf.und_edges.size == 0 or mrf.alpha == 0.0:
        return e
    i = mrf.und_edges[:, 0]
    j = mrf.und_edges[:, 1]
    zi, zj = z[i], z[j]
    if mrf.smoothness == S1_NORMAL:
        dots = np.clip(np.sum(pad.normals[i, zi] * pad.normals[j, zj], axis=1), -1.0, 1.0)
        cost = np.arccos(dots) / np.pi
    elif mrf.smoothness == S2_INTEGRATION:
        dzin = pad.zin[i] - pad.zin[j]
        if mrf.s2_literal:
            cost = dzin * dzin
        else:
            scale = mrf.s2_width * np.maximum(pad.steps[i], pad.steps[j])
            u = (pad.labels[i, zi] - pad.labels[j, zj] - dzin) / scale
            cost = u * u
    else:
        cost = np.array(
            [_edge_cost(mrf, int(a), int(b), int(za), int(zb)) for a, b, za, zb in zip(i, j, zi, zj)]
        )
    return e + float(mrf.alpha * cost.sum())


def _argmin_labeling(beliefs: list) -> np.ndarray:
    # np.argmin takes the first minimum, which is the smallest depth label.
    return np.array([int(np.argmin(b)) for b in beliefs], dtype=np.int64)


def _edge_cost(mrf: GridMrf, i: int, j: int, zi: int, zj: int) -> float:
    if mrf.smoothness == S1_NORMAL:
        return smoothness_s1(mrf.normals[i][zi], mrf.normals[j][zj])
    if mrf.smoothness == S2_INTEGRATION:
        if mrf.s2_literal:
            d = mrf._zin_at(i) - mrf._zin_at(j)
            return d * d
        return smoothness_s2(
            mrf.labels[i][zi],
            mrf.labels[j][zj],
            mrf._zin_at(i),
            mrf._zin_at(j),
            mrf._s2_scale(i, j),
        )
    return float(mrf.pair_table(i, j)[zi, zj])


def labeling_energy(mrf: GridMrf, labeling: np.ndarray) -> float:
    """Total energy of per-node label indices under the model above."""
    z = np.asarray(labeling, dtype=int).ravel()
    e = sum((1.0 - mrf.alpha) * float(mrf.unary[i][z[i]]) for i in range(mrf.n_nodes))
    for i, j in mrf.und_edges:
        e += mrf.alpha * _edge_cost(mrf, int(i), int(j), z[i], z[j])
    return float(e)


def _to_grid(mrf: GridMrf, labeling: np.ndarray) -> np.ndarray:
    grid = np.full((mrf.height, mrf.width), -1, dtype=np.int64)
    grid[mrf.nodes[:, 0], mrf.nodes[:, 1]] = labeling
    return grid


def run_bp(mrf: GridMrf, iterations: int, damping: float = 0.0) -> BeliefResult:
    """Synchronous min-sum message passing for a fixed iteration count.

    The energy trace starts with the data-only labeling (index 0) and
    appends the energy of the current argmin labeling after every sweep;
    loopy schedules are not monotone, the trace is there to observe them.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not (0.0 <= damping < 1.0):
        raise ValueError("damping must be in [0, 1)")
    n = mrf.n_nodes
    pad = _Padded(mrf)
    cache = _table_cache(mrf, pad)
    messages = np.zeros((pad.src.size, pad.lmax))
    trace = np.empty(iterations + 1)
    trace[0] = _energy_fast(mrf, pad, np.argmin(pad.unary, axis=1))
    bel = (1.0 - mrf.alpha) * pad.unary
    for t in range(1, iterations + 1):
        messages = _sweep_fast(mrf, pad, messages, damping, cache)
        if not np.all(np.isfinite(messages)):
            raise NonFiniteCost(f"message overflow at iteration {t}")
        bel = (1.0 - mrf.alpha) * pad.unary + _incoming_matrix(pad, messages, n)
        trace[t] = _energy_fast(mrf, pad, np.argmin(bel, axis=1))
    chosen = np.argmin(bel, axis=1)
    beliefs = [bel[i, : pad.counts[i]] for i in range(n)]
    field = MessageField(
        values=[messages[e, : pad.counts[pad.dst[e]]] for e in range(pad.src.size)],
        iteration=iterations,
        damping=damping,
    )
    return BeliefResult(
        beliefs=beliefs, chosen=_to_grid(mrf, chosen), energy_trace=trace, messages=field
    )


def brute_force_map(mrf: GridMrf, limit: int = 10**7) -> tuple[np.ndarray, float]:
    """Exact minimizer by exhaustive enumeration (test oracle).

    Ties resolve to the lexicographically first configuration, i.e. the
    smallest label indices. Raises TooLarge above `limit` configurations.
    """
    n = mrf.n_nodes
    counts = np.array([len(mrf.labels[i]) for i in range(n)], dtype=np.int64)
    total = int(np.prod(counts, dtype=object))
    if total > limit:
        raise TooLarge(f"{total} configurations exceed the bound {limit}")
    if n == 0:
        return _to_grid(mrf, np.zeros(0, dtype=np.int64)), 0.0

    unary = [(1.0 - mrf.alpha) * np.asarray(mrf.unary[i], dtype=float) for i in range(n)]
    pair = [
        (int(i), int(j), mrf.alpha * mrf.pair_table(int(i), int(j)))
        for i, j in mrf.und_edges
    ]
    # Mixed-radix enumeration, last node fastest (lexicographic order).
    radix = np.concatenate([np.cumprod(counts[::-1])[-2::-1], [1]])
    best_energy = np.inf
    best = None
    chunk = 1 << 16
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        digits = (idx[:, None] // radix[None, :]) % counts[None, :]
        energy = np.zeros(idx.size)
        for i in range(n):
            energy += unary[i][digits[:, i]]
        for i, j, table in pair:
            energy += table[digits[:, i], digits[:, j]]
        k = int(np.argmin(energy))
        if energy[k] < best_energy:
            best_energy = float(energy[k])
            best = digits[k].copy()
    return _to_grid(mrf, best), best_energy


def save_messages(path_prefix, mrf: GridMrf, msgs: MessageField) -> tuple[Path, Path]:
    """Debug dump: JSON header plus float32 blob of all message vectors."""
    prefix = Path(path_prefix)
    header = {
        "width": mrf.width,
        "height": mrf.height,
        "iteration": msgs.iteration,
        "damping": msgs.damping,
        "edges": [[int(s), int(d)] for s, d in mrf.edges],
        "labels_per_node": [len(mrf.labels[i]) for i in range(mrf.n_nodes)],
    }
    json_path = prefix.with_suffix(".json")
    bin_path = prefix.with_suffix(".msg")
    json_path.write_text(json.dumps(header, sort_keys=True) + "\n")
    blob = (
        np.concatenate([v.astype("<f4") for v in msgs.values])
        if msgs.values
        else np.zeros(0, dtype="<f4")
    )
    bin_path.write_bytes(blob.tobytes())
    return json_path, bin_path
