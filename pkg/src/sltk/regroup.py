"""Group-wise structural sparsification.

Rows of a sparse mask that light up similar column sets are clustered with
hypergraph partitioning (rows = nodes, nonzero columns = hyperedges), and
each sufficiently large cluster yields a dense row-set x column-set block.
Holes inside a block are refilled; everything outside all blocks is cleared.

The partitioner is a self-contained two-phase heuristic: greedy agglomerative
coarsening by highest-Jaccard pair merging, then balanced move refinement on
the connectivity-cut objective sum_e (lambda(e) - 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import LayerShape, SparseMask, WeightTensor
from .errors import LayoutError, ParameterError

BALANCE_EPS = 0.2
_COARSEN_FACTOR = 4
_RESTARTS = 4
_MAX_PASSES = 24
_SWAP_NODE_CAP = 96  # pairwise row swaps are quadratic; skip on large layers


def jaccard(row_a, row_b) -> float:
    """Similarity of two rows' non-zero column sets: |A & B| / |A | B|.

    Defined as 0.0 when both rows are empty.
    """
    a = set(int(c) for c in row_a)
    b = set(int(c) for c in row_b)
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


@dataclass(frozen=True)
class Hypergraph:
    """Rows as nodes; every nonzero column as a hyperedge over its set rows."""

    n_nodes: int
    edges: tuple  # tuple of sorted int ndarrays, each nonempty
    edge_cols: tuple  # originating column index of each edge

    def __post_init__(self):
        for e in self.edges:
            if len(e) == 0:
                raise ParameterError("hyperedge must be nonempty")
            if e[-1] >= self.n_nodes or e[0] < 0:
                raise ParameterError("hyperedge node index out of range")


def _hypergraph_from_bits(bits: np.ndarray) -> Hypergraph:
    edges = []
    cols = []
    for c in range(bits.shape[1]):
        members = np.flatnonzero(bits[:, c])
        if members.size:
            edges.append(members.astype(np.int64))
            cols.append(c)
    return Hypergraph(bits.shape[0], tuple(edges), tuple(cols))


def build_hypergraph(mask: SparseMask) -> Hypergraph:
    """One node per mask row; one hyperedge per column holding >= 1 set bit."""
    return _hypergraph_from_bits(mask.bits)


def balance_limit(n_nodes: int, t1: int) -> int:
    """Largest allowed group size: ceil((1 + eps) * n / t1)."""
    return math.ceil((1 + BALANCE_EPS) * n_nodes / t1)


def connectivity_cut(h: Hypergraph, assign: np.ndarray) -> int:
    """sum over edges of (number of groups touched - 1)."""
    cut = 0
    for e in h.edges:
        cut += len(np.unique(assign[e])) - 1
    return cut


def _incidence(h: Hypergraph) -> np.ndarray:
    """node x edge boolean membership matrix."""
    inc = np.zeros((h.n_nodes, len(h.edges)), dtype=bool)
    for ei, e in enumerate(h.edges):
        inc[e, ei] = True
    return inc


def _coarsen(inc: np.ndarray, target: int, limit: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Merge highest-Jaccard supernode pairs until <= target remain.

    Supernode similarity is the Jaccard of the union of member edge sets.
    Merges keep supernode size <= limit so a balanced assignment stays
    feasible.  Stops early when no positive-similarity pair is mergeable.
    Returns the supernodes and their edge signatures.
    """
    n = inc.shape[0]
    groups = [np.array([i]) for i in range(n)]
    if n <= target:
        return groups, inc.copy()
    sig = inc.astype(np.float32)
    sizes = np.ones(n, dtype=np.int64)
    card = sig.sum(axis=1)
    inter = sig @ sig.T
    union = card[:, None] + card[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(union > 0, inter / union, 0.0)
    alive = np.ones(n, dtype=bool)
    np.fill_diagonal(sim, -1.0)
    n_alive = n
    while n_alive > target:
        allowed = sim.copy()
        allowed[~alive] = -1.0
        allowed[:, ~alive] = -1.0
        too_big = (sizes[:, None] + sizes[None, :]) > limit
        allowed[too_big] = -1.0
        best = int(np.argmax(allowed))
        i, j = divmod(best, n)
        if allowed[i, j] <= 0.0:
            break
        if i > j:
            i, j = j, i
        groups[i] = np.concatenate([groups[i], groups[j]])
        sizes[i] += sizes[j]
        alive[j] = False
        n_alive -= 1
        sig[i] = np.maximum(sig[i], sig[j])
        card_i = sig[i].sum()
        inter_i = sig @ sig[i]
        union_i = card + card_i - inter_i
        card[i] = card_i
        with np.errstate(invalid="ignore", divide="ignore"):
            row = np.where(union_i > 0, inter_i / union_i, 0.0)
        sim[i, :] = row
        sim[:, i] = row
        sim[i, i] = -1.0
    keep = [k for k in range(n) if alive[k]]
    return [groups[k] for k in keep], sig[keep] > 0


def _unit_edge_counts(h: Hypergraph, unit: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Edge ids touched by the unit's nodes and how many unit nodes sit in each."""
    member = np.zeros(h.n_nodes, dtype=bool)
    member[unit] = True
    eids, counts = [], []
    for ei, e in enumerate(h.edges):
        c = int(member[e].sum())
        if c:
            eids.append(ei)
            counts.append(c)
    return np.array(eids, dtype=np.int64), np.array(counts, dtype=np.int64)


def _refine(
    h: Hypergraph,
    assign: np.ndarray,
    units: list[np.ndarray],
    t1: int,
    limit: int,
    swaps: bool = False,
) -> np.ndarray:
    """Greedy positive-gain move (and optionally pair-swap) passes to a fixpoint.

    Swaps exchange two units between groups, so they work even when both
    groups sit at the balance ceiling and single moves are blocked.
    """
    assign = assign.copy()
    n_edges = len(h.edges)
    counts = np.zeros((n_edges, t1), dtype=np.int64)
    for ei, e in enumerate(h.edges):
        np.add.at(counts[ei], assign[e], 1)
    group_sizes = np.bincount(assign, minlength=t1)
    unit_edges = [_unit_edge_counts(h, u) for u in units]
    unit_group = np.array([assign[u[0]] for u in units])

    def apply_move(ui: int, dst: int):
        src = unit_group[ui]
        eids, ucnt = unit_edges[ui]
        assign[units[ui]] = dst
        unit_group[ui] = dst
        group_sizes[src] -= units[ui].size
        group_sizes[dst] += units[ui].size
        counts[eids, src] -= ucnt
        counts[eids, dst] += ucnt

    def move_pass() -> bool:
        moved = False
        for ui in range(len(units)):
            src = unit_group[ui]
            eids, ucnt = unit_edges[ui]
            if eids.size == 0:
                continue
            sub = counts[eids]
            drop = int(np.sum(sub[np.arange(eids.size), src] == ucnt))
            adds = np.sum(sub == 0, axis=0)  # per-group count of untouched edges
            gains = drop - adds
            gains[src] = 0
            fits = group_sizes + units[ui].size <= limit
            fits[src] = False
            gains = np.where(fits, gains, np.iinfo(np.int64).min)
            dst = int(np.argmax(gains))
            if gains[dst] > 0:
                apply_move(ui, dst)
                moved = True
        return moved

    def swap_gain(ui: int, uj: int) -> int:
        a, b = unit_group[ui], unit_group[uj]
        ei, ci = unit_edges[ui]
        ej, cj = unit_edges[uj]
        eids = np.union1d(ei, ej)
        cu = np.zeros(eids.size, dtype=np.int64)
        cv = np.zeros(eids.size, dtype=np.int64)
        cu[np.searchsorted(eids, ei)] = ci
        cv[np.searchsorted(eids, ej)] = cj
        ca, cb = counts[eids, a], counts[eids, b]
        gain = int(
            np.sum((ca > 0).astype(np.int64) - (ca - cu + cv > 0))
            + np.sum((cb > 0).astype(np.int64) - (cb - cv + cu > 0))
        )
        return gain

    def swap_pass() -> bool:
        swapped = False
        for ui in range(len(units)):
            for uj in range(ui + 1, len(units)):
                a, b = unit_group[ui], unit_group[uj]
                if a == b:
                    continue
                delta = units[uj].size - units[ui].size
                if (
                    group_sizes[a] + delta > limit
                    or group_sizes[b] - delta > limit
                ):
                    continue
                if swap_gain(ui, uj) > 0:
                    apply_move(ui, b)
                    apply_move(uj, a)
                    swapped = True
        return swapped

    for _ in range(_MAX_PASSES):
        changed = move_pass()
        if swaps and swap_pass():
            changed = True
        if not changed:
            break
    return assign


def _initial_assignment(
    sizes: np.ndarray, t1: int, limit: int, rng: np.random.Generator
) -> np.ndarray:
    """Random-order first-fit onto the currently smallest group."""
    order = rng.permutation(sizes.size)
    group_sizes = np.zeros(t1, dtype=np.int64)
    out = np.zeros(sizes.size, dtype=np.int64)
    for ui in order:
        fits = np.flatnonzero(group_sizes + sizes[ui] <= limit)
        pool = fits if fits.size else np.arange(t1)
        g = pool[np.argmin(group_sizes[pool])]
        out[ui] = g
        group_sizes[g] += sizes[ui]
    return out


def _affinity_assignment(
    sizes: np.ndarray, sigs: np.ndarray, t1: int, limit: int
) -> np.ndarray:
    """Deterministic seeding: place each supernode with its best edge overlap.

    Supernodes go in size-descending order.  A supernode joins the fitting
    group sharing the most edges with it, but only when that overlap covers
    at least half of its own edges; weak overlaps (stray noise columns) fall
    through to the emptiest fitting group instead of poisoning a cluster.
    """
    n = sizes.size
    total = int(sizes.sum())
    order = np.lexsort((np.arange(n), -sizes))
    group_sizes = np.zeros(t1, dtype=np.int64)
    group_sigs = np.zeros((t1, sigs.shape[1]), dtype=bool)
    out = np.zeros(n, dtype=np.int64)
    for ui in order:
        own = int(sigs[ui].sum())
        overlap = (group_sigs & sigs[ui]).sum(axis=1)
        strong = overlap * 2 >= own if own else np.zeros(t1, dtype=bool)
        fits = group_sizes + sizes[ui] <= limit
        if not fits.any():
            fits[:] = True
        key = np.where(
            fits & strong, overlap * (total + 1) - group_sizes, -(total + 10)
        )
        g = int(np.argmax(key))
        if key[g] <= -(total + 10):
            pool = np.flatnonzero(fits)
            g = int(pool[np.argmin(group_sizes[pool])])
        out[ui] = g
        group_sizes[g] += sizes[ui]
        group_sigs[g] |= sigs[ui]
    return out


def partition(h: Hypergraph, t1: int, seed: int) -> np.ndarray:
    """Assign every row to one of t1 groups, minimizing the connectivity cut.

    Deterministic under (h, t1, seed).  Group sizes respect the balance
    limit ceil((1 + 0.2) * rows / t1).
    """
    if t1 < 1:
        raise ParameterError(f"t1 must be >= 1, got {t1}")
    if h.n_nodes == 0:
        return np.zeros(0, dtype=np.int64)
    if t1 == 1:
        return np.zeros(h.n_nodes, dtype=np.int64)
    limit = balance_limit(h.n_nodes, t1)
    inc = _incidence(h)
    supernodes, sn_sigs = _coarsen(inc, _COARSEN_FACTOR * t1, limit)
    sn_sizes = np.array([u.size for u in supernodes], dtype=np.int64)
    singletons = [np.array([i]) for i in range(h.n_nodes)]

    fine_swaps = h.n_nodes <= _SWAP_NODE_CAP
    best_assign = None
    best_cut = None
    for restart in range(_RESTARTS):
        if restart == 0:
            sn_assign = _affinity_assignment(sn_sizes, sn_sigs, t1, limit)
        else:
            rng = np.random.default_rng([seed & 0xFFFFFFFF, restart])
            sn_assign = _initial_assignment(sn_sizes, t1, limit, rng)
        assign = np.zeros(h.n_nodes, dtype=np.int64)
        for u, g in zip(supernodes, sn_assign):
            assign[u] = g
        assign = _refine(h, assign, supernodes, t1, limit, swaps=True)
        assign = _refine(h, assign, singletons, t1, limit, swaps=fine_swaps)
        cut = connectivity_cut(h, assign)
        if best_cut is None or cut < best_cut:
            best_cut = cut
            best_assign = assign
    return best_assign


@dataclass(frozen=True)
class DenseBlock:
    """A rectangle of retained weights: sorted row indices x sorted column indices."""

    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("rows", "cols"):
            idx = np.asarray(getattr(self, name), dtype=np.int64)
            if idx.size == 0:
                raise LayoutError(f"block {name} must be nonempty")
            if np.any(idx < 0):
                raise LayoutError(f"block {name} must be nonnegative")
            if np.any(np.diff(idx) <= 0):
                raise LayoutError(f"block {name} must be sorted and unique")
            idx = np.ascontiguousarray(idx)
            idx.flags.writeable = False
            object.__setattr__(self, name, idx)

    @property
    def cells(self) -> int:
        return self.rows.size * self.cols.size


@dataclass(frozen=True)
class BlockLayout:
    """All dense blocks extracted from one layer's mask."""

    layer_name: str
    blocks: tuple
    shape: LayerShape

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        for b in self.blocks:
            if b.rows[-1] >= self.shape.c_out or b.cols[-1] >= self.shape.n:
                raise LayoutError(
                    f"layout {self.layer_name}: block exceeds "
                    f"{self.shape.c_out} x {self.shape.n}"
                )
        for i in range(len(self.blocks)):
            for j in range(i + 1, len(self.blocks)):
                a, b = self.blocks[i], self.blocks[j]
                if (
                    np.intersect1d(a.rows, b.rows).size
                    and np.intersect1d(a.cols, b.cols).size
                ):
                    raise LayoutError(
                        f"layout {self.layer_name}: blocks {i} and {j} overlap"
                    )

    @property
    def cells(self) -> int:
        return sum(b.cells for b in self.blocks)

    def coverage_bits(self) -> np.ndarray:
        bits = np.zeros((self.shape.c_out, self.shape.n), dtype=bool)
        for b in self.blocks:
            bits[np.ix_(b.rows, b.cols)] = True
        return bits


@dataclass(frozen=True)
class RegroupParams:
    """Knobs of the block search.

    t1 defaults to max(1, rows // 64); t2 defaults to ceil(b1 / 2).
    b2 = 32 keeps block row counts aligned with the 32-row GEMM split.
    """

    t1: int | None = None
    t2: int | None = None
    b1: int = 16
    b2: int = 32
    max_iters: int = 8
    seed: int = 42

    def __post_init__(self):
        for name in ("t1", "t2"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ParameterError(f"{name} must be >= 1, got {v}")
        for name in ("b1", "b2", "max_iters"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")

    def resolve(self, rows: int) -> tuple[int, int]:
        t1 = self.t1 if self.t1 is not None else max(1, rows // 64)
        t2 = self.t2 if self.t2 is not None else math.ceil(self.b1 / 2)
        return t1, t2


def extract_blocks(mask: SparseMask, params: RegroupParams) -> BlockLayout:
    """Repeatedly partition uncovered rows and carve out dense blocks.

    Per iteration: partition uncovered rows into t1 groups; a group with
    >= b1 rows admits the columns holding >= t2 set bits within it; if
    >= b2 columns qualify, the (group rows x admitted columns) rectangle
    becomes a block and its rows are consumed.  Stops when an iteration
    emits nothing or after max_iters.
    """
    t1, t2 = params.resolve(mask.shape.c_out)
    covered = np.zeros(mask.shape.c_out, dtype=bool)
    blocks: list[DenseBlock] = []
    for it in range(params.max_iters):
        rows = np.flatnonzero(~covered)
        if rows.size == 0:
            break
        sub = mask.bits[rows]
        h = _hypergraph_from_bits(sub)
        assign = partition(h, t1, params.seed + it)
        emitted = False
        for g in range(t1):
            grows = rows[assign == g]
            if grows.size < params.b1:
                continue
            col_counts = mask.bits[grows].sum(axis=0)
            cols = np.flatnonzero(col_counts >= t2)
            if cols.size < params.b2:
                continue
            blocks.append(DenseBlock(np.sort(grows), cols))
            covered[grows] = True
            emitted = True
        if not emitted:
            break
    return BlockLayout(mask.layer_name, tuple(blocks), mask.shape)


def regroup_mask(
    mask: SparseMask, weights: WeightTensor | None, params: RegroupParams
) -> tuple[SparseMask, BlockLayout]:
    """Group-wise restructuring: refill inside blocks, clear everything else.

    The returned mask is exactly the layout's cell coverage.  Weights are
    accepted for interface parity with refilling but do not influence the
    block search, which is count-based; refilled positions simply become
    trainable again under whatever weight snapshot the caller retrains from.
    """
    layout = extract_blocks(mask, params)
    return mask.with_bits(layout.coverage_bits()), layout
