"""Spatial bias field estimation on a uniform cell grid.

Every cross-cell correspondence, combined with the already-estimated
temporal parameters, pins the difference of two cells' biases:
``r_n - r_m = i_to * exp(a) - i_from + b``.  Stacking these rows gives a
sparse system whose normal equations have graph-Laplacian structure (each row
touches exactly two cells), solvable only up to a constant per connected
component; the solve therefore runs on the largest component with a mean-zero
gauge.  Cells outside it are later filled by GP regression.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import ConfigError, DataError, SolverFailureError
from .model import ParamChain, compose, inverse

__all__ = [
    "GridSpec",
    "DifferenceConstraint",
    "SpatialField",
    "UnionFind",
    "ConstraintAccumulator",
    "accumulate_constraints",
    "connected_components",
    "solve_spatial",
]

# Constraints with larger |rhs| are treated as gross outliers and discarded.
MAX_ABS_RHS = 0.5


@dataclass(frozen=True)
class GridSpec:
    """Uniform discretization of the image plane into cells_x * cells_y cells."""

    cells_x: int
    cells_y: int
    width: int
    height: int

    def __post_init__(self):
        if self.cells_x < 1 or self.cells_y < 1:
            raise ConfigError("grid needs at least one cell per axis")
        if self.width < self.cells_x or self.height < self.cells_y:
            raise ConfigError("image smaller than the cell grid")

    @property
    def n_cells(self) -> int:
        return self.cells_x * self.cells_y

    @property
    def cell_size(self) -> tuple[float, float]:
        return self.width / self.cells_x, self.height / self.cells_y

    def cell_index(self, x, y) -> np.ndarray:
        """Row-major cell index of pixel coordinates (vectorized)."""
        cw, ch = self.cell_size
        cx = np.minimum((np.asarray(x) / cw).astype(int), self.cells_x - 1)
        cy = np.minimum((np.asarray(y) / ch).astype(int), self.cells_y - 1)
        return cy * self.cells_x + cx

    def cell_centers(self) -> np.ndarray:
        """(n_cells, 2) pixel coordinates of cell centers, row-major order."""
        cw, ch = self.cell_size
        xs = (np.arange(self.cells_x) + 0.5) * cw
        ys = (np.arange(self.cells_y) + 0.5) * ch
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


@dataclass(frozen=True)
class DifferenceConstraint:
    """States r[cell_n] - r[cell_m] = rhs for two distinct cells."""

    cell_n: int
    cell_m: int
    rhs: float

    def __post_init__(self):
        if self.cell_n == self.cell_m:
            raise DataError("same-cell constraints carry no spatial information")
        if not math.isfinite(self.rhs):
            raise DataError("constraint rhs must be finite")


class ConstraintAccumulator:
    """Incremental constraint store behind a single writer.

    Keeps sums per (cell pair, frame pair) so duplicates average and memory
    stays bounded by the number of distinct keys.  ``constraints()`` emits a
    sorted snapshot, so accumulation order cannot affect downstream solves.
    """

    def __init__(self, grid: GridSpec, max_abs_rhs: float = MAX_ABS_RHS):
        self.grid = grid
        self.max_abs_rhs = max_abs_rhs
        self._acc: dict[tuple[int, int, int, int], list] = {}

    def add(self, cset, chain: ParamChain) -> None:
        rel = compose(
            inverse(chain.entry(cset.from_frame)), chain.entry(cset.to_frame)
        )
        rhs = cset.i_to * math.exp(rel.a) - cset.i_from + rel.b
        cm = self.grid.cell_index(cset.xy_from[:, 0], cset.xy_from[:, 1])
        cn = self.grid.cell_index(cset.xy_to[:, 0], cset.xy_to[:, 1])
        keep = (cn != cm) & (np.abs(rhs) <= self.max_abs_rhs)
        for n, m, value in zip(cn[keep], cm[keep], rhs[keep]):
            n, m, value = int(n), int(m), float(value)
            if n > m:  # canonical cell order, flip the difference
                n, m, value = m, n, -value
            key = (n, m, cset.from_frame, cset.to_frame)
            slot = self._acc.setdefault(key, [0.0, 0])
            slot[0] += value
            slot[1] += 1

    def __len__(self) -> int:
        return len(self._acc)

    def constraints(self) -> list[DifferenceConstraint]:
        out = [
            DifferenceConstraint(n, m, total / count)
            for (n, m, _, _), (total, count) in self._acc.items()
        ]
        out.sort(key=lambda c: (c.cell_n, c.cell_m, c.rhs))
        return out


def accumulate_constraints(
    sets,
    chain: ParamChain,
    grid: GridSpec,
    max_abs_rhs: float = MAX_ABS_RHS,
) -> list[DifferenceConstraint]:
    """Turn correspondence sets into averaged cross-cell difference constraints.

    The pair's relative temporal parameters are derived from the chain, so
    constraints are exact when the source frame sits at nominal gain and
    approximate otherwise (drift adjustment keeps frames near nominal).
    Same-cell pairs are dropped, |rhs| > ``max_abs_rhs`` discarded as gross
    outliers, and duplicates per (cell pair, frame pair) averaged.
    """
    acc = ConstraintAccumulator(grid, max_abs_rhs)
    for cset in sets:
        acc.add(cset, chain)
    return acc.constraints()


class UnionFind:
    """Disjoint sets over cell indices with path compression and union by size."""

    def __init__(self, size: int):
        self.parent = np.arange(size)
        self.size = np.ones(size, dtype=int)

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]


def connected_components(
    constraints, grid: GridSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Label cells linked by constraints; return (labels, largest component).

    ``labels`` is per-cell, -1 for cells appearing in no constraint.  Labels
    are assigned in increasing order of each component's smallest cell index,
    and the largest component breaks size ties by lowest cell index.
    """
    uf = UnionFind(grid.n_cells)
    observed = np.zeros(grid.n_cells, dtype=bool)
    for c in constraints:
        observed[c.cell_n] = observed[c.cell_m] = True
        uf.union(c.cell_n, c.cell_m)

    labels = np.full(grid.n_cells, -1, dtype=int)
    root_to_label: dict[int, int] = {}
    members: dict[int, list[int]] = {}
    for cell in np.nonzero(observed)[0]:
        root = uf.find(int(cell))
        label = root_to_label.setdefault(root, len(root_to_label))
        labels[cell] = label
        members.setdefault(label, []).append(int(cell))
    if not members:
        return labels, np.array([], dtype=int)
    best = min(members, key=lambda lab: (-len(members[lab]), members[lab][0]))
    return labels, np.array(members[best], dtype=int)


@dataclass
class SpatialField:
    """Per-cell bias values with provenance markers.

    ``r`` is NaN for cells with no estimate; ``source`` is 0 for unsolved,
    1 for cells solved from constraints, 2 for GP-predicted cells.
    """

    grid: GridSpec
    r: np.ndarray
    source: np.ndarray
    component_labels: np.ndarray = field(default=None)
    residual_rms: float | None = None

    SOURCE_NAMES = (None, "solved", "gp")

    def __post_init__(self):
        if self.component_labels is None:
            self.component_labels = np.full(self.grid.n_cells, -1, dtype=int)

    @classmethod
    def empty(cls, grid: GridSpec) -> "SpatialField":
        return cls(
            grid=grid,
            r=np.full(grid.n_cells, np.nan),
            source=np.zeros(grid.n_cells, dtype=int),
        )

    @property
    def solved_mask(self) -> np.ndarray:
        return self.source == 1

    @property
    def known_mask(self) -> np.ndarray:
        return self.source > 0

    def dense_cells(self) -> np.ndarray:
        """(cells_y, cells_x) grid of bias values, 0 where unknown."""
        filled = np.where(np.isnan(self.r), 0.0, self.r)
        return filled.reshape(self.grid.cells_y, self.grid.cells_x)

    def sample(self, x, y) -> np.ndarray:
        """Bilinear bias lookup at pixel coordinates from the cell-center lattice."""
        cells = self.dense_cells()
        cw, ch = self.grid.cell_size
        gx = np.clip(np.asarray(x, dtype=float) / cw - 0.5, 0.0, self.grid.cells_x - 1.0)
        gy = np.clip(np.asarray(y, dtype=float) / ch - 0.5, 0.0, self.grid.cells_y - 1.0)
        x0 = np.floor(gx).astype(int)
        y0 = np.floor(gy).astype(int)
        x1 = np.minimum(x0 + 1, self.grid.cells_x - 1)
        y1 = np.minimum(y0 + 1, self.grid.cells_y - 1)
        fx = gx - x0
        fy = gy - y0
        top = (1 - fx) * cells[y0, x0] + fx * cells[y0, x1]
        bot = (1 - fx) * cells[y1, x0] + fx * cells[y1, x1]
        return (1 - fy) * top + fy * bot

    def pixel_map(self, width: int | None = None, height: int | None = None) -> np.ndarray:
        """Dense per-pixel bias image via bilinear upsampling."""
        w = width or self.grid.width
        h = height or self.grid.height
        xs = np.arange(w) + 0.5
        ys = np.arange(h) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        return self.sample(gx, gy)

    def to_json(self, path) -> None:
        payload = {
            "cells_x": self.grid.cells_x,
            "cells_y": self.grid.cells_y,
            "image_width": self.grid.width,
            "image_height": self.grid.height,
            "residual_rms": self.residual_rms,
            "r": [None if math.isnan(v) else v for v in self.r],
            "source": [self.SOURCE_NAMES[s] for s in self.source],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def from_json(cls, path) -> "SpatialField":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        try:
            grid = GridSpec(
                payload["cells_x"],
                payload["cells_y"],
                payload["image_width"],
                payload["image_height"],
            )
            r = np.array(
                [np.nan if v is None else float(v) for v in payload["r"]]
            )
            source = np.array(
                [cls.SOURCE_NAMES.index(s) for s in payload["source"]], dtype=int
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}: malformed spatial field: {exc}") from exc
        if r.shape[0] != grid.n_cells or source.shape[0] != grid.n_cells:
            raise DataError(f"{path}: cell count mismatch")
        return cls(grid=grid, r=r, source=source, residual_rms=payload.get("residual_rms"))

    def to_pgm(self, path) -> None:
        """Grayscale rendering at image resolution: mid-gray is zero bias,
        full scale is the maximum |r|."""
        from .io import write_pgm

        img = self.pixel_map()
        peak = np.nanmax(np.abs(img)) if img.size else 0.0
        if peak <= 0:
            gray = np.full(img.shape, 128, dtype=np.uint8)
        else:
            gray = np.clip(np.rint(128.0 + 127.0 * img / peak), 0, 255).astype(np.uint8)
        write_pgm(path, gray)


def solve_spatial(
    constraints,
    component: np.ndarray,
    grid: GridSpec,
    labels: np.ndarray | None = None,
) -> SpatialField:
    """Least-squares solve of the difference system on one component.

    Minimizes the stacked constraint residuals subject to the mean-zero gauge
    (component biases are only determined up to a constant): the normal
    equations form a graph Laplacian of rank |component| - 1, so one cell is
    grounded to make the system definite and the solution is mean-centered
    afterwards, which lands on the same gauge without the fill-in a dense
    gauge row would cause.
    """
    component = np.asarray(component, dtype=int)
    if component.size == 0:
        raise SolverFailureError("empty component")
    local = {int(c): i for i, c in enumerate(component)}
    rows = [
        (local[c.cell_n], local[c.cell_m], c.rhs)
        for c in constraints
        if c.cell_n in local and c.cell_m in local
    ]
    if not rows:
        raise SolverFailureError("no constraints inside the component")

    k = component.size
    m = len(rows)
    data = np.empty(2 * m)
    data[0::2] = 1.0
    data[1::2] = -1.0
    indices = np.empty(2 * m, dtype=int)
    indices[0::2] = [r[0] for r in rows]
    indices[1::2] = [r[1] for r in rows]
    indptr = np.arange(0, 2 * m + 1, 2)
    A = sp.csr_matrix((data, indices, indptr), shape=(m, k))
    rhs = np.array([r[2] for r in rows])

    laplacian = (A.T @ A).tocsr()
    target = A.T @ rhs
    x = np.zeros(k)
    if k > 1:
        grounded = laplacian[1:, 1:]
        try:
            if k <= 2048:
                from scipy.linalg import cho_factor, cho_solve

                x[1:] = cho_solve(cho_factor(grounded.toarray()), target[1:])
            else:
                x[1:] = spsolve(grounded.tocsc(), target[1:])
        except Exception as exc:
            raise SolverFailureError(
                f"singular spatial system beyond the gauge: {exc}"
            ) from exc
    if not np.all(np.isfinite(x)):
        raise SolverFailureError("singular spatial system beyond the gauge")
    x -= x.mean()

    field_values = np.full(grid.n_cells, np.nan)
    field_values[component] = x
    source = np.zeros(grid.n_cells, dtype=int)
    source[component] = 1
    residual = A @ x - rhs
    return SpatialField(
        grid=grid,
        r=field_values,
        source=source,
        component_labels=labels if labels is not None else None,
        residual_rms=float(np.sqrt(np.mean(residual**2))),
    )
