"""Intensity-augmented normal-distributions maps.

Each grid cell keeps the sufficient statistics (count, sum, outer-product
sum) of the augmented points [x, y, intensity] that fell into it, so
incremental map updates reproduce batch statistics exactly. Cells need
``min_points`` samples before they are usable for matching; usable cells
expose a regularized covariance whose eigenvalues are floored relative to
the largest one, keeping the matching forms invertible for collinear
points or constant intensity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .se2 import Pose2

# eigenvalue floor, relative to the largest eigenvalue of the cell
_REL_FLOOR = 1e-3
# absolute guard so an all-identical-points cell still factorizes
_ABS_FLOOR = 1e-9


class NoUsableCellsError(RuntimeError):
    """Raised when an operation needs at least one usable cell."""


@dataclass(slots=True)
class UsableView:
    """Read-only snapshot of the usable cells of a grid."""

    keys: list[tuple[int, int]]
    means: np.ndarray  # (n, 3)
    covariances: np.ndarray  # (n, 3, 3), regularized
    rows: dict[tuple[int, int], int]
    bbox: tuple[int, int, int, int]  # i_lo, i_hi, j_lo, j_hi

    def __len__(self) -> int:
        return len(self.keys)


@dataclass(slots=True)
class NdtCell:
    count: int
    sum: np.ndarray
    outer_sum: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.sum / self.count

    @property
    def covariance(self) -> np.ndarray:
        """Sample covariance (divisor count - 1); zeros below two samples."""
        if self.count < 2:
            return np.zeros((3, 3))
        m = self.sum / self.count
        c = (self.outer_sum - self.count * np.outer(m, m)) / (self.count - 1)
        return 0.5 * (c + c.T)

    def regularized_covariance(self) -> np.ndarray:
        return regularize_covariance(self.covariance)

    def copy(self) -> "NdtCell":
        return NdtCell(self.count, self.sum.copy(), self.outer_sum.copy())


def regularize_covariance(cov: np.ndarray) -> np.ndarray:
    lam, u = np.linalg.eigh(cov)
    lam = np.maximum(lam, max(_REL_FLOOR * lam[-1], _ABS_FLOOR))
    return (u * lam) @ u.T


def _regularize_batch(covs: np.ndarray) -> np.ndarray:
    lam, u = np.linalg.eigh(covs)
    floor = np.maximum(_REL_FLOOR * lam[:, -1:], _ABS_FLOOR)
    lam = np.maximum(lam, floor)
    return np.einsum("nij,nj,nkj->nik", u, lam, u)


def recursive_update(cell: NdtCell, count: int, s: np.ndarray, outer: np.ndarray) -> NdtCell:
    """Merge incoming sufficient statistics into a cell (pure)."""
    if count == 0:
        return cell.copy()
    return NdtCell(cell.count + int(count), cell.sum + s, cell.outer_sum + outer)


def _group_stats(points: np.ndarray, resolution: float):
    """Per-cell sufficient statistics of an augmented point array."""
    ij = np.floor(points[:, :2] / resolution).astype(np.int64)
    uniq, inv = np.unique(ij, axis=0, return_inverse=True)
    m = uniq.shape[0]
    counts = np.bincount(inv, minlength=m)
    sums = np.empty((m, 3))
    for k in range(3):
        sums[:, k] = np.bincount(inv, weights=points[:, k], minlength=m)
    outers = np.empty((m, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            v = np.bincount(inv, weights=points[:, a] * points[:, b], minlength=m)
            outers[:, a, b] = v
            outers[:, b, a] = v
    return uniq, counts, sums, outers


class NdtGrid:
    """Sparse grid of augmented-Gaussian cells keyed by integer 2D index."""

    def __init__(self, resolution: float, min_points: int = 3):
        if resolution <= 0:
            raise ValueError(f"resolution must be positive, got {resolution}")
        self.resolution = float(resolution)
        self.min_points = int(min_points)
        self.cells: dict[tuple[int, int], NdtCell] = {}
        self._cache = None

    def cell_index(self, x: float, y: float) -> tuple[int, int]:
        r = self.resolution
        return (int(np.floor(x / r)), int(np.floor(y / r)))

    def add_points(self, points: np.ndarray) -> None:
        """Route augmented points to cells through the recursive update."""
        if points.size == 0:
            return
        uniq, counts, sums, outers = _group_stats(points, self.resolution)
        for row in range(uniq.shape[0]):
            key = (int(uniq[row, 0]), int(uniq[row, 1]))
            cell = self.cells.get(key)
            if cell is None:
                self.cells[key] = NdtCell(int(counts[row]), sums[row].copy(), outers[row].copy())
            else:
                cell.count += int(counts[row])
                cell.sum += sums[row]
                cell.outer_sum += outers[row]
        self._cache = None

    def usable_view(self) -> UsableView:
        """Snapshot of usable cells, cached until the next mutation.

        Consumers must not write into the returned arrays.
        """
        if self._cache is None:
            keys = sorted(k for k, c in self.cells.items() if c.count >= self.min_points)
            n = len(keys)
            means = np.empty((n, 3))
            covs = np.empty((n, 3, 3))
            for row, key in enumerate(keys):
                cell = self.cells[key]
                means[row] = cell.sum / cell.count
                m = means[row]
                c = (cell.outer_sum - cell.count * np.outer(m, m)) / (cell.count - 1)
                covs[row] = 0.5 * (c + c.T)
            if n:
                covs = _regularize_batch(covs)
                bbox = (
                    min(k[0] for k in keys),
                    max(k[0] for k in keys),
                    min(k[1] for k in keys),
                    max(k[1] for k in keys),
                )
            else:
                bbox = (0, 0, 0, 0)
            self._cache = UsableView(keys, means, covs, {k: i for i, k in enumerate(keys)}, bbox)
        return self._cache

    def n_usable(self) -> int:
        return len(self.usable_view())


def build_ndt(points: np.ndarray, resolution: float, min_points: int = 3) -> NdtGrid:
    """Grid of sample means/covariances of the points; empty input is fine."""
    grid = NdtGrid(resolution, min_points=min_points)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    grid.add_points(pts)
    return grid


@dataclass(slots=True)
class NdtSubmap:
    """Accumulated NDT anchored at a root pose in the global frame."""

    grid: NdtGrid
    root_pose: Pose2
    keyframe_ids: list[int] = field(default_factory=list)


def insert_scan(submap: NdtSubmap, points: np.ndarray, pose_in_root: Pose2) -> NdtSubmap:
    """Accumulate a scan expressed in the submap root frame.

    Only the geometric coordinates are transformed; intensity passes
    through unchanged.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.size:
        moved = pts.copy()
        moved[:, :2] = pose_in_root.transform_points(pts[:, :2])
        submap.grid.add_points(moved)
    return submap


def nearest_distributions(grid: NdtGrid, query_mean: np.ndarray, k: int) -> list[tuple[int, int]]:
    """Indices of the k usable cells geometrically closest to the query.

    Exact: rings of cell indices expand until one full ring lies beyond the
    current k-th best distance. Ties break on the lexicographic cell index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    view = grid.usable_view()
    if not view.keys:
        return []
    means, rows = view.means, view.rows
    qx, qy = float(query_mean[0]), float(query_mean[1])
    res = grid.resolution
    ci = grid.cell_index(qx, qy)
    i_lo, i_hi, j_lo, j_hi = view.bbox
    max_ring = max(
        abs(ci[0] - i_lo), abs(ci[0] - i_hi), abs(ci[1] - j_lo), abs(ci[1] - j_hi)
    )
    found: list[tuple[float, tuple[int, int]]] = []
    for ring in range(max_ring + 1):
        if len(found) >= k:
            found.sort()
            kth = found[k - 1][0]
            if (ring - 1) * res > 0 and (ring - 1) ** 2 * res * res > kth:
                break
        if ring == 0:
            ring_keys = [ci]
        else:
            ring_keys = []
            for di in range(-ring, ring + 1):
                if abs(di) == ring:
                    ring_keys.extend((ci[0] + di, ci[1] + dj) for dj in range(-ring, ring + 1))
                else:
                    ring_keys.append((ci[0] + di, ci[1] - ring))
                    ring_keys.append((ci[0] + di, ci[1] + ring))
        for key in ring_keys:
            row = rows.get(key)
            if row is None:
                continue
            dx = means[row, 0] - qx
            dy = means[row, 1] - qy
            found.append((dx * dx + dy * dy, key))
    found.sort()
    return [key for _, key in found[:k]]


def nearest_rows_for_means(grid: NdtGrid, query_means: np.ndarray, k: int) -> list[np.ndarray]:
    """Usable-view row indices of the k nearest cells for each query mean."""
    rows = grid.usable_view().rows
    out = []
    for q in query_means:
        hits = nearest_distributions(grid, q, k)
        out.append(np.array([rows[h] for h in hits], dtype=np.intp))
    return out


def cells_as_gmm(grid: NdtGrid):
    """Equal-weight mixture over usable cells: (weights, means, covariances)."""
    view = grid.usable_view()
    n = len(view)
    if n == 0:
        raise NoUsableCellsError("grid has no usable cells")
    return np.full(n, 1.0 / n), view.means.copy(), view.covariances.copy()


def dump_grid(grid: NdtGrid) -> str:
    """Debug table: one cell per line, tab-separated, 9 significant digits."""
    lines = []
    for key in sorted(grid.cells):
        cell = grid.cells[key]
        mean = cell.mean
        cov = cell.covariance
        fields = [str(key[0]), str(key[1]), str(cell.count)]
        fields += [f"{v:.9g}" for v in mean]
        fields += [f"{v:.9g}" for v in cov.reshape(-1)]
        lines.append("\t".join(fields))
    return "\n".join(lines)
