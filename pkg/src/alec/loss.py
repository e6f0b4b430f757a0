"""Training losses and an exact, grid-accelerated nearest-neighbor search.

The index is a uniform spatial hash over the target points (cell size =
bounding-box diagonal / ceil(N^(1/3))). Queries examine cells ring by ring
(Chebyshev shells) and settle once the best squared distance provably beats
anything outside the examined rings, so results are exact, with distance
ties broken by the lowest target index -- identical to a brute-force scan.

Chamfer/normal/color losses recompute the matching per call and treat it as
constant during backward (subgradient at match-switch points). The three
losses share one X->Y search when the caller passes the match explicitly.
"""

import numpy as np

from .tensor import Tensor, absolute, gather, square, sub, tsum

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False


class LossError(ValueError):
    pass


# ---------------------------------------------------------------------------
# spatial hash grid

_SHELL_CACHE = {}


def _shell_offsets(r):
    """Integer offsets with Chebyshev norm exactly r, as an (n,3) array."""
    if r in _SHELL_CACHE:
        return _SHELL_CACHE[r]
    rng = np.arange(-r, r + 1)
    grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    shell = grid[np.abs(grid).max(axis=1) == r]
    _SHELL_CACHE[r] = shell
    return shell


# first pass scans the full 3x3x3 neighborhood (probe only sampled one point
# from the query's own cell)
_CUBE1 = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), axis=-1).reshape(-1, 3)


class GridIndex:
    """Uniform hash grid over a fixed target point set; queries are exact."""

    def __init__(self, points):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise LossError("GridIndex needs a non-empty (N,3) target set")
        self.points = points
        n = len(points)
        self.bbox_min = points.min(axis=0)
        self.bbox_max = points.max(axis=0)
        diag = float(np.linalg.norm(self.bbox_max - self.bbox_min))
        m = int(np.ceil(n ** (1.0 / 3.0)))
        self.cell = diag / m if diag > 0 else 1.0
        extent = self.bbox_max - self.bbox_min
        self.dims = np.maximum(1, np.floor(extent / self.cell).astype(np.int64) + 1)
        ids = self._cell_ids(points, clamp=True)
        ncells = int(self.dims.prod())
        counts = np.bincount(ids, minlength=ncells)
        self.bucket_end = np.cumsum(counts)
        self.bucket_start = self.bucket_end - counts
        self.order = np.argsort(ids, kind="stable")
        self.points_sorted = points[self.order]  # contiguous per-bucket reads
        self.max_ring = int(self.dims.max())  # covers the grid from any cell

    def _coords(self, pts):
        return np.floor((pts - self.bbox_min) / self.cell).astype(np.int64)

    def _cell_ids(self, pts, clamp=False):
        c = self._coords(pts)
        if clamp:
            c = np.clip(c, 0, self.dims - 1)
        return (c[:, 0] * self.dims[1] + c[:, 1]) * self.dims[2] + c[:, 2]

    def query(self, queries, chunk=65536):
        """Exact nearest target for each query row: (indices, squared distances)."""
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[1] != 3:
            raise LossError("queries must be (n,3)")
        if _HAVE_NUMBA:
            idx = np.empty(len(queries), dtype=np.int64)
            d2 = np.empty(len(queries))
            _query_kernel(queries, self.points_sorted, self.order, self.bucket_start,
                          self.bucket_end, self.dims, self.bbox_min, self.cell, idx, d2)
            return idx, d2
        if len(queries) > chunk:
            parts = [self.query(queries[i : i + chunk]) for i in range(0, len(queries), chunk)]
            return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
        return self._query_block(queries)

    def _query_block(self, q):
        n = len(q)
        cc = np.clip(self._coords(q), 0, self.dims - 1)
        own = (cc[:, 0] * self.dims[1] + cc[:, 1]) * self.dims[2] + cc[:, 2]
        best_d2 = np.full(n, np.inf)
        best_idx = np.full(n, -1, dtype=np.int64)

        # seed the running best with one probe point from the query's own cell
        # (a valid upper bound); shells then prune against it immediately
        has = self.bucket_end[own] > self.bucket_start[own]
        if has.any():
            pos = self.bucket_start[own[has]]
            diff = q[has] - self.points_sorted[pos]
            best_d2[has] = (diff * diff).sum(axis=1)
            best_idx[has] = self.order[pos]

        active = np.arange(n)
        r = 1
        while len(active):
            shell = _shell_offsets(r) if r > 1 else _CUBE1
            self._scan_shell(q[active], cc[active], active, shell, r, best_d2, best_idx)
            # anything beyond ring r is at least r * cell away
            bound = (r * self.cell) ** 2
            done = best_d2[active] < bound
            if r >= self.max_ring:
                done = best_d2[active] < np.inf  # every cell visited
            active = active[~done]
            r += 1
        return best_idx, best_d2

    def _scan_shell(self, qa, cca, active, shell, r, best_d2, best_idx):
        a = len(qa)
        h = self.cell
        # per-axis squared gaps from each query to cells offset -r..r, with
        # out-of-range cells forced to +inf; shell bound = sum over axes
        fr = qa - (self.bbox_min + cca * h)  # position within own cell
        offs = np.arange(-r, r + 1)
        ax2 = np.empty((3, a, 2 * r + 1))
        for d in range(3):
            neg = fr[:, d, None] + (-offs[None, :] - 1) * h
            posg = (h - fr[:, d, None]) + (offs[None, :] - 1) * h
            g = np.where(offs[None, :] < 0, neg, np.where(offs[None, :] > 0, posg, 0.0))
            oor = (cca[:, d, None] + offs[None, :] < 0) | (cca[:, d, None] + offs[None, :] >= self.dims[d])
            g = np.where(oor, np.inf, np.maximum(g, 0.0))
            ax2[d] = g * g
        si = shell + r  # shell offsets shifted to table indices
        lb2 = ax2[0][:, si[:, 0]] + ax2[1][:, si[:, 1]] + ax2[2][:, si[:, 2]]
        # keep any in-range cell that could still hold an equal-or-better
        # match; the small inflation absorbs rounding in the bound arithmetic
        ok = (lb2 <= best_d2[active][:, None] * (1.0 + 1e-9)) & (lb2 < np.inf)
        qrow, scol = np.nonzero(ok)  # sparse surviving (query, cell) pairs
        if len(qrow) == 0:
            return
        cells = cca[qrow] + shell[scol]
        ids = (cells[:, 0] * self.dims[1] + cells[:, 1]) * self.dims[2] + cells[:, 2]
        starts = self.bucket_start[ids]
        cnt = self.bucket_end[ids] - starts
        live = cnt > 0
        if not live.any():
            return
        qrow, starts, cnt = qrow[live], starts[live], cnt[live]
        total = int(cnt.sum())
        span_ends = np.cumsum(cnt)
        pos = np.arange(total) - np.repeat(span_ends - cnt, cnt) + np.repeat(starts, cnt)
        cand_row = np.repeat(qrow, cnt)  # qrow ascending -> grouped per query

        diff = qa[cand_row] - self.points_sorted[pos]
        d2 = (diff * diff).sum(axis=1)
        cand = self.order[pos]

        bounds = np.flatnonzero(np.diff(cand_row)) + 1
        bounds = np.concatenate(([0], bounds))
        seg_len = np.diff(np.concatenate((bounds, [total])))
        rows_present = cand_row[bounds]
        row_min = np.minimum.reduceat(d2, bounds)
        tie = d2 == np.repeat(row_min, seg_len)
        masked_idx = np.where(tie, cand, len(self.points))
        row_arg = np.minimum.reduceat(masked_idx, bounds)

        rows = active[rows_present]
        better = row_min < best_d2[rows]
        equal = (row_min == best_d2[rows]) & (row_arg < best_idx[rows])
        upd = better | equal
        best_d2[rows[upd]] = np.where(better, row_min, best_d2[rows])[upd]
        best_idx[rows[upd]] = row_arg[upd]


if _HAVE_NUMBA:

    @numba.njit(parallel=True, cache=True)
    def _query_kernel(q, pts, order, bstart, bend, dims, bmin, h, out_idx, out_d2):
        # same ring expansion as the numpy path, one query per thread; d2 is
        # accumulated as ((xx + yy) + zz) to stay bit-identical to numpy sums
        nx, ny, nz = dims[0], dims[1], dims[2]
        for i in numba.prange(q.shape[0]):
            qx, qy, qz = q[i, 0], q[i, 1], q[i, 2]
            cx = min(max(int(np.floor((qx - bmin[0]) / h)), 0), nx - 1)
            cy = min(max(int(np.floor((qy - bmin[1]) / h)), 0), ny - 1)
            cz = min(max(int(np.floor((qz - bmin[2]) / h)), 0), nz - 1)
            # in-cell offsets, clamped so bounds stay valid for outside queries
            fx = min(max(qx - (bmin[0] + cx * h), 0.0), h)
            fy = min(max(qy - (bmin[1] + cy * h), 0.0), h)
            fz = min(max(qz - (bmin[2] + cz * h), 0.0), h)
            mr = max(max(cx, nx - 1 - cx), max(cy, ny - 1 - cy), max(cz, nz - 1 - cz))
            best = np.inf
            bidx = -1
            r = 0
            while True:
                thr = best * (1.0 + 1e-9)
                for dx in range(-r, r + 1):
                    x = cx + dx
                    if x < 0 or x >= nx:
                        continue
                    gx = 0.0
                    if dx < 0:
                        gx = fx + (-dx - 1) * h
                    elif dx > 0:
                        gx = (h - fx) + (dx - 1) * h
                    gx2 = gx * gx
                    if gx2 > thr:
                        continue
                    for dy in range(-r, r + 1):
                        y = cy + dy
                        if y < 0 or y >= ny:
                            continue
                        gy = 0.0
                        if dy < 0:
                            gy = fy + (-dy - 1) * h
                        elif dy > 0:
                            gy = (h - fy) + (dy - 1) * h
                        gxy2 = gx2 + gy * gy
                        if gxy2 > thr:
                            continue
                        # stay on the Chebyshev shell: interior cells were
                        # already scanned on earlier rings
                        if abs(dx) == r or abs(dy) == r:
                            zlo, zhi, zstep = -r, r, 1
                        else:
                            zlo, zhi, zstep = -r, r, max(2 * r, 1)
                        for dz in range(zlo, zhi + 1, zstep):
                            z = cz + dz
                            if z < 0 or z >= nz:
                                continue
                            gz = 0.0
                            if dz < 0:
                                gz = fz + (-dz - 1) * h
                            elif dz > 0:
                                gz = (h - fz) + (dz - 1) * h
                            if gxy2 + gz * gz > thr:
                                continue
                            cell = (x * ny + y) * nz + z
                            for p in range(bstart[cell], bend[cell]):
                                ddx = qx - pts[p, 0]
                                ddy = qy - pts[p, 1]
                                ddz = qz - pts[p, 2]
                                d2 = (ddx * ddx + ddy * ddy) + ddz * ddz
                                if d2 < best:
                                    best = d2
                                    bidx = order[p]
                                    thr = best * (1.0 + 1e-9)
                                elif d2 == best and order[p] < bidx:
                                    bidx = order[p]
                if best < (r * h) * (r * h) * (1.0 - 1e-9):
                    break
                if r >= mr:
                    break
                r += 1
            out_idx[i] = bidx
            out_d2[i] = best


def nearest_neighbor(queries, index):
    """Exact nearest-neighbor lookup; ties go to the lowest target index."""
    if not isinstance(index, GridIndex):
        index = GridIndex(index)
    return index.query(np.asarray(queries))


# ---------------------------------------------------------------------------
# losses


class LossWeights:
    """Nonnegative weights for the distance/normal/residual/color terms."""

    __slots__ = ("distance", "normal", "residual", "color")

    def __init__(self, distance=0.0, normal=0.0, residual=0.0, color=0.0):
        for name, v in (("distance", distance), ("normal", normal),
                        ("residual", residual), ("color", color)):
            if v < 0:
                raise LossError(f"loss weight '{name}' must be nonnegative")
        self.distance = float(distance)
        self.normal = float(normal)
        self.residual = float(residual)
        self.color = float(color)

    def __iter__(self):
        return iter((self.distance, self.normal, self.residual, self.color))

    def __eq__(self, other):
        return tuple(self) == tuple(other)

    def __repr__(self):
        return (f"LossWeights(distance={self.distance}, normal={self.normal}, "
                f"residual={self.residual}, color={self.color})")


def _as_points(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def match_clouds(x, y):
    """Shared matching for the chamfer/normal/color terms: (idx x->y, idx y->x)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    y = np.asarray(y)
    idx_xy, _ = GridIndex(y).query(x)
    idx_yx, _ = GridIndex(x).query(y)
    return idx_xy, idx_yx


def chamfer(x, y, match=None):
    """Bidirectional mean squared nearest-neighbor distance.

    x: predicted points (Tensor or array, n x 3, differentiable); y: target
    array (m x 3, treated as data). The matching is held fixed for backward.
    """
    x = _as_points(x)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise LossError("chamfer needs two non-empty point sets")
    if match is None:
        match = match_clouds(x, y)
    idx_xy, idx_yx = match
    fwd = tsum(square(sub(x, Tensor(y[idx_xy], dtype=x.dtype))))
    bwd = tsum(square(sub(gather(x, idx_yx), Tensor(y, dtype=x.dtype))))
    return fwd * (1.0 / len(x.data)) + bwd * (1.0 / len(y))


def normal_loss(x, nx, y, ny, match=None):
    """Mean L1 gap between each predicted normal and its nearest target's normal."""
    nx = _as_points(nx)
    x = _as_points(x)
    if len(nx.data) != len(x.data):
        raise LossError("normal_loss: points and normals disagree in length")
    if len(np.asarray(ny)) != len(np.asarray(y)):
        raise LossError("normal_loss: target points and normals disagree in length")
    idx = match[0] if match is not None else GridIndex(np.asarray(y, dtype=np.float64)).query(x.data)[0]
    target = np.asarray(ny, dtype=np.float64)[idx]
    return tsum(absolute(sub(nx, Tensor(target, dtype=nx.dtype)))) * (1.0 / len(nx.data))


def residual_reg(r):
    """Mean squared residual norm over all predicted points."""
    r = _as_points(r)
    return tsum(square(r)) * (1.0 / len(r.data))


def color_loss(x, cx, y, cy, match=None):
    """Mean L1 color gap against the nearest target point (x -> y direction)."""
    cx = _as_points(cx)
    x = _as_points(x)
    if len(cx.data) != len(x.data):
        raise LossError("color_loss: points and colors disagree in length")
    idx = match[0] if match is not None else GridIndex(np.asarray(y, dtype=np.float64)).query(x.data)[0]
    target = np.asarray(cy, dtype=np.float64)[idx]
    return tsum(absolute(sub(cx, Tensor(target, dtype=cx.dtype)))) * (1.0 / len(cx.data))


def total_loss(parts, weights):
    """Weighted sum of the available loss parts; missing parts contribute zero.

    parts: mapping with optional keys 'distance', 'normal', 'residual',
    'color' (Tensor values). Returns a scalar Tensor.
    """
    names = ("distance", "normal", "residual", "color")
    total = None
    zero_like = None
    for name, w in zip(names, weights):
        part = parts.get(name)
        if part is None:
            continue
        zero_like = part
        if w == 0.0:
            continue
        term = part * w
        total = term if total is None else total + term
    if total is None:
        if zero_like is None:
            return Tensor(np.float64(0.0))
        return zero_like * 0.0
    return total
