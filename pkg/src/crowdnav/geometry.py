"""Occupancy-grid map processing, polygon distances and 2D ray casting.

The pipeline turns a raw occupancy grid into a small set of simplified
polygon obstacles (threshold -> morphological closing -> contour trace ->
max-deviation simplification), and a :class:`MapModel` answers signed
distance and range-scan queries against those polygons.  All values are
immutable after construction and every operation is a pure function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "OccupancyGrid",
    "Polygon",
    "MapModel",
    "RayScan",
    "ScanSpec",
    "MapProcessParams",
    "process_map",
    "signed_distance",
    "ray_cast",
    "ray_cast_oracle",
    "segment_intersects_polygon",
    "load_grid",
    "save_map_model",
    "load_map_model",
]

DEFAULT_NUM_BEAMS = 180
DEFAULT_FOV = 2.0 * math.pi
DEFAULT_MAX_RANGE = 6.0


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OccupancyGrid:
    """Row-major byte grid: 0 = free, 255 = occupied, in-between = unknown.

    Cell (col, row) spans world x in [origin_x + col*res, +res) and y in
    [origin_y + row*res, +res); cells[row*width + col] indexes it.
    """

    width: int
    height: int
    resolution: float
    origin: tuple[float, float]
    cells: np.ndarray

    def __post_init__(self):
        cells = np.ascontiguousarray(np.asarray(self.cells, dtype=np.uint8))
        object.__setattr__(self, "cells", cells)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("grid must have positive dimensions")
        if self.resolution <= 0:
            raise ValueError("resolution must be > 0")
        if self.width * self.height != cells.size:
            raise ValueError(
                f"cell count {cells.size} != width*height {self.width * self.height}"
            )

    def as_matrix(self):
        """(height, width) view, row index = y cell index."""
        return self.cells.reshape(self.height, self.width)


@dataclass(frozen=True)
class Polygon:
    """Simple polygon, vertices counter-clockwise, coordinates in meters."""

    vertices: np.ndarray

    def __post_init__(self):
        verts = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        object.__setattr__(self, "vertices", verts)
        if verts.ndim != 2 or verts.shape[1] != 2 or verts.shape[0] < 3:
            raise ValueError(f"polygon needs >= 3 2D vertices, got shape {verts.shape}")
        if self.signed_area() <= 0:
            raise ValueError("polygon vertices must be counter-clockwise")
        if _ring_self_intersects(verts):
            raise ValueError("polygon must be simple (non-self-intersecting)")

    def signed_area(self):
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def edges(self):
        """(k, 2, 2) array of segments (start, end)."""
        return np.stack([self.vertices, np.roll(self.vertices, -1, axis=0)], axis=1)

    def contains(self, point):
        """Strict interior test (crossing number)."""
        return _point_in_ring(np.asarray(point, dtype=np.float64), self.vertices)


@dataclass(frozen=True)
class MapModel:
    """Processed obstacle polygons plus the bounding wall rectangle."""

    obstacles: tuple
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax

    _edge_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise ValueError(f"degenerate bounds {self.bounds}")
        for poly in self.obstacles:
            v = poly.vertices
            if (v[:, 0] < xmin - 1e-9).any() or (v[:, 0] > xmax + 1e-9).any() or (
                v[:, 1] < ymin - 1e-9
            ).any() or (v[:, 1] > ymax + 1e-9).any():
                raise ValueError("polygon vertex outside map bounds")

    def wall_segments(self):
        xmin, ymin, xmax, ymax = self.bounds
        corners = np.array(
            [[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]], dtype=np.float64
        )
        return np.stack([corners, np.roll(corners, -1, axis=0)], axis=1)

    def all_segments(self):
        """Every obstacle edge plus the four bounding walls, shape (E, 2, 2)."""
        if "segments" not in self._edge_cache:
            parts = [poly.edges() for poly in self.obstacles]
            parts.append(self.wall_segments())
            self._edge_cache["segments"] = np.ascontiguousarray(np.concatenate(parts, axis=0))
        return self._edge_cache["segments"]

    def obstacle_segments(self):
        """Obstacle edges only (no walls), shape (E, 2, 2)."""
        if "obstacle_segments" not in self._edge_cache:
            if self.obstacles:
                segs = np.concatenate([poly.edges() for poly in self.obstacles], axis=0)
            else:
                segs = np.zeros((0, 2, 2))
            self._edge_cache["obstacle_segments"] = np.ascontiguousarray(segs)
        return self._edge_cache["obstacle_segments"]

    def _bboxes(self):
        if "bboxes" not in self._edge_cache:
            self._edge_cache["bboxes"] = [
                (
                    poly.vertices[:, 0].min(),
                    poly.vertices[:, 1].min(),
                    poly.vertices[:, 0].max(),
                    poly.vertices[:, 1].max(),
                )
                for poly in self.obstacles
            ]
        return self._edge_cache["bboxes"]

    def contains_in_obstacle(self, point):
        x, y = float(point[0]), float(point[1])
        for poly, (xmin, ymin, xmax, ymax) in zip(self.obstacles, self._bboxes()):
            if xmin <= x <= xmax and ymin <= y <= ymax and poly.contains(point):
                return True
        return False

    def min_obstacle_distance(self, point):
        """Smallest signed distance from point to any polygon (walls excluded)."""
        segs = self.obstacle_segments()
        if len(segs) == 0:
            return math.inf
        d = float(np.min(point_segments_distance(np.asarray(point, dtype=np.float64), segs)))
        if d == 0.0:
            return 0.0
        return -d if self.contains_in_obstacle(point) else d

    def wall_distance(self, point):
        """Distance to the nearest bounding wall; negative outside the bounds."""
        xmin, ymin, xmax, ymax = self.bounds
        x, y = float(point[0]), float(point[1])
        return min(x - xmin, xmax - x, y - ymin, ymax - y)


@dataclass(frozen=True)
class RayScan:
    """Fixed-layout range scan; beam k points at heading - fov/2 + k*fov/(n-1)."""

    num_beams: int
    fov: float
    max_range: float
    ranges: np.ndarray

    def __post_init__(self):
        r = np.ascontiguousarray(np.asarray(self.ranges, dtype=np.float64))
        object.__setattr__(self, "ranges", r)
        if r.shape != (self.num_beams,):
            raise ValueError(f"expected {self.num_beams} ranges, got shape {r.shape}")
        if (r <= 0).any() or (r > self.max_range + 1e-12).any():
            raise ValueError("ranges must lie in (0, max_range]")


@dataclass(frozen=True)
class ScanSpec:
    num_beams: int = DEFAULT_NUM_BEAMS
    fov: float = DEFAULT_FOV
    max_range: float = DEFAULT_MAX_RANGE

    def beam_angles(self, heading):
        k = np.arange(self.num_beams, dtype=np.float64)
        return heading - self.fov / 2.0 + k * self.fov / (self.num_beams - 1)


@dataclass(frozen=True)
class MapProcessParams:
    occupied_threshold: int = 128
    closing_radius_cells: int = 2
    simplify_tolerance_cells: float = 2.0


# ---------------------------------------------------------------------------
# low-level geometry helpers
# ---------------------------------------------------------------------------


def _point_in_ring(point, verts):
    """Crossing-number parity test; boundary points are unspecified (callers
    that care pair this with a distance check)."""
    x, y = point
    inside = False
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            t = (y - y1) / (y2 - y1)
            if x < x1 + t * (x2 - x1):
                inside = not inside
    return inside


def _point_segment_distance(point, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.hypot(*(point - a)))
    t = float((point - a) @ ab) / denom
    t = min(1.0, max(0.0, t))
    closest = a + t * ab
    return float(np.hypot(*(point - closest)))


def _cross2(u, v):
    return u[0] * v[1] - u[1] * v[0]


def _segments_properly_intersect(p1, p2, p3, p4):
    d1 = _cross2(p4 - p3, p1 - p3)
    d2 = _cross2(p4 - p3, p2 - p3)
    d3 = _cross2(p2 - p1, p3 - p1)
    d4 = _cross2(p2 - p1, p4 - p1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _ring_self_intersects(verts):
    n = len(verts)
    segs = [(verts[i], verts[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j == i + 1) or (i == 0 and j == n - 1):
                continue  # adjacent edges share a vertex
            if _segments_properly_intersect(*segs[i], *segs[j]):
                return True
    return False


def signed_distance(point, poly):
    """Euclidean distance to the polygon boundary, negative strictly inside."""
    p = np.asarray(point, dtype=np.float64)
    verts = poly.vertices
    n = len(verts)
    d = min(
        _point_segment_distance(p, verts[i], verts[(i + 1) % n]) for i in range(n)
    )
    if d == 0.0:
        return 0.0
    return -d if _point_in_ring(p, verts) else d


def segment_intersects_polygon(a, b, poly):
    """True if segment a-b crosses any edge or has an endpoint inside."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    verts = poly.vertices
    n = len(verts)
    for i in range(n):
        if _segments_properly_intersect(a, b, verts[i], verts[(i + 1) % n]):
            return True
    return poly.contains(a) or poly.contains(b)


def point_segments_distance(point, segments):
    """Distances from one point to many segments; segments is (E, 2, 2)."""
    a = segments[:, 0, :]
    ab = segments[:, 1, :] - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.einsum("ij,ij->i", point[None, :] - a, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.hypot(point[0] - closest[:, 0], point[1] - closest[:, 1])


def segment_blocked(a, b, segments):
    """True if segment a-b properly crosses any of ``segments`` (E, 2, 2).

    Endpoint containment is not tested; callers with endpoints that may sit
    inside a polygon should pair this with contains checks.
    """
    if len(segments) == 0:
        return False
    p3 = segments[:, 0, :]
    p4 = segments[:, 1, :]
    r34 = p4 - p3
    d1 = r34[:, 0] * (a[1] - p3[:, 1]) - r34[:, 1] * (a[0] - p3[:, 0])
    d2 = r34[:, 0] * (b[1] - p3[:, 1]) - r34[:, 1] * (b[0] - p3[:, 0])
    rab = b - a
    d3 = rab[0] * (p3[:, 1] - a[1]) - rab[1] * (p3[:, 0] - a[0])
    d4 = rab[0] * (p4[:, 1] - a[1]) - rab[1] * (p4[:, 0] - a[0])
    return bool(np.any(((d1 > 0) != (d2 > 0)) & ((d3 > 0) != (d4 > 0))))


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------


def ray_cast(origin, heading, map_model, scan=ScanSpec()):
    """Range scan against all obstacle edges and the bounding walls.

    Fully vectorized over (beams x edges).  The origin must lie strictly
    outside every obstacle polygon.
    """
    origin = np.asarray(origin, dtype=np.float64)
    if map_model.contains_in_obstacle(origin):
        raise ValueError(f"ray cast origin {origin.tolist()} lies inside an obstacle")
    segs = map_model.all_segments()
    angles = scan.beam_angles(float(heading))
    dx, dy = np.cos(angles), np.sin(angles)  # (K,)
    a = segs[:, 0, :]  # (E, 2)
    r = segs[:, 1, :] - a  # edge vectors
    ao = a - origin
    # cross(d, r) per beam/edge; cross(ao, r) is beam-independent
    denom = dx[:, None] * r[None, :, 1] - dy[:, None] * r[None, :, 0]  # (K, E)
    num_t = ao[:, 0] * r[:, 1] - ao[:, 1] * r[:, 0]  # (E,) cross(ao, r)
    num_s = ao[None, :, 0] * dy[:, None] - ao[None, :, 1] * dx[:, None]  # cross(ao, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num_t[None, :] / denom
        s = num_s / denom
    valid = (denom != 0.0) & (t >= 0.0) & (s >= 0.0) & (s <= 1.0)
    t = np.where(valid, t, np.inf)
    ranges = np.minimum(t.min(axis=1), scan.max_range)
    return RayScan(scan.num_beams, scan.fov, scan.max_range, ranges)


def ray_cast_oracle(origin, heading, map_model, scan=ScanSpec()):
    """Reference implementation: plain per-beam, per-edge scalar loop."""
    ox, oy = float(origin[0]), float(origin[1])
    if map_model.contains_in_obstacle((ox, oy)):
        raise ValueError(f"ray cast origin ({ox}, {oy}) lies inside an obstacle")
    segs = map_model.all_segments()
    edges = [
        (float(s[0][0]), float(s[0][1]), float(s[1][0]), float(s[1][1])) for s in segs
    ]
    ranges = []
    for k in range(scan.num_beams):
        angle = heading - scan.fov / 2.0 + k * scan.fov / (scan.num_beams - 1)
        dx, dy = math.cos(angle), math.sin(angle)
        best = math.inf
        for ax, ay, bx, by in edges:
            rx, ry = bx - ax, by - ay
            denom = dx * ry - dy * rx
            if denom == 0.0:
                continue
            aox, aoy = ax - ox, ay - oy
            t = (aox * ry - aoy * rx) / denom
            s = (aox * dy - aoy * dx) / denom
            if t >= 0.0 and 0.0 <= s <= 1.0 and t < best:
                best = t
        ranges.append(min(best, scan.max_range))
    return RayScan(scan.num_beams, scan.fov, scan.max_range, np.array(ranges))


# ---------------------------------------------------------------------------
# occupancy-grid processing
# ---------------------------------------------------------------------------


def _trace_region_outline(mask):
    """Outer boundary of a 4-connected cell region as CCW corner coordinates.

    Crack-following walk along cell edges keeping the region on the left;
    corners are integer (col, row) lattice points.  mask is (H, W) bool.
    """
    rows, cols = np.nonzero(mask)
    start_row = rows.min()
    start_col = cols[rows == start_row].min()

    h, w = mask.shape

    def occupied(cx, cy):
        return 0 <= cx < w and 0 <= cy < h and mask[cy, cx]

    # directions: 0=E, 1=N, 2=W, 3=S as (dx, dy)
    step = {0: (1, 0), 1: (0, 1), 2: (-1, 0), 3: (0, -1)}
    # cells (front-left, front-right) relative to a corner per heading
    def front_cells(x, y, d):
        if d == 0:  # east: left = NE cell, right = SE cell
            return (x, y), (x, y - 1)
        if d == 1:  # north: left = NW, right = NE
            return (x - 1, y), (x, y)
        if d == 2:  # west: left = SW, right = NW
            return (x - 1, y - 1), (x - 1, y)
        return (x, y - 1), (x - 1, y - 1)  # south: left = SE, right = SW

    x, y = start_col, start_row
    direction = 0
    start_state = (x, y, direction)
    outline = [(x, y)]
    guard = 4 * mask.size + 8
    while True:
        dx, dy = step[direction]
        x, y = x + dx, y + dy
        (flx, fly), (frx, fry) = front_cells(x, y, direction)
        fl = occupied(flx, fly)
        fr = occupied(frx, fry)
        if fl and not fr:
            pass  # straight
        elif fl and fr:
            direction = (direction - 1) % 4  # right turn
        else:
            # both free, or checkerboard corner (fr only): 4-connected regions
            # keep left
            direction = (direction + 1) % 4
        if (x, y, direction) == start_state:
            break
        outline.append((x, y))
        guard -= 1
        if guard <= 0:
            raise RuntimeError("contour trace failed to close")
    return outline


def _split_pinched_ring(ring):
    """Split a closed ring at repeated corners into simple sub-rings."""
    rings = []
    stackless = list(ring)
    seen = {}
    i = 0
    current = []
    for corner in stackless:
        if corner in seen:
            j = seen[corner]
            loop = current[j:]
            for c in loop:
                seen.pop(c, None)
            current = current[:j]
            if len(loop) >= 3:
                rings.append(loop)
        seen[corner] = len(current)
        current.append(corner)
    if len(current) >= 3:
        rings.append(current)
    return rings


def _perpendicular_deviation(pts, a, b):
    ab = b - a
    norm = np.hypot(*ab)
    if norm == 0.0:
        return np.hypot(pts[:, 0] - a[0], pts[:, 1] - a[1])
    return np.abs(ab[0] * (pts[:, 1] - a[1]) - ab[1] * (pts[:, 0] - a[0])) / norm


def _simplify_open(points, tol):
    """Max-deviation recursive split on an open chain, endpoints kept."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) <= 2:
        return [tuple(p) for p in points]
    keep = np.zeros(len(points), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(points) - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        devs = _perpendicular_deviation(points[lo + 1 : hi], points[lo], points[hi])
        idx = int(np.argmax(devs))
        if devs[idx] > tol:
            mid = lo + 1 + idx
            keep[mid] = True
            stack.append((lo, mid))
            stack.append((mid, hi))
    return [tuple(p) for p in points[keep]]


def _simplify_ring(ring, tol):
    """Closed-ring simplification: anchor at the two mutually farthest-ish
    vertices, simplify both halves."""
    pts = np.asarray(ring, dtype=np.float64)
    if len(pts) <= 3 or tol <= 0:
        dedup = _simplify_open(np.vstack([pts, pts[:1]]), max(tol, 0.0))
        return dedup[:-1]
    d0 = np.hypot(pts[:, 0] - pts[0, 0], pts[:, 1] - pts[0, 1])
    far = int(np.argmax(d0))
    if far == 0:
        return [tuple(p) for p in pts[:3]]
    first = _simplify_open(pts[: far + 1], tol)
    second = _simplify_open(np.vstack([pts[far:], pts[:1]]), tol)
    return first[:-1] + second[:-1]


def _ring_area(ring):
    pts = np.asarray(ring, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def process_map(grid, params=MapProcessParams()):
    """Occupancy grid -> polygon obstacles.

    Thresholds the grid, closes small gaps (dilate then erode), labels
    4-connected components, traces each outer boundary along cell edges and
    simplifies it with a max-deviation split.  Returns (model, dropped)
    where dropped counts components that collapsed below 3 usable vertices.
    """
    occ = grid.as_matrix() >= params.occupied_threshold
    if occ.size == 0:
        raise ValueError("empty grid")
    radius = int(params.closing_radius_cells)
    if radius > 0 and occ.any():
        padded = np.pad(occ, radius, mode="constant", constant_values=False)
        structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
        closed = ndimage.binary_closing(padded, structure=structure)
        occ = closed[radius:-radius, radius:-radius]
    labels, n_components = ndimage.label(occ, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
    res = grid.resolution
    ox, oy = grid.origin
    tol = params.simplify_tolerance_cells  # in cell units; corners are lattice points
    rings = []
    for comp in range(1, n_components + 1):
        mask = labels == comp
        outline = _trace_region_outline(mask)
        for ring in _split_pinched_ring(outline):
            if _ring_area(ring) > 0:  # clockwise loops are enclosed free pockets
                rings.append(ring)
    # enclosed pockets are treated as solid: rings nested inside another ring
    # (components living in an unreachable hole) are removed outright
    seeds = [_ring_interior_seed(ring) for ring in rings]
    rings = [
        ring
        for i, ring in enumerate(rings)
        if not any(
            j != i and _point_in_ring(np.asarray(seeds[i], dtype=np.float64), np.asarray(other, dtype=np.float64))
            for j, other in enumerate(rings)
        )
    ]
    tols = [tol] * len(rings)
    polygons = [_ring_to_polygon(ring, t, res, ox, oy) for ring, t in zip(rings, tols)]
    dropped = sum(1 for p in polygons if p is None)
    # simplification can bulge a concave outline into a neighbor; shrink the
    # tolerance of offending pairs until interiors are disjoint (tol 0 ==
    # exact cell outline, which is disjoint by construction)
    for _ in range(8):
        clash = _first_overlapping_pair(polygons)
        if clash is None:
            break
        for idx in clash:
            tols[idx] = 0.0 if tols[idx] < 0.5 else tols[idx] / 2.0
            polygons[idx] = _ring_to_polygon(rings[idx], tols[idx], res, ox, oy)
    bounds = (ox, oy, ox + grid.width * res, oy + grid.height * res)
    model = MapModel(tuple(p for p in polygons if p is not None), bounds)
    return model, dropped


def _ring_interior_seed(ring):
    """A point strictly inside a CCW lattice ring: the center of the cell on
    the left of the ring's first edge (the trace keeps its region on the
    left)."""
    (x0, y0), (x1, y1) = ring[0], ring[1]
    dx, dy = x1 - x0, y1 - y0
    if (dx, dy) == (1, 0):  # east: left cell is (x0, y0)
        return (x0 + 0.5, y0 + 0.5)
    if (dx, dy) == (0, 1):  # north
        return (x0 - 0.5, y0 + 0.5)
    if (dx, dy) == (-1, 0):  # west
        return (x0 - 0.5, y0 - 0.5)
    return (x0 + 0.5, y0 - 0.5)  # south


def _first_overlapping_pair(polygons):
    live = [(i, p) for i, p in enumerate(polygons) if p is not None]
    for a in range(len(live)):
        for b in range(a + 1, len(live)):
            ia, pa = live[a]
            ib, pb = live[b]
            if _polygons_overlap(pa, pb):
                return ia, ib
    return None


def _polygons_overlap(pa, pb):
    for ea in pa.edges():
        for eb in pb.edges():
            if _segments_properly_intersect(ea[0], ea[1], eb[0], eb[1]):
                return True
    return signed_distance(pb.vertices[0], pa) < -1e-9 or signed_distance(
        pa.vertices[0], pb
    ) < -1e-9


def _ring_to_polygon(ring, tol, res, ox, oy):
    """Simplify one lattice ring and convert to a world-frame polygon.

    Falls back to smaller tolerances if simplification produced a
    self-intersecting ring (rare concave artifact)."""
    attempt_tol = tol
    for _ in range(6):
        simplified = _simplify_ring(ring, attempt_tol)
        if len(simplified) >= 3 and _ring_area(simplified) > 0:
            pts = np.asarray(simplified, dtype=np.float64)
            world = np.column_stack([ox + pts[:, 0] * res, oy + pts[:, 1] * res])
            if not _ring_self_intersects(world):
                return Polygon(world)
        if attempt_tol <= 0:
            break
        attempt_tol = 0.0 if attempt_tol < 0.5 else attempt_tol / 2.0
    return None


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def load_grid(path, resolution=0.05, origin=(0.0, 0.0)):
    """Read an occupancy grid file.

    Two formats are accepted:

    * native: one ASCII header line ``width height resolution origin_x
      origin_y`` followed by width*height raw cell bytes, row 0 first
      (row 0 = lowest y);
    * binary graymap (``P5``): pixel value v maps to cell 255 - v (dark
      pixels are obstacles) and rows are flipped so the image's bottom row
      is cell row 0.  Resolution/origin come from the keyword arguments.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob.startswith(b"P5"):
        return _parse_pgm(blob, resolution, origin)
    newline = blob.index(b"\n")
    fields = blob[:newline].split()
    if len(fields) != 5:
        raise ValueError(f"bad grid header: expected 5 fields, got {len(fields)}")
    width, height = int(fields[0]), int(fields[1])
    res = float(fields[2])
    org = (float(fields[3]), float(fields[4]))
    payload = blob[newline + 1 :]
    if len(payload) < width * height:
        raise ValueError(f"grid payload truncated: {len(payload)} < {width * height}")
    cells = np.frombuffer(payload[: width * height], dtype=np.uint8)
    return OccupancyGrid(width, height, res, org, cells)


def save_grid(path, grid):
    header = f"{grid.width} {grid.height} {grid.resolution!r} {grid.origin[0]!r} {grid.origin[1]!r}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(grid.cells.tobytes())


def _parse_pgm(blob, resolution, origin):
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(blob):
        if blob[i : i + 1] == b"#":  # comment to end of line
            i = blob.index(b"\n", i) + 1
            continue
        j = i
        while j < len(blob) and not blob[j : j + 1].isspace():
            j += 1
        if j > i:
            tokens.append(blob[i:j])
        i = j + 1
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise ValueError("not a valid binary graymap")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"graymap maxval must be 255, got {maxval}")
    pixels = np.frombuffer(blob[i : i + width * height], dtype=np.uint8)
    if pixels.size != width * height:
        raise ValueError("graymap payload truncated")
    img = pixels.reshape(height, width)[::-1]  # image top row = highest y
    cells = (255 - img).reshape(-1)
    return OccupancyGrid(width, height, resolution, origin, cells)


def save_map_model(path, model):
    """Structured-text map: bounds line, then one block per polygon."""
    lines = ["bounds " + " ".join(f"{v:.6f}" for v in model.bounds)]
    for poly in model.obstacles:
        lines.append(f"polygon {len(poly.vertices)}")
        for x, y in poly.vertices:
            lines.append(f"{x:.6f} {y:.6f}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_map_model(path):
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("bounds "):
        raise ValueError("map file must start with a bounds line")
    bounds = tuple(float(v) for v in lines[0].split()[1:])
    if len(bounds) != 4:
        raise ValueError("bounds line needs 4 values")
    polygons = []
    i = 1
    while i < len(lines):
        head = lines[i].split()
        if head[0] != "polygon" or len(head) != 2:
            raise ValueError(f"expected 'polygon <n>' at line {i + 1}")
        n = int(head[1])
        verts = [tuple(map(float, lines[i + 1 + j].split())) for j in range(n)]
        polygons.append(Polygon(np.asarray(verts)))
        i += 1 + n
    return MapModel(tuple(polygons), bounds)
