"""
Anomaly Mask Generation

Builds the random irregular anomaly mask in four steps:
  1. Sample ten points with density given by a Perlin noise field
  2. Take their convex hull
  3. Randomly bend hull edges into quadratic Bezier curves
  4. Fill the closed curve (even-odd scanline rule)

A mask is retried with a fresh derived seed until its area, relative to the
placement region, falls inside the requested bounds.

Coordinates are continuous (x = column, y = row); pixel (c, r) has its
center at (c + 0.5, r + 0.5).
"""

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config import derive_seed
from errors import (
    DegenerateFieldError,
    DegenerateInputError,
    EmptyInteriorError,
    GenerationFailedError,
    RegionTooSmallError,
    ZeroDimensionError,
)
from imaging import BinaryMask, GrayImage, check_same_shape

MAX_ATTEMPTS = 20
MASK_SHAPES = ("irregular", "rectangle")

# placement window area, as a fraction of the region area
WINDOW_FRACTION = (0.1, 0.45)

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass(frozen=True)
class Point2D:
    """A point in continuous pixel coordinates."""
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"Point2D coordinates must be finite: ({self.x}, {self.y})")


@dataclass(frozen=True)
class MaskSpec:
    """
    Parameters of one mask draw.

    Attributes:
        region: Placement constraint; the mask never leaves it
        num_points: Points sampled for the hull (>= 3)
        bezier_probability: Per-edge probability of a Bezier replacement
        control_offset_fraction: Max control-point displacement / edge length
        area_bounds: (min, max) mask area as a fraction of the region area
        seed: Root seed; the mask is a pure function of the spec
        grid_cells: Perlin lattice cells per image side
        shape: "irregular" (four-step procedure) or "rectangle"
    """
    region: BinaryMask
    num_points: int = 10
    bezier_probability: float = 0.5
    control_offset_fraction: float = 0.5
    area_bounds: Tuple[float, float] = (0.02, 0.25)
    seed: int = 0
    grid_cells: int = 4
    shape: str = "irregular"

    def __post_init__(self):
        if self.num_points < 3:
            raise ValueError(f"num_points must be >= 3, got {self.num_points}")
        lo, hi = self.area_bounds
        if not 0.0 < lo < hi <= 1.0:
            raise ValueError(f"area_bounds must satisfy 0 < min < max <= 1, got {self.area_bounds}")
        if not 0.0 <= self.bezier_probability <= 1.0:
            raise ValueError("bezier_probability must lie in [0, 1]")
        if self.control_offset_fraction < 0:
            raise ValueError("control_offset_fraction must be non-negative")
        if self.grid_cells < 1:
            raise ValueError("grid_cells must be >= 1")
        if self.shape not in MASK_SHAPES:
            raise ValueError(f"shape must be one of {MASK_SHAPES}, got '{self.shape}'")


@dataclass(frozen=True)
class MaskTrace:
    """A generated mask together with the intermediates of the accepted attempt."""
    mask: BinaryMask
    points: List[Point2D] = field(default_factory=list)
    hull: List[Point2D] = field(default_factory=list)
    curve: List[Point2D] = field(default_factory=list)
    attempts: int = 1


# ============================================================================
# STEP 1 - PERLIN FIELD AND POINT SAMPLING
# ============================================================================

def fade(t: np.ndarray) -> np.ndarray:
    """Quintic smoothstep 6t^5 - 15t^4 + 10t^3."""
    return t * t * t * (t * (t * 6 - 15) + 10)


def lattice_gradients(grid_cells: int, rng: np.random.Generator) -> np.ndarray:
    """Random unit gradients on a (grid_cells + 1)^2 lattice, indexed [iy, ix]."""
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(grid_cells + 1, grid_cells + 1))
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def perlin_noise(xs: np.ndarray, ys: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """
    Raw 2-D gradient noise at lattice coordinates (0 <= x, y <= cells).

    Vanishes at every integer lattice point.
    """
    cells_y, cells_x = gradients.shape[0] - 1, gradients.shape[1] - 1
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    x0 = np.clip(np.floor(xs).astype(int), 0, cells_x - 1)
    y0 = np.clip(np.floor(ys).astype(int), 0, cells_y - 1)
    fx = xs - x0
    fy = ys - y0

    def corner(dx: int, dy: int) -> np.ndarray:
        g = gradients[y0 + dy, x0 + dx]
        return g[..., 0] * (fx - dx) + g[..., 1] * (fy - dy)

    u, v = fade(fx), fade(fy)
    top = corner(0, 0) + u * (corner(1, 0) - corner(0, 0))
    bottom = corner(0, 1) + u * (corner(1, 1) - corner(0, 1))
    return top + v * (bottom - top)


def perlin_field(width: int, height: int, seed: int, grid_cells: int = 4) -> GrayImage:
    """
    Classic Perlin noise sampled at pixel centers, rescaled to [0, 1].

    Raises:
        ZeroDimensionError: width or height < 1
        ValueError: grid_cells < 1
    """
    if width < 1 or height < 1:
        raise ZeroDimensionError(f"Perlin field needs positive size, got {width}x{height}")
    if grid_cells < 1:
        raise ValueError(f"grid_cells must be >= 1, got {grid_cells}")

    gradients = lattice_gradients(grid_cells, np.random.default_rng(seed))
    xs = (np.arange(width) + 0.5) * grid_cells / width
    ys = (np.arange(height) + 0.5) * grid_cells / height
    gx, gy = np.meshgrid(xs, ys)
    raw = perlin_noise(gx, gy, gradients)

    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return GrayImage(np.full((height, width), 0.5))
    return GrayImage(np.clip((raw - lo) / (hi - lo), 0.0, 1.0))


def sample_points(field: GrayImage, region: BinaryMask, n: int, seed: int) -> List[Point2D]:
    """
    Draw n distinct pixel centers inside region by rejection sampling.

    A uniformly drawn region pixel is accepted with probability equal to its
    field value divided by the field maximum over the region.

    Raises:
        RegionTooSmallError: region has fewer than n pixels
        DegenerateFieldError: fewer than n region pixels have positive density
    """
    check_same_shape(field, region, "field and region")
    rows, cols = np.nonzero(region.data)
    if len(rows) < n:
        raise RegionTooSmallError(f"Region has {len(rows)} pixels, need {n}")

    density = field.data[rows, cols]
    peak = density.max()
    if peak <= 0:
        raise DegenerateFieldError("Sampling field is zero everywhere inside the region")
    if np.count_nonzero(density) < n:
        raise DegenerateFieldError(f"Only {np.count_nonzero(density)} region pixels have positive density, need {n}")
    accept = density / peak

    rng = np.random.default_rng(seed)
    chosen: List[int] = []
    seen = set()
    while len(chosen) < n:
        candidates = rng.integers(0, len(rows), size=256)
        draws = rng.random(256)
        for idx, u in zip(candidates, draws):
            idx = int(idx)
            if u < accept[idx] and idx not in seen:
                seen.add(idx)
                chosen.append(idx)
                if len(chosen) == n:
                    break
    return [Point2D(cols[i] + 0.5, rows[i] + 0.5) for i in chosen]


# ============================================================================
# STEP 2 - CONVEX HULL
# ============================================================================

def cross(o: Tuple[float, float], a: Tuple[float, float], b: Tuple[float, float]) -> float:
    """z-component of (a - o) x (b - o); positive for a left turn."""
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: Sequence[Point2D]) -> List[Point2D]:
    """
    Monotone-chain convex hull.

    Returns:
        Counter-clockwise hull vertices (positive signed area), without
        collinear vertices

    Raises:
        DegenerateInputError: fewer than 3 distinct points, or all collinear
    """
    pts = sorted(set((p.x, p.y) for p in points))
    if len(pts) < 3:
        raise DegenerateInputError(f"Convex hull needs 3 distinct points, got {len(pts)}")

    lower: List[Tuple[float, float]] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)

    upper: List[Tuple[float, float]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)

    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateInputError("All points are collinear")
    return [Point2D(x, y) for x, y in hull]


def signed_area(polygon: Sequence[Point2D]) -> float:
    """Shoelace area; positive for counter-clockwise vertex order."""
    total = 0.0
    n = len(polygon)
    for i in range(n):
        a, b = polygon[i], polygon[(i + 1) % n]
        total += a.x * b.y - b.x * a.y
    return 0.5 * total


# ============================================================================
# STEP 3 - BEZIER EDGES
# ============================================================================

def quadratic_bezier(p0: Point2D, control: Point2D, p2: Point2D, n: int) -> List[Point2D]:
    """Sample B(t) = (1-t)^2 P0 + 2t(1-t) C + t^2 P2 at n evenly spaced t in [0, 1]."""
    t = np.linspace(0.0, 1.0, max(n, 2))
    a = (1 - t) ** 2
    b = 2 * t * (1 - t)
    c = t ** 2
    xs = a * p0.x + b * control.x + c * p2.x
    ys = a * p0.y + b * control.y + c * p2.y
    return [Point2D(float(x), float(y)) for x, y in zip(xs, ys)]


def bezier_edges(hull: Sequence[Point2D], spec: MaskSpec, seed: int) -> List[Point2D]:
    """
    Replace hull edges by quadratic Bezier curves, each with probability
    spec.bezier_probability.

    The control point is the edge midpoint moved along the outward normal by
    u * control_offset_fraction * edge_length, u ~ U[-1, 1]. A bent edge is
    sampled at ceil(edge_length) + 1 points.

    Returns:
        Closed polyline (last point connects back to the first); with
        probability 0 it is exactly the hull
    """
    rng = np.random.default_rng(seed)
    curve: List[Point2D] = []
    n = len(hull)
    for i in range(n):
        p0, p2 = hull[i], hull[(i + 1) % n]
        bend = rng.random() < spec.bezier_probability
        u = rng.uniform(-1.0, 1.0)

        dx, dy = p2.x - p0.x, p2.y - p0.y
        length = math.hypot(dx, dy)
        if length == 0:
            continue
        if not bend:
            curve.append(p0)
            continue

        # outward normal of a counter-clockwise polygon
        nx, ny = dy / length, -dx / length
        offset = u * spec.control_offset_fraction * length
        control = Point2D((p0.x + p2.x) / 2 + nx * offset, (p0.y + p2.y) / 2 + ny * offset)
        samples = quadratic_bezier(p0, control, p2, math.ceil(length) + 1)
        curve.extend(samples[:-1])
    return curve


# ============================================================================
# STEP 4 - FILL
# ============================================================================

def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected component (lowest label on ties)."""
    labels, count = ndimage.label(mask, structure=FOUR_CONNECTED)
    if count <= 1:
        return labels > 0
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def even_odd_fill(curve: Sequence[Point2D], width: int, height: int) -> np.ndarray:
    """
    Pixel-center even-odd fill without component filtering.

    Pixel (c, r) is set when the ray from (c + 0.5, r + 0.5) towards +x
    crosses the closed curve an odd number of times.
    """
    xi = np.clip(np.array([p.x for p in curve], dtype=np.float64), 0.0, float(width))
    yi = np.clip(np.array([p.y for p in curve], dtype=np.float64), 0.0, float(height))
    xj = np.roll(xi, -1)
    yj = np.roll(yi, -1)

    py = (np.arange(height) + 0.5)[:, None]
    crossing = (yi[None, :] > py) != (yj[None, :] > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_at = (xj - xi) * (py - yi) / (yj - yi) + xi

    centers = np.arange(width) + 0.5
    filled = np.zeros((height, width), dtype=bool)
    for r in np.nonzero(crossing.any(axis=1))[0]:
        xs = np.sort(x_at[r, crossing[r]])
        right = len(xs) - np.searchsorted(xs, centers, side="right")
        filled[r] = (right % 2) == 1
    return filled


def rasterize_fill(curve: Sequence[Point2D], width: int, height: int) -> BinaryMask:
    """
    Fill a closed curve and keep its largest 4-connected component.

    Raises:
        EmptyInteriorError: the curve encloses no pixel center
    """
    if width < 1 or height < 1:
        raise ZeroDimensionError(f"Raster needs positive size, got {width}x{height}")
    if len(curve) < 3:
        raise EmptyInteriorError("A closed curve needs at least 3 vertices")
    filled = even_odd_fill(curve, width, height)
    if not filled.any():
        raise EmptyInteriorError("Curve encloses no pixel center")
    return BinaryMask(largest_component(filled))


# ============================================================================
# FULL PROCEDURE
# ============================================================================

def _bounding_box(region: np.ndarray) -> Tuple[int, int, int, int]:
    rows = np.nonzero(region.any(axis=1))[0]
    cols = np.nonzero(region.any(axis=0))[0]
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def _random_box(region: np.ndarray, area: float, rng: np.random.Generator) -> np.ndarray:
    """Axis-aligned box of roughly the given area and aspect in [1/2, 2], inside the region's bounding box."""
    r0, r1, c0, c1 = _bounding_box(region)
    aspect = rng.uniform(0.5, 2.0)
    box_w = int(np.clip(round(math.sqrt(area * aspect)), 1, c1 - c0))
    box_h = int(np.clip(round(area / box_w), 1, r1 - r0))
    top = r0 + int(rng.integers(0, r1 - r0 - box_h + 1))
    left = c0 + int(rng.integers(0, c1 - c0 - box_w + 1))
    box = np.zeros_like(region)
    box[top:top + box_h, left:left + box_w] = True
    return box & region


def _irregular_attempt(spec: MaskSpec, attempt_seed: int) -> MaskTrace:
    region = spec.region.data
    height, width = region.shape
    rng = np.random.default_rng(derive_seed(attempt_seed, "window"))

    window = _random_box(region, rng.uniform(*WINDOW_FRACTION) * region.sum(), rng)
    field = perlin_field(width, height, derive_seed(attempt_seed, "perlin"), spec.grid_cells)
    # the rescaled field is 0 at its minimum pixel
    if np.count_nonzero(field.data[window]) < spec.num_points:
        window = region
    points = sample_points(field, BinaryMask(window), spec.num_points, derive_seed(attempt_seed, "points"))
    hull = convex_hull(points)
    curve = bezier_edges(hull, spec, derive_seed(attempt_seed, "bezier"))
    filled = rasterize_fill(curve, width, height)
    mask = largest_component(filled.data & region)
    return MaskTrace(mask=BinaryMask(mask), points=points, hull=hull, curve=curve)


def _rectangle_attempt(spec: MaskSpec, attempt_seed: int) -> MaskTrace:
    region = spec.region.data
    rng = np.random.default_rng(derive_seed(attempt_seed, "rectangle"))
    area = rng.uniform(*spec.area_bounds) * region.sum()
    return MaskTrace(mask=BinaryMask(_random_box(region, area, rng)))


def generate_mask_trace(spec: MaskSpec) -> MaskTrace:
    """
    Run the full mask procedure and keep the accepted attempt's intermediates.

    Attempt k uses derive_seed(spec.seed, "attempt", k). An attempt is
    accepted when mask area / region area lies inside spec.area_bounds.

    Raises:
        RegionTooSmallError: region has fewer pixels than spec.num_points
        GenerationFailedError: no acceptable mask in MAX_ATTEMPTS attempts
    """
    region_area = spec.region.area
    if region_area < spec.num_points:
        raise RegionTooSmallError(f"Region has {region_area} pixels, need {spec.num_points}")

    lo, hi = spec.area_bounds
    attempt_fn = _rectangle_attempt if spec.shape == "rectangle" else _irregular_attempt
    for attempt in range(MAX_ATTEMPTS):
        try:
            trace = attempt_fn(spec, derive_seed(spec.seed, "attempt", attempt))
        except (DegenerateFieldError, DegenerateInputError, EmptyInteriorError):
            continue
        fraction = trace.mask.area / region_area
        if lo <= fraction <= hi:
            return MaskTrace(mask=trace.mask, points=trace.points, hull=trace.hull,
                             curve=trace.curve, attempts=attempt + 1)

    raise GenerationFailedError(
        f"No mask with area fraction in [{lo}, {hi}] after {MAX_ATTEMPTS} attempts (seed {spec.seed})"
    )


def generate_mask(spec: MaskSpec) -> BinaryMask:
    """Random irregular (or rectangular) anomaly mask inside spec.region."""
    return generate_mask_trace(spec).mask
