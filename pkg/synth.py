"""
Structure-Preserving Anomaly Synthesis (SAS)

Turns a normal image into a synthetic anomaly by gamma correction inside a
random irregular mask. The exponent tapers with the distance to the mask
boundary:

    gamma(x) = 1 + D(x) / max D * w      inside the mask
    gamma(x) = 1                         outside

so the lesion blends in seamlessly and the intensity remap at every pixel
stays monotone (anatomy is darkened or brightened, never rearranged).
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import derive_seed
from errors import EmptyMaskError, InvalidWeightError
from imaging import BinaryMask, GrayImage, check_same_shape
from maskgen import MaskSpec, MaskTrace, generate_mask_trace

NORMAL, ABNORMAL = "normal", "abnormal"


# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass(frozen=True)
class GammaField:
    """
    Per-pixel gamma exponents.

    Attributes:
        gamma: (height, width) float64, strictly positive, read-only
    """
    gamma: np.ndarray

    def __post_init__(self):
        arr = np.array(self.gamma, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError("GammaField needs a 2-D array")
        if not np.all(arr > 0):
            raise ValueError("gamma must be strictly positive")
        arr.setflags(write=False)
        object.__setattr__(self, "gamma", arr)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.gamma.shape

    @property
    def width(self) -> int:
        return self.gamma.shape[1]

    @property
    def height(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class SynthConfig:
    """
    Synthesis settings.

    Attributes:
        weight_choices: Candidate weights w, each > -1, drawn uniformly
        apply_probability: Chance that an anomaly is synthesized at all
        seed: Root seed; synthesize() is a pure function of it
        mask_shape, num_points, bezier_probability, control_offset_fraction,
        area_bounds, grid_cells: forwarded to the mask generator
    """
    weight_choices: Tuple[float, ...] = (-0.999, -0.99, 2.0, 3.0)
    apply_probability: float = 0.5
    seed: int = 0
    mask_shape: str = "irregular"
    num_points: int = 10
    bezier_probability: float = 0.5
    control_offset_fraction: float = 0.5
    area_bounds: Tuple[float, float] = (0.02, 0.25)
    grid_cells: int = 4

    def __post_init__(self):
        if len(self.weight_choices) == 0:
            raise InvalidWeightError("weight_choices is empty")
        for w in self.weight_choices:
            if not w > -1.0:
                raise InvalidWeightError(f"weight {w} violates w > -1")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must lie in [0, 1]")

    def mask_spec(self, region: BinaryMask, seed: int) -> MaskSpec:
        return MaskSpec(
            region=region,
            num_points=self.num_points,
            bezier_probability=self.bezier_probability,
            control_offset_fraction=self.control_offset_fraction,
            area_bounds=tuple(self.area_bounds),
            seed=seed,
            grid_cells=self.grid_cells,
            shape=self.mask_shape,
        )


@dataclass(frozen=True)
class SynthResult:
    """Output of one synthesize() call."""
    image: GrayImage
    mask: BinaryMask
    label: str
    weight: Optional[float] = None
    trace: Optional[MaskTrace] = field(default=None, repr=False)

    @property
    def is_abnormal(self) -> bool:
        return self.label == ABNORMAL


# ============================================================================
# DISTANCE TRANSFORM
# ============================================================================

def _lower_envelope(f: List[float]) -> List[float]:
    """
    1-D squared Euclidean distance transform: d(q) = min_p (q - p)^2 + f(p).

    Lower envelope of parabolas rooted at each sample.
    """
    n = len(f)
    d = [0.0] * n
    v = [0] * n
    z = [0.0] * (n + 1)
    k = 0
    z[0], z[1] = -np.inf, np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def column_distances(mask: np.ndarray) -> np.ndarray:
    """
    Distance along each column to the nearest out-of-mask pixel.

    Every column must contain an out-of-mask pixel (true after padding).
    """
    height = mask.shape[0]
    g = np.where(mask, float(height), 0.0)
    for r in range(1, height):
        g[r] = np.where(mask[r], np.minimum(g[r], g[r - 1] + 1), 0.0)
    for r in range(height - 2, -1, -1):
        g[r] = np.minimum(g[r], g[r + 1] + 1)
    return g


def squared_distance_transform(mask: np.ndarray) -> np.ndarray:
    """
    Exact squared Euclidean distance from every pixel to the nearest
    out-of-mask pixel, for a mask padded with one ring of out-of-mask pixels.

    Separable: exact 1-D column distances, then the lower envelope of
    parabolas along each row.
    """
    f = column_distances(mask) ** 2
    for r in range(f.shape[0]):
        f[r, :] = _lower_envelope(f[r, :].tolist())
    return f


def distance_transform(mask: BinaryMask) -> np.ndarray:
    """
    Euclidean distance D(x) from each in-mask pixel to the nearest
    out-of-mask pixel; 0 outside the mask.

    Pixels beyond the image border count as out-of-mask, so a mask pixel on
    the border gets D = 1. Only the mask's bounding box (plus a one-pixel
    ring) is processed; the nearest out-of-mask pixel always lies inside it.

    Raises:
        EmptyMaskError: mask has no pixel set
    """
    data = mask.data
    if not data.any():
        raise EmptyMaskError("Distance transform of an empty mask")

    rows = np.nonzero(data.any(axis=1))[0]
    cols = np.nonzero(data.any(axis=0))[0]
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    crop = np.pad(data[r0:r1, c0:c1], 1, constant_values=False)

    dist = np.sqrt(squared_distance_transform(crop))[1:-1, 1:-1]
    out = np.zeros(data.shape, dtype=np.float64)
    out[r0:r1, c0:c1] = np.where(data[r0:r1, c0:c1], dist, 0.0)
    return out


# ============================================================================
# GAMMA CORRECTION
# ============================================================================

def gamma_field(mask: BinaryMask, w: float) -> GammaField:
    """
    Distance-weighted gamma exponents: 1 + D(x) / max D * w inside the mask,
    exactly 1 outside.

    Raises:
        EmptyMaskError: mask has no pixel set
        InvalidWeightError: w <= -1 (gamma would not stay positive)
    """
    if not w > -1.0:
        raise InvalidWeightError(f"weight {w} violates w > -1")
    dist = distance_transform(mask)
    peak = dist.max()
    gamma = np.ones(mask.shape, dtype=np.float64)
    inside = mask.data
    gamma[inside] = 1.0 + dist[inside] / peak * w
    return GammaField(gamma)


def apply_gamma(img: GrayImage, field: GammaField) -> GrayImage:
    """
    Per-pixel power law out(x) = img(x) ** gamma(x), with 0 ** gamma = 0.

    Pixels where gamma is exactly 1 are copied bit for bit.
    """
    check_same_shape(img, field, "image and gamma field")
    data = img.data
    gamma = field.gamma
    changed = gamma != 1.0
    out = np.array(data)
    out[changed] = np.where(data[changed] > 0, data[changed] ** gamma[changed], 0.0)
    return GrayImage(out)


def intensity_remap(levels: Sequence[float], gamma: float) -> np.ndarray:
    """The map a -> a ** gamma applied to a list of intensities (0 -> 0)."""
    levels = np.asarray(levels, dtype=np.float64)
    return np.where(levels > 0, np.abs(levels) ** gamma, 0.0)


# ============================================================================
# SYNTHESIS
# ============================================================================

def draw_synthesis(config: SynthConfig) -> Optional[float]:
    """
    Decide whether to synthesize and with which weight.

    Returns:
        The drawn weight w, or None when no anomaly is applied
    """
    rng = np.random.default_rng(derive_seed(config.seed, "synthesis"))
    apply = rng.random() < config.apply_probability
    index = int(rng.integers(0, len(config.weight_choices)))
    return float(config.weight_choices[index]) if apply else None


def synthesize(img: GrayImage, region: BinaryMask, config: SynthConfig) -> SynthResult:
    """
    With probability config.apply_probability, insert a synthetic anomaly
    inside region; otherwise return the image untouched with label normal.

    Returns:
        SynthResult(image, mask, label, weight, trace); the mask is empty
        for normal results

    Raises:
        EmptyMaskError: region is empty
        GenerationFailedError: propagated from the mask generator
    """
    check_same_shape(img, region, "image and region")
    if region.is_empty():
        raise EmptyMaskError("Synthesis region is empty")

    weight = draw_synthesis(config)
    if weight is None:
        return SynthResult(image=img, mask=BinaryMask.empty(*img.shape), label=NORMAL)

    trace = generate_mask_trace(config.mask_spec(region, derive_seed(config.seed, "mask")))
    out = apply_gamma(img, gamma_field(trace.mask, weight))
    return SynthResult(image=out, mask=trace.mask, label=ABNORMAL, weight=weight, trace=trace)
