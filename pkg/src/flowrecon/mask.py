"""Domain masks: edge extraction, boundary chains, point sampling, warping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from flowrecon.grid import GridSpec, VectorField2, sample_raster

FOUR = ndimage.generate_binary_structure(2, 1)
EIGHT = ndimage.generate_binary_structure(2, 2)

# outward unit normal of each image side, in (x, y)
SIDE_NORMALS = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "bottom": (0.0, -1.0),
    "top": (0.0, 1.0),
}

ZERO_FLOW_TOL = 1e-9


class BoundaryClassificationError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DomainMask:
    spec: GridSpec
    inside: np.ndarray

    def __post_init__(self):
        arr = np.array(self.inside, dtype=bool)
        if arr.shape != self.spec.shape:
            raise ValueError(f"mask has shape {arr.shape}, expected {self.spec.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "inside", arr)

    @property
    def n_components(self) -> int:
        return int(ndimage.label(self.inside, structure=FOUR)[1])

    @property
    def count(self) -> int:
        return int(self.inside.sum())

    def as_float(self) -> np.ndarray:
        return self.inside.astype(np.float64)


@dataclass(frozen=True)
class Chain:
    """Ordered pixel chain; ``pixels`` holds ``(h, k)`` index pairs."""

    pixels: np.ndarray
    side: str | None = None  # image side for border-resident chains

    def points(self, spec: GridSpec) -> np.ndarray:
        return (self.pixels + 0.5) * spec.eps

    def __len__(self):
        return len(self.pixels)


@dataclass
class BoundarySegments:
    wall: list = field(default_factory=list)
    inlet: list = field(default_factory=list)
    outlet: list = field(default_factory=list)

    def pixel_mask(self, spec: GridSpec, kind: str) -> np.ndarray:
        out = np.zeros(spec.shape, dtype=bool)
        for ch in getattr(self, kind):
            out[ch.pixels[:, 1], ch.pixels[:, 0]] = True
        return out


def _border_ring(shape) -> np.ndarray:
    ring = np.zeros(shape, dtype=bool)
    ring[0, :] = ring[-1, :] = True
    ring[:, 0] = ring[:, -1] = True
    return ring


def detect_edges(mask: DomainMask) -> np.ndarray:
    """Boolean raster of edge pixels of ``mask``.

    A mask pixel is an edge when any of its eight neighbours is outside the
    mask or outside the image; the resulting boundary is 4-connected.
    """
    if not mask.inside.any():
        raise EmptyMaskError("mask has no inside pixels")
    padded = np.pad(mask.inside, 1, constant_values=False)
    eroded = ndimage.binary_erosion(padded, structure=EIGHT)[1:-1, 1:-1]
    return mask.inside & ~eroded


def interior(mask: DomainMask) -> np.ndarray:
    return mask.inside & ~detect_edges(mask)


def _side_of(h, k, spec):
    # corner pixels go to the vertical (left/right) side
    if h == 0:
        return "left"
    if h == spec.H - 1:
        return "right"
    if k == 0:
        return "bottom"
    return "top"


def _order_component(pix: set) -> list:
    """Walk a 4-connected pixel set into an ordered list."""
    def nbrs(p):
        h, k = p
        return [q for q in ((h + 1, k), (h - 1, k), (h, k + 1), (h, k - 1)) if q in pix]

    degree = {p: len(nbrs(p)) for p in pix}
    start = min(pix, key=lambda p: (degree[p], p[1], p[0]))
    order, seen, stack = [], set(), [start]
    while stack:
        p = stack.pop()
        if p in seen:
            continue
        seen.add(p)
        order.append(p)
        # fewest onward options first keeps simple runs contiguous
        cand = sorted((q for q in nbrs(p) if q not in seen),
                      key=lambda q: (-sum(r not in seen for r in nbrs(q)), q[1], q[0]))
        stack.extend(cand)
    return order


def partition_chains(edges: np.ndarray, spec: GridSpec) -> list[Chain]:
    """Split an edge raster into maximal 4-connected ordered chains.

    Border-resident pixels and non-border pixels never share a chain, and
    border pixels are further split by image side.
    """
    edges = np.asarray(edges, dtype=bool)
    ring = _border_ring(edges.shape)
    chains = []
    inner = edges & ~ring
    lab, n = ndimage.label(inner, structure=FOUR)
    for i in range(1, n + 1):
        ks, hs = np.nonzero(lab == i)
        order = _order_component(set(zip(hs.tolist(), ks.tolist())))
        chains.append(Chain(np.array(order, dtype=np.intp)))
    border = edges & ring
    side_lab = np.zeros(edges.shape, dtype=np.intp)
    names = list(SIDE_NORMALS)
    for k, h in zip(*np.nonzero(border)):
        side_lab[k, h] = names.index(_side_of(h, k, spec)) + 1
    for si, name in enumerate(names, start=1):
        lab, n = ndimage.label(side_lab == si, structure=FOUR)
        for i in range(1, n + 1):
            ks, hs = np.nonzero(lab == i)
            order = _order_component(set(zip(hs.tolist(), ks.tolist())))
            chains.append(Chain(np.array(order, dtype=np.intp), side=name))
    return chains


def classify_boundaries(chains, noisy: VectorField2) -> BoundarySegments:
    """Sort chains into walls, inlets and outlets.

    Border chains whose mean measured velocity points into the image are
    inlets, the remaining border chains outlets; other chains are walls.
    """
    seg = BoundarySegments()
    for ch in chains:
        if ch.side is None:
            seg.wall.append(ch)
            continue
        h, k = ch.pixels[:, 0], ch.pixels[:, 1]
        mean = np.array([noisy.u_x[k, h].mean(), noisy.u_y[k, h].mean()])
        if np.hypot(*mean) < ZERO_FLOW_TOL:
            raise BoundaryClassificationError(
                f"border chain on the {ch.side} side ({len(ch)} px) has zero mean velocity")
        if mean @ np.array(SIDE_NORMALS[ch.side]) < 0:
            seg.inlet.append(ch)
        else:
            seg.outlet.append(ch)
    return seg


def boundary_segments(mask: DomainMask, noisy: VectorField2) -> BoundarySegments:
    return classify_boundaries(partition_chains(detect_edges(mask), mask.spec), noisy)


def sample_interior(mask: DomainMask, count: int, rng, pixels=None) -> np.ndarray:
    """Uniform interior pixel plus a uniform jitter in ``(-eps, eps)^2``."""
    if count < 1:
        raise ValueError("count must be positive")
    if pixels is None:
        ks, hs = np.nonzero(interior(mask))
    else:
        ks, hs = pixels
    if len(ks) == 0:
        raise EmptyMaskError("mask has an empty interior")
    eps = mask.spec.eps
    pick = rng.integers(0, len(ks), size=count)
    centers = np.column_stack([hs[pick], ks[pick]]) * eps + eps / 2
    return centers + rng.uniform(-eps, eps, size=(count, 2))


def polyline_lengths(points: np.ndarray) -> np.ndarray:
    """Cumulative arclength at each vertex, starting at 0."""
    seg = np.hypot(*np.diff(points, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def point_at_length(points: np.ndarray, cum: np.ndarray, l) -> np.ndarray:
    """Points at arclength ``l`` along the polyline by linear interpolation."""
    l = np.atleast_1d(np.asarray(l, dtype=np.float64))
    j = np.searchsorted(cum, l, side="left")
    j = np.clip(j, 1, len(cum) - 1)
    lo, hi = cum[j - 1], cum[j]
    w = np.where(hi > lo, (l - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0)
    return (1 - w)[:, None] * points[j - 1] + w[:, None] * points[j]


def sample_segment(points, count: int, rng) -> np.ndarray:
    """Uniform-in-arclength samples on the polyline through ``points``."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise ValueError("a chain needs at least two points to sample")
    if count < 1:
        raise ValueError("count must be positive")
    cum = polyline_lengths(points)
    return point_at_length(points, cum, rng.uniform(0.0, cum[-1], size=count))


def keep_largest_components(inside: np.ndarray, n_keep: int) -> np.ndarray:
    lab, n = ndimage.label(inside, structure=FOUR)
    if n <= n_keep:
        return inside
    sizes = ndimage.sum_labels(np.ones_like(lab), lab, index=np.arange(1, n + 1))
    keep = np.argsort(-sizes, kind="stable")[:n_keep] + 1
    return np.isin(lab, keep)


def warp_mask(mask: DomainMask, c, n_components: int | None = None) -> DomainMask:
    """Pull the mask back through the mapping ``c``: new(x) = old(c(x)) >= 0.5.

    When ``n_components`` is given, only that many of the largest 4-connected
    components of the warped mask are kept.
    """
    if c.spec != mask.spec:
        raise ValueError("mapping and mask live on different grids")
    pts = np.column_stack([np.ravel(c.target_x), np.ravel(c.target_y)])
    if not np.all(np.isfinite(pts)):
        raise ValueError("mapping has non-finite target coordinates")
    vals = sample_raster(mask.spec, mask.as_float(), pts).reshape(mask.spec.shape)
    inside = vals >= 0.5
    if n_components is not None and inside.any():
        inside = keep_largest_components(inside, n_components)
    return DomainMask(mask.spec, inside)
