"""Floor slabs from height-histogram peaks; rooms from a BEV histogram and watershed."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.measure import approximate_polygon, find_contours
from skimage.morphology import h_maxima, local_maxima
from skimage.segmentation import watershed

from .errors import EmptyScene, NoFreeSpace
from .ingest import PointCloud

log = logging.getLogger(__name__)


@dataclass
class FloorSlab:
    index: int
    z_min: float
    z_max: float
    cloud: PointCloud
    level: float = 0.0  # refined height of the histogram peak (floor surface)

    def contains_z(self, z) -> np.ndarray:
        z = np.asarray(z)
        return (z >= self.z_min) & (z < self.z_max)


@dataclass
class Grid2D:
    cell_size: float
    origin: np.ndarray  # (x, y) of the grid's min corner
    values: np.ndarray  # (nx, ny), values[ix, iy]
    footprint: np.ndarray | None = None  # cells holding any floor point

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.origin = np.asarray(self.origin, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def cell_of(self, xy: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(xy)[:, :2] - self.origin) / self.cell_size).astype(np.int64)


@dataclass
class RoomRegion:
    index: int
    floor_index: int
    mask: np.ndarray  # free-space cells of this room on the floor grid
    polygon: list[np.ndarray]  # rings in meters; even-odd semantics
    cloud: PointCloud = field(default_factory=PointCloud.empty)
    extent: np.ndarray | None = None  # mask plus absorbed wall cells
    grid_origin: np.ndarray | None = None
    cell_size: float = 0.0

    def area(self) -> float:
        return float(abs(sum(polygon_signed_area(r) for r in self.polygon)))

    def centroid_xy(self) -> np.ndarray:
        ix, iy = np.nonzero(self.mask)
        return self.grid_origin + (np.array([ix.mean(), iy.mean()]) + 0.5) * self.cell_size


# ---------------------------------------------------------------- floors


def _histogram(z: np.ndarray, bin: float) -> tuple[np.ndarray, np.ndarray]:
    start = np.floor(z.min() / bin) * bin
    nbins = int(np.floor((z.max() - start) / bin)) + 1
    idx = np.clip(np.floor((z - start) / bin).astype(np.int64), 0, nbins - 1)
    return np.bincount(idx, minlength=nbins), idx


def detect_floors(
    cloud: PointCloud,
    bin: float = 0.10,
    peak_frac: float = 0.3,
    min_floor_height: float = 2.0,
) -> list[FloorSlab]:
    if len(cloud) == 0:
        raise EmptyScene("cannot detect floors in an empty cloud")
    z = cloud.points[:, 2]
    hist, idx = _histogram(z, bin)
    padded = np.r_[0, hist, 0]
    # left end of a plateau counts as the maximum
    is_peak = (padded[1:-1] > padded[:-2]) & (padded[1:-1] >= padded[2:])
    candidates = np.flatnonzero(is_peak & (hist >= peak_frac * hist.max()))
    levels = {int(b): float(z[idx == b].mean()) for b in candidates}

    kept: list[int] = []
    for b in sorted(candidates, key=lambda b: (-hist[b], b)):
        if all(abs(levels[b] - levels[k]) >= min_floor_height for k in kept):
            kept.append(int(b))
    peaks = sorted(levels[b] for b in kept)

    bounds = [min(float(z.min()), peaks[0] - bin)]
    bounds += [p - bin for p in peaks[1:]]
    bounds.append(float(np.nextafter(z.max(), np.inf)))
    slabs = []
    for i, level in enumerate(peaks):
        lo, hi = bounds[i], bounds[i + 1]
        sel = (z >= lo) & (z < hi)
        slabs.append(FloorSlab(i, lo, hi, cloud.select(sel), level))
    return slabs


# ---------------------------------------------------------------- rooms


def bev_histogram(
    floor: FloorSlab,
    cell: float = 0.05,
    z_band: tuple[float, float] | None = None,
) -> Grid2D:
    """Bird's-eye occupancy counts of the floor's points.

    With ``z_band`` only points whose height above ``floor.level`` lies in
    ``[lo, hi)`` are counted; the footprint always uses every point.
    """
    pts = floor.cloud.points
    if len(pts) == 0:
        raise EmptyScene(f"floor {floor.index} has no points")
    origin = np.floor(pts[:, :2].min(axis=0) / cell) * cell  # lattice-aligned
    cells = np.floor((pts[:, :2] - origin) / cell).astype(np.int64)
    shape = tuple(cells.max(axis=0) + 1)
    footprint = np.zeros(shape, dtype=bool)
    footprint[cells[:, 0], cells[:, 1]] = True
    if z_band is not None:
        h = pts[:, 2] - floor.level
        cells = cells[(h >= z_band[0]) & (h < z_band[1])]
    values = np.zeros(shape, dtype=np.int64)
    np.add.at(values, (cells[:, 0], cells[:, 1]), 1)
    return Grid2D(cell, origin, values, footprint)


def _hull(grid: Grid2D, radius: int = 1) -> np.ndarray:
    """Footprint closed with a (2r+1)^2 square and hole-filled: the floor's outline."""
    support = grid.footprint if grid.footprint is not None else grid.values > 0
    pad = radius + 1
    closed = ndimage.binary_closing(np.pad(support, pad), structure=np.ones((2 * radius + 1,) * 2, bool))
    return ndimage.binary_fill_holes(closed)[pad:-pad, pad:-pad]


# gaps in the observed floor narrower than ~2x this (m) are sampling holes, not pockets
SEEN_CLOSING = 0.15


def free_space(grid: Grid2D, wall_frac: float) -> np.ndarray:
    hull = _hull(grid)
    if grid.footprint is not None:
        # pockets never seen (behind furniture) are not free; walls absorb them later
        r = max(1, int(round(SEEN_CLOSING / grid.cell_size)))
        seen = ndimage.binary_closing(np.pad(grid.footprint, r + 1), structure=np.ones((2 * r + 1,) * 2, bool))
        hull &= seen[r + 1 : -r - 1, r + 1 : -r - 1]
    occupied = grid.values > 0
    if occupied.any():
        threshold = wall_frac * np.percentile(grid.values[occupied], 95)
        return hull & (grid.values < threshold)
    return hull


def _ordered_markers(smooth: np.ndarray, free: np.ndarray, prominence: float) -> np.ndarray:
    img = np.where(free, smooth, -1.0)
    if prominence > 0:
        peaks = h_maxima(img, prominence).astype(bool)
    else:
        peaks = local_maxima(img, connectivity=2, allow_borders=True)
    peaks &= free
    comp, n = ndimage.label(peaks, structure=np.ones((3, 3), bool))
    info = []
    for lab in range(1, n + 1):
        flat = np.flatnonzero(comp.ravel() == lab)
        info.append((-float(smooth.ravel()[flat].max()), int(flat[0]), lab))
    markers = np.zeros(smooth.shape, dtype=np.int64)
    for rank, (_, _, lab) in enumerate(sorted(info), start=1):
        markers[comp == lab] = rank
    return markers


def _shared_boundaries(labels: np.ndarray) -> dict[tuple[int, int], int]:
    out: dict[tuple[int, int], int] = {}
    for a, b in ((labels[:-1, :], labels[1:, :]), (labels[:, :-1], labels[:, 1:])):
        sel = (a > 0) & (b > 0) & (a != b)
        pairs = np.stack([np.minimum(a[sel], b[sel]), np.maximum(a[sel], b[sel])], axis=1)
        if len(pairs):
            uniq, counts = np.unique(pairs, axis=0, return_counts=True)
            for (p, q), c in zip(uniq, counts):
                out[(int(p), int(q))] = out.get((int(p), int(q)), 0) + int(c)
    return out


def _nearest_label(labels: np.ndarray, region: int) -> int:
    others = (labels > 0) & (labels != region)
    _, (ix, iy) = ndimage.distance_transform_edt(~others, return_indices=True)
    cells = np.nonzero(labels == region)
    dist = np.hypot(ix[cells] - cells[0], iy[cells] - cells[1])
    cand = labels[ix[cells], iy[cells]]
    best = dist.min()
    return int(cand[dist == best].min())


def merge_small_regions(labels: np.ndarray, min_cells: float) -> np.ndarray:
    """Fold regions below ``min_cells`` into the neighbour with the longest shared boundary."""
    labels = labels.copy()
    while True:
        ids, counts = np.unique(labels[labels > 0], return_counts=True)
        if len(ids) <= 1:
            return labels
        small = [(c, i) for i, c in zip(ids, counts) if c < min_cells]
        if not small:
            return labels
        _, region = min(small)
        borders = _shared_boundaries(labels)
        touching = [(n, (p if q == region else q)) for (p, q), n in borders.items() if region in (p, q)]
        if touching:
            target = min(touching, key=lambda t: (-t[0], t[1]))[1]
        else:
            target = _nearest_label(labels, region)
        labels[labels == region] = target


def _fill_unmarked(labels: np.ndarray, free: np.ndarray) -> np.ndarray:
    """Free cells in components without a marker take the nearest label."""
    orphan = free & (labels == 0)
    if not orphan.any() or not (labels > 0).any():
        return labels
    _, (ix, iy) = ndimage.distance_transform_edt(labels == 0, return_indices=True)
    out = labels.copy()
    out[orphan] = labels[ix[orphan], iy[orphan]]
    return out


def _absorb_walls(labels: np.ndarray, allowed: np.ndarray, max_cells: float) -> np.ndarray:
    dist, (ix, iy) = ndimage.distance_transform_edt(labels == 0, return_indices=True)
    grow = (labels == 0) & allowed & (dist <= max_cells)
    out = labels.copy()
    out[grow] = labels[ix[grow], iy[grow]]
    return out


def mask_to_polygon(mask: np.ndarray, origin: np.ndarray, cell: float) -> list[np.ndarray]:
    padded = np.pad(mask.astype(np.float64), 1)
    rings = []
    for contour in find_contours(padded, 0.5):
        ring = approximate_polygon(contour - 1.0, tolerance=0.0)
        if len(ring) >= 4 and np.allclose(ring[0], ring[-1]):
            ring = ring[:-1]
        if len(ring) < 3:
            continue
        rings.append(origin + (ring + 0.5) * cell)
    return rings


def segment_rooms(
    grid: Grid2D,
    wall_frac: float = 0.4,
    min_room_area: float = 2.0,
    smooth_sigma: float = 2.0,
    floor_index: int = 0,
    wall_absorb: float = 1.0,
    marker_prominence: float = 0.3,
) -> list[RoomRegion]:
    """Watershed room segmentation of a BEV grid.

    Markers are regional maxima of the Gaussian-smoothed distance-to-wall map
    whose dynamic is at least ``marker_prominence`` meters; they are numbered
    by (distance desc, row-major position). Rooms below ``min_room_area``
    are merged into the neighbour sharing the longest boundary.
    """
    free = free_space(grid, wall_frac)
    if not free.any():
        raise NoFreeSpace(f"floor {floor_index}: no free-space cells")
    dist = ndimage.distance_transform_edt(np.pad(free, 1))[1:-1, 1:-1]
    smooth = ndimage.gaussian_filter(dist, smooth_sigma) if smooth_sigma > 0 else dist
    markers = _ordered_markers(smooth, free, marker_prominence / grid.cell_size)
    labels = _fill_unmarked(watershed(-smooth, markers, mask=free), free)
    labels = merge_small_regions(labels, min_room_area / grid.cell_size**2)

    # unobserved pockets behind tall furniture are closed over before absorbing
    reach = wall_absorb / grid.cell_size
    extent = _absorb_walls(labels, _hull(grid, max(1, int(np.ceil(reach / 2)))), reach)
    rooms = []
    for new, old in enumerate(sorted(int(v) for v in np.unique(labels[labels > 0]))):
        ext = extent == old
        rooms.append(
            RoomRegion(
                index=new,
                floor_index=floor_index,
                mask=labels == old,
                polygon=mask_to_polygon(ext, grid.origin, grid.cell_size),
                extent=ext,
                grid_origin=grid.origin.copy(),
                cell_size=grid.cell_size,
            )
        )
    return rooms


def attach_room_clouds(floor: FloorSlab, rooms: list[RoomRegion], grid: Grid2D) -> None:
    """Give each room the floor points that fall in its (wall-inclusive) extent."""
    if not rooms:
        return
    label = np.full(grid.shape, -1, dtype=np.int64)
    for k, room in enumerate(rooms):
        label[room.extent] = k
    cells = grid.cell_of(floor.cloud.points)
    inside = np.all((cells >= 0) & (cells < np.array(grid.shape)), axis=1)
    owner = np.full(len(cells), -1)
    owner[inside] = label[cells[inside, 0], cells[inside, 1]]
    for k, room in enumerate(rooms):
        room.cloud = floor.cloud.select(owner == k)


def segment_floor(floor: FloorSlab, cfg) -> tuple[Grid2D, list[RoomRegion]]:
    """Run bev_histogram + segment_rooms with a :class:`HiersegConfig`."""
    grid = bev_histogram(floor, cfg.cell, tuple(cfg.wall_band) if cfg.wall_band else None)
    rooms = segment_rooms(
        grid,
        wall_frac=cfg.wall_frac,
        min_room_area=cfg.min_room_area,
        smooth_sigma=cfg.smooth_sigma,
        floor_index=floor.index,
        wall_absorb=cfg.wall_absorb,
        marker_prominence=cfg.marker_prominence,
    )
    attach_room_clouds(floor, rooms, grid)
    return grid, rooms


# ---------------------------------------------------------------- polygons


def polygon_signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def point_in_polygon(xy: np.ndarray, rings: list[np.ndarray], eps: float = 1e-9) -> np.ndarray:
    """Even-odd containment over all rings; points on an edge count as inside."""
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))[:, :2]
    inside = np.zeros(len(xy), dtype=bool)
    on_edge = np.zeros(len(xy), dtype=bool)
    for ring in rings:
        a = np.asarray(ring, dtype=np.float64)
        b = np.roll(a, -1, axis=0)
        x1, y1, x2, y2 = a[:, 0], a[:, 1], b[:, 0], b[:, 1]
        dx, dy = x2 - x1, y2 - y1
        seg_len2 = dx * dx + dy * dy
        step = max(1, 2_000_000 // max(len(a), 1))
        for s in range(0, len(xy), step):
            px = xy[s : s + step, 0:1]
            py = xy[s : s + step, 1:2]
            straddle = (y1 > py) != (y2 > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (py - y1) * dx / dy
            crossings = np.count_nonzero(straddle & (px < xint), axis=1)
            inside[s : s + step] ^= (crossings % 2) == 1
            cross = dx * (py - y1) - dy * (px - x1)
            dot = (px - x1) * dx + (py - y1) * dy
            edge = (np.abs(cross) <= eps * np.sqrt(seg_len2) + eps) & (dot >= -eps) & (dot <= seg_len2 + eps)
            on_edge[s : s + step] |= edge.any(axis=1)
    return inside | on_edge


def room_volume_test(point, room: RoomRegion, floor: FloorSlab) -> bool:
    p = np.asarray(point, dtype=np.float64)
    if not (floor.z_min <= p[2] < floor.z_max):
        return False
    return bool(point_in_polygon(p[None, :2], room.polygon)[0])


def render_label_png(rooms: list[RoomRegion], shape: tuple[int, int], path) -> None:
    """Write room masks as an 8-bit label image (0 = no room), y up."""
    from PIL import Image

    img = np.zeros(shape, dtype=np.uint8)
    for k, room in enumerate(rooms, start=1):
        img[room.mask] = min(k * (255 // max(len(rooms), 1)), 255)
    Image.fromarray(np.flipud(img.T)).save(path)
