"""Point-cloud storage, PLY I/O and exact nearest-neighbour queries.

Clouds are immutable once built; the KD-tree index and the mean
nearest-neighbour spacing are computed lazily and cached. Only PLY is
supported (ascii and binary little-endian, float or double vertex
properties x, y, z; everything else is skipped on read and omitted on
write).
"""

from __future__ import annotations

import math
import os
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from . import geometry


class PlyParseError(ValueError):
    """Malformed PLY header or body."""


class NonFiniteCoordinateError(PlyParseError):
    """A vertex coordinate parsed to nan or inf."""


class EmptyCloudError(ValueError):
    """A cloud must contain at least one point."""


class NNResult(NamedTuple):
    index: int
    distance: float


def resolve_workers() -> int:
    """Thread count for KD-tree queries; MTPCR_THREADS caps it (unset: all cores)."""
    raw = os.environ.get("MTPCR_THREADS", "").strip()
    if not raw:
        return -1
    n = int(raw)
    return n if n >= 1 else -1


class PointCloud:
    """Immutable set of 3D points with cached spatial index.

    ``offset`` records the centroid subtracted by :func:`decentralize`
    so results can be mapped back to the original frame; it is zero for
    clouds that were never decentralized.
    """

    def __init__(self, points, offset=None):
        pts = np.ascontiguousarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise EmptyCloudError("point cloud is empty")
        if not np.isfinite(pts).all():
            raise NonFiniteCoordinateError("point cloud contains non-finite coordinates")
        pts = pts.copy()
        pts.flags.writeable = False
        self._points = pts
        self.offset = np.zeros(3) if offset is None else np.asarray(offset, dtype=float).reshape(3)
        self._tree = None
        self._mean_nn = None

    def __len__(self) -> int:
        return self._points.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self._points)
        return self._tree

    @property
    def centroid(self) -> np.ndarray:
        return self._points.mean(axis=0)

    @property
    def mean_nn(self) -> float:
        if self._mean_nn is None:
            self._mean_nn = mean_nn_distance(self)
        return self._mean_nn

    def bbox_edges(self) -> np.ndarray:
        """Axis-aligned bounding-box edge lengths."""
        return self._points.max(axis=0) - self._points.min(axis=0)


def decentralize(cloud: PointCloud) -> tuple[PointCloud, np.ndarray]:
    """Subtract the centroid; returns the centred cloud and the offset."""
    offset = cloud.centroid
    return PointCloud(cloud.points - offset, offset=offset), offset


def nearest(cloud: PointCloud, query) -> NNResult:
    """Exact nearest neighbour of ``query``; ties go to the lowest index."""
    q = np.asarray(query, dtype=float).reshape(3)
    if len(cloud) == 1:
        return NNResult(0, float(np.linalg.norm(cloud.points[0] - q)))
    dist, idx = cloud.tree.query(q, k=2)
    if dist[0] < dist[1]:
        i = int(idx[0])
        return NNResult(i, float(np.linalg.norm(cloud.points[i] - q)))
    # Exact tie at the top: collect every candidate at the minimal distance
    # and pick the lowest index deterministically.
    radius = np.nextafter(dist[0], np.inf)
    cand = sorted(cloud.tree.query_ball_point(q, radius))
    dists = np.linalg.norm(cloud.points[cand] - q, axis=1)
    dmin = dists.min()
    for i, d in zip(cand, dists):
        if d == dmin:
            return NNResult(int(i), float(d))
    raise AssertionError("unreachable")


def mean_nn_distance(cloud: PointCloud) -> float:
    """Mean distance of each point to its nearest other point in the cloud."""
    if len(cloud) < 2:
        raise ValueError("mean nearest-neighbour distance needs at least two points")
    dist, _ = cloud.tree.query(cloud.points, k=2)
    return float(dist[:, 1].mean())


def adaptive_threshold(c1: PointCloud, c2: PointCloud, c3: PointCloud) -> float:
    """Inlier threshold (sqrt(2)/2) * d with d the mean of the three clouds'
    mean nearest-neighbour spacings: the largest shift that keeps a correct
    correspondence matched (half-diagonal of a d-spaced grid cell)."""
    d = (c1.mean_nn + c2.mean_nn + c3.mean_nn) / 3.0
    return (math.sqrt(2.0) / 2.0) * d


def apply_transform(cloud: PointCloud, transform) -> PointCloud:
    """Map every point through a 4x4 transform; the index is rebuilt lazily."""
    return PointCloud(geometry.transform_points(cloud.points, transform))


def subsample(cloud: PointCloud, ratio: float, seed) -> PointCloud:
    """Uniform random subset without replacement of size ceil(ratio * N)."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"sample ratio must be in (0, 1], got {ratio}")
    n = len(cloud)
    k = math.ceil(ratio * n)
    if k >= n:
        return cloud
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return PointCloud(cloud.points[idx])


# ---------------------------------------------------------------------------
# PLY I/O

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_header(fh):
    """Returns (format, elements) where elements is a list of
    (name, count, properties) and each property is ("scalar", type, name)
    or ("list", count_type, item_type, name)."""
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise PlyParseError("not a PLY file (missing 'ply' magic)")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise PlyParseError("unexpected end of file inside PLY header")
        tokens = line.decode("ascii", errors="replace").strip().split()
        if not tokens or tokens[0] == "comment" or tokens[0] == "obj_info":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"unsupported PLY format line: {line!r}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise PlyParseError(f"malformed element line: {line!r}")
            try:
                count = int(tokens[2])
            except ValueError as exc:
                raise PlyParseError(f"bad element count: {line!r}") from exc
            elements.append((tokens[1], count, []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyParseError("property before any element in PLY header")
            if len(tokens) == 3 and tokens[1] in _PLY_TYPES:
                elements[-1][2].append(("scalar", tokens[1], tokens[2]))
            elif len(tokens) == 5 and tokens[1] == "list" \
                    and tokens[2] in _PLY_TYPES and tokens[3] in _PLY_TYPES:
                elements[-1][2].append(("list", tokens[2], tokens[3], tokens[4]))
            else:
                raise PlyParseError(f"malformed property line: {line!r}")
        elif tokens[0] == "end_header":
            break
        else:
            raise PlyParseError(f"unknown PLY header keyword: {tokens[0]!r}")
    if fmt is None:
        raise PlyParseError("PLY header has no format line")
    return fmt, elements


def _vertex_xyz_columns(props):
    cols = {}
    for pos, prop in enumerate(props):
        if prop[0] == "scalar" and prop[2] in ("x", "y", "z"):
            if _PLY_TYPES[prop[1]] not in ("f4", "f8"):
                raise PlyParseError(f"vertex property {prop[2]} must be float or double")
            cols[prop[2]] = pos
    if sorted(cols) != ["x", "y", "z"]:
        raise PlyParseError("vertex element lacks float x, y, z properties")
    return cols["x"], cols["y"], cols["z"]


def _read_ascii_element(fh, count, props, want_xyz):
    ix = iy = iz = -1
    if want_xyz:
        ix, iy, iz = _vertex_xyz_columns(props)
    out = np.empty((count, 3)) if want_xyz else None
    for row in range(count):
        line = fh.readline()
        if not line:
            raise PlyParseError("unexpected end of file in PLY body")
        tokens = line.decode("ascii", errors="replace").split()
        values = []
        pos = 0
        for prop in props:
            if pos >= len(tokens):
                raise PlyParseError(f"short PLY data row: {line!r}")
            if prop[0] == "scalar":
                values.append(tokens[pos])
                pos += 1
            else:
                n = int(tokens[pos])
                pos += 1 + n
                values.append(None)
        if want_xyz:
            try:
                out[row, 0] = float(values[ix])
                out[row, 1] = float(values[iy])
                out[row, 2] = float(values[iz])
            except ValueError as exc:
                raise PlyParseError(f"bad vertex coordinate in row: {line!r}") from exc
    return out


def _read_binary_element(fh, count, props, want_xyz):
    has_list = any(p[0] == "list" for p in props)
    if not has_list:
        dtype = np.dtype([(f"p{i}", "<" + _PLY_TYPES[p[1]]) for i, p in enumerate(props)])
        raw = fh.read(dtype.itemsize * count)
        if len(raw) != dtype.itemsize * count:
            raise PlyParseError("unexpected end of file in PLY body")
        if not want_xyz:
            return None
        rec = np.frombuffer(raw, dtype=dtype)
        ix, iy, iz = _vertex_xyz_columns(props)
        out = np.column_stack([
            rec[f"p{ix}"].astype(float),
            rec[f"p{iy}"].astype(float),
            rec[f"p{iz}"].astype(float),
        ])
        return out
    # Slow path: list properties force row-by-row reads.
    ix = iy = iz = -1
    if want_xyz:
        ix, iy, iz = _vertex_xyz_columns(props)
    out = np.empty((count, 3)) if want_xyz else None
    for row in range(count):
        values = []
        for prop in props:
            if prop[0] == "scalar":
                fmtchar = "<" + _PLY_TYPES[prop[1]]
                size = np.dtype(fmtchar).itemsize
                raw = fh.read(size)
                if len(raw) != size:
                    raise PlyParseError("unexpected end of file in PLY body")
                values.append(np.frombuffer(raw, dtype=fmtchar)[0])
            else:
                csize = np.dtype("<" + _PLY_TYPES[prop[1]]).itemsize
                raw = fh.read(csize)
                if len(raw) != csize:
                    raise PlyParseError("unexpected end of file in PLY body")
                n = int(np.frombuffer(raw, dtype="<" + _PLY_TYPES[prop[1]])[0])
                isize = np.dtype("<" + _PLY_TYPES[prop[2]]).itemsize
                raw = fh.read(isize * n)
                if len(raw) != isize * n:
                    raise PlyParseError("unexpected end of file in PLY body")
                values.append(None)
        if want_xyz:
            out[row] = (float(values[ix]), float(values[iy]), float(values[iz]))
    return out


def load_ply(path) -> PointCloud:
    """Read vertex x, y, z from an ascii or binary little-endian PLY file."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        if not any(name == "vertex" for name, _, _ in elements):
            raise PlyParseError("PLY header has no vertex element")
        coords = None
        for name, count, props in elements:
            want = name == "vertex"
            if want and count == 0:
                raise EmptyCloudError("PLY vertex element is empty")
            if fmt == "ascii":
                data = _read_ascii_element(fh, count, props, want)
            else:
                data = _read_binary_element(fh, count, props, want)
            if want:
                coords = data
                break
    if not np.isfinite(coords).all():
        raise NonFiniteCoordinateError(f"non-finite vertex coordinate in {path}")
    return PointCloud(coords)


def save_ply(cloud: PointCloud, path, binary: bool = False) -> None:
    """Write vertices as double x, y, z. Ascii output round-trips exactly."""
    pts = cloud.points
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(pts, dtype="<f8").tobytes())
        else:
            lines = [
                f"{float(x)!r} {float(y)!r} {float(z)!r}"
                for x, y, z in pts
            ]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
