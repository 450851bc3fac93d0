"""Camera and map calibration: every coordinate transform used downstream.

Conventions
-----------
World frame: metric, right-handed, z up, ground plane at z = 0 for planar
maps.  Image frame: pixels, origin at the top-left corner, y down.  A 2D map
uses map pixels with axes east/south from the top-left corner; a 3D map
(heightfield) uses east/north/up metric axes.  Headings are radians CCW from
world +x.

The camera is a pinhole with negligible distortion, represented by a 3x4
projection matrix ``P`` (world -> image, homogeneous).  The image-to-ground
mapping ``T`` is either a planar homography derived from ``P`` (flat ground)
or a per-pixel look-up table built by intersecting viewing rays with a
heightfield.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AboveHorizon,
    CalibrationError,
    DegenerateConfiguration,
    DegenerateHorizon,
    EmptyIntersection,
    InvalidLutEntry,
    MissingAnchor,
    SchemaMismatch,
    TooFewPoints,
)

# WGS84 ellipsoid
_WGS84_A = 6378137.0
_WGS84_F = 1.0 / 298.257223563
_WGS84_B = _WGS84_A * (1.0 - _WGS84_F)
_WGS84_E2 = _WGS84_F * (2.0 - _WGS84_F)


@dataclass(frozen=True)
class PointCorrespondence:
    """One labeled image/world point pair used for calibration."""

    image_point: tuple[float, float]
    world_point: tuple[float, ...]  # (x, y) map/ground or (x, y, z) world, meters


@dataclass(frozen=True)
class CameraModel:
    """Calibrated pinhole camera.

    ``projection`` maps homogeneous world points to image pixels.
    ``ground_homography`` maps image pixels to the z=0 ground plane (the
    image->ground direction; its inverse is ``image_from_ground``).
    ``horizon`` is the homogeneous image line containing every ground-plane
    vanishing point, normalized so hypot(l0, l1) = 1.
    """

    projection: np.ndarray          # 3x4
    ground_homography: np.ndarray   # 3x3, image -> ground
    horizon: np.ndarray             # 3, homogeneous line
    image_size: tuple[int, int]     # (width, height)
    reproj_rms_px: float = 0.0

    @property
    def image_from_ground(self) -> np.ndarray:
        return np.linalg.inv(self.ground_homography)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        m = self.projection[:, :3]
        return -np.linalg.solve(m, self.projection[:, 3])

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project Nx3 (or length-3) world points to Nx2 (or length-2) pixels."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ph = np.hstack([pts, np.ones((len(pts), 1))])
        uvw = ph @ self.projection.T
        uv = uvw[:, :2] / uvw[:, 2:3]
        return uv[0] if np.asarray(points).ndim == 1 else uv

    def depths(self, points: np.ndarray) -> np.ndarray:
        """Projective depth of world points; positive means in front of the camera."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ph = np.hstack([pts, np.ones((len(pts), 1))])
        return ph @ self.projection[2].T

    def vanishing_point(self, direction) -> np.ndarray:
        """Homogeneous image point of a 3D direction (point at infinity)."""
        d = np.asarray(direction, dtype=float)
        return self.projection[:, :3] @ d


@dataclass(frozen=True)
class MapFrame:
    """Transform between the world frame and a georeferenced map.

    Planar maps: ``anchor_px`` is the map pixel of the world origin, ``scale``
    is meters per map pixel and ``rotation`` the CCW angle from map-east to
    world +x.  Map y points south, so the linear part carries a y flip.
    Heightfield maps are metric ENU, scale defaults to 1.
    """

    kind: str = "planar"            # "planar" | "heightfield"
    scale: float = 1.0              # m per map px (planar) or 1 (heightfield)
    anchor_px: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0           # rad
    geodetic_anchor: tuple[float, float, float] | None = None  # lat deg, lon deg, h m

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("map scale must be positive")
        if self.kind not in ("planar", "heightfield"):
            raise ValueError(f"unknown map kind {self.kind!r}")

    def _linear(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        flip = np.diag([1.0, -1.0]) if self.kind == "planar" else np.eye(2)
        return self.scale * rot @ flip

    def map_to_world(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        rel = p[..., :2] - np.asarray(self.anchor_px)
        return rel @ self._linear().T

    def world_to_map(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        inv = np.linalg.inv(self._linear())
        return p[..., :2] @ inv.T + np.asarray(self.anchor_px)

    def enu_from_world(self, p) -> np.ndarray:
        """East-north-up offset (m) of a world point from the map anchor."""
        p = np.asarray(p, dtype=float)
        m = self.world_to_map(p) - np.asarray(self.anchor_px)
        east = m[..., 0] * self.scale
        north = -m[..., 1] * self.scale if self.kind == "planar" else m[..., 1] * self.scale
        up = p[..., 2] if p.shape[-1] > 2 else np.zeros_like(east)
        return np.stack([east, north, up], axis=-1)


@dataclass(frozen=True)
class Heightfield:
    """Regular grid of ground elevations z(x, y) in meters."""

    origin: tuple[float, float]     # world (x, y) of grid cell (0, 0)
    cell_size: float
    z: np.ndarray                   # (ny, nx), z[j, i] at (origin_x + i*cell, origin_y + j*cell)

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell size must be positive")
        if not np.all(np.isfinite(self.z)):
            raise ValueError("heightfield elevations must be finite")

    def sample(self, x, y):
        """Bilinear elevation sample; NaN outside the grid."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        gx = (x - self.origin[0]) / self.cell_size
        gy = (y - self.origin[1]) / self.cell_size
        ny, nx = self.z.shape
        valid = (gx >= 0) & (gx <= nx - 1) & (gy >= 0) & (gy <= ny - 1)
        gx = np.clip(gx, 0, nx - 1)
        gy = np.clip(gy, 0, ny - 1)
        i0 = np.clip(np.floor(gx).astype(int), 0, nx - 2) if nx > 1 else np.zeros_like(gx, int)
        j0 = np.clip(np.floor(gy).astype(int), 0, ny - 2) if ny > 1 else np.zeros_like(gy, int)
        fx, fy = gx - i0, gy - j0
        z00 = self.z[j0, i0]
        z10 = self.z[j0, np.minimum(i0 + 1, nx - 1)]
        z01 = self.z[np.minimum(j0 + 1, ny - 1), i0]
        z11 = self.z[np.minimum(j0 + 1, ny - 1), np.minimum(i0 + 1, nx - 1)]
        out = (z00 * (1 - fx) * (1 - fy) + z10 * fx * (1 - fy)
               + z01 * (1 - fx) * fy + z11 * fx * fy)
        return np.where(valid, out, np.nan)

    def save(self, path):
        ny, nx = self.z.shape
        with open(path, "w") as f:
            f.write("# carom heightfield v1\n")
            f.write(f"{self.origin[0]} {self.origin[1]}\n")
            f.write(f"{self.cell_size}\n")
            f.write(f"{nx} {ny}\n")
            for row in self.z:
                f.write(" ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path) -> "Heightfield":
        with open(path) as f:
            lines = [ln for ln in f if not ln.startswith("#")]
        ox, oy = (float(v) for v in lines[0].split())
        cell = float(lines[1])
        nx, ny = (int(v) for v in lines[2].split())
        vals = np.array([float(v) for ln in lines[3:] for v in ln.split()])
        if vals.size != nx * ny:
            raise SchemaMismatch(f"heightfield data has {vals.size} values, expected {nx * ny}")
        return cls(origin=(ox, oy), cell_size=cell, z=vals.reshape(ny, nx))


@dataclass
class GroundTransform:
    """Image pixel -> world ground point map T.

    ``homography`` case: closed-form projective map onto z=0.  ``lut`` case:
    per-pixel ray/heightfield intersections, bilinearly interpolated for
    sub-pixel queries.  ``reference_pixel`` is any pixel known to see the
    ground; it fixes which side of the horizon is valid.
    """

    kind: str                                  # "homography" | "lut"
    homography: np.ndarray | None = None       # 3x3 image -> ground
    reference_pixel: tuple[float, float] | None = None
    lut: np.ndarray | None = None              # (h, w, 3) world points
    lut_valid: np.ndarray | None = None        # (h, w) bool
    surface: Heightfield | None = None
    image_size: tuple[int, int] | None = None

    def _horizon_sign(self) -> float:
        h3 = self.homography[2]
        px = self.reference_pixel
        return float(np.sign(h3 @ np.array([px[0], px[1], 1.0])))

    def image_to_ground(self, px) -> np.ndarray:
        """Map one pixel to its world ground point.  Raises AboveHorizon /
        InvalidLutEntry when the pixel does not see the ground."""
        px = np.asarray(px, dtype=float)
        if self.kind == "homography":
            v = np.array([px[0], px[1], 1.0])
            w = self.homography[2] @ v
            if abs(w) < 1e-12 or np.sign(w) != self._horizon_sign():
                raise AboveHorizon(f"pixel {px.tolist()} is at or above the horizon")
            g = self.homography @ v
            return np.array([g[0] / w, g[1] / w, 0.0])
        return self._lut_lookup(px)

    def image_to_ground_many(self, px: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized mapping of Nx2 pixels; returns (Nx3 points, valid mask)."""
        px = np.atleast_2d(np.asarray(px, dtype=float))
        if self.kind == "homography":
            v = np.hstack([px, np.ones((len(px), 1))])
            w = v @ self.homography[2]
            ok = (np.abs(w) > 1e-12) & (np.sign(w) == self._horizon_sign())
            g = v @ self.homography.T
            out = np.zeros((len(px), 3))
            safe = np.where(ok, w, 1.0)
            out[:, 0] = g[:, 0] / safe
            out[:, 1] = g[:, 1] / safe
            return out, ok
        pts = np.zeros((len(px), 3))
        ok = np.zeros(len(px), dtype=bool)
        for i, p in enumerate(px):
            try:
                pts[i] = self._lut_lookup(p)
                ok[i] = True
            except (InvalidLutEntry, AboveHorizon):
                pass
        return pts, ok

    def _lut_lookup(self, px) -> np.ndarray:
        h, w = self.lut_valid.shape
        x, y = float(px[0]), float(px[1])
        if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
            raise InvalidLutEntry(f"pixel {px} outside the image")
        i0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
        j0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
        i1, j1 = min(i0 + 1, w - 1), min(j0 + 1, h - 1)
        if not (self.lut_valid[j0, i0] and self.lut_valid[j0, i1]
                and self.lut_valid[j1, i0] and self.lut_valid[j1, i1]):
            raise InvalidLutEntry(f"pixel {px} has no ground intersection")
        fx, fy = x - i0, y - j0
        return (self.lut[j0, i0] * (1 - fx) * (1 - fy)
                + self.lut[j0, i1] * fx * (1 - fy)
                + self.lut[j1, i0] * (1 - fx) * fy
                + self.lut[j1, i1] * fx * fy)

    def ground_to_image(self, p) -> np.ndarray:
        """Inverse map: world ground point -> pixel (homography case only exact;
        LUT case falls back to the flat approximation through the camera)."""
        p = np.asarray(p, dtype=float)
        if self.kind == "homography":
            hinv = np.linalg.inv(self.homography)
            v = hinv @ np.array([p[0], p[1], 1.0])
            return v[:2] / v[2]
        if self._camera is None:
            raise InvalidLutEntry("LUT transform has no camera for the inverse map")
        return self._camera.project(np.array([p[0], p[1], p[2] if len(p) > 2 else 0.0]))

    _camera: CameraModel | None = field(default=None, repr=False)


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hartley normalization: centroid to the origin, mean norm to sqrt(dim)."""
    pts = np.asarray(pts, dtype=float)
    dim = pts.shape[1]
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    scale = np.sqrt(dim) / d if d > 0 else 1.0
    t = np.eye(dim + 1)
    t[:dim, :dim] *= scale
    t[:dim, dim] = -scale * centroid
    ph = np.hstack([pts, np.ones((len(pts), 1))]) @ t.T
    return ph[:, :dim], t


def _points_rank(pts: np.ndarray, tol: float = 1e-9) -> int:
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s / s[0] > tol))


def estimate_projection(correspondences: list[PointCorrespondence],
                        image_size: tuple[int, int],
                        reproj_tol_px: float = 2.0) -> CameraModel:
    """Direct linear transform with Hartley normalization.

    Needs >= 6 correspondences with 3D world points that are neither
    collinear nor all coplanar (a single plane leaves the projection
    ambiguous; use estimate_homography for that case).
    """
    if len(correspondences) < 6:
        raise TooFewPoints(f"need >= 6 correspondences, got {len(correspondences)}")
    img = np.array([c.image_point for c in correspondences], dtype=float)
    wld = np.array([c.world_point for c in correspondences], dtype=float)
    if wld.shape[1] != 3:
        raise DegenerateConfiguration("estimate_projection needs 3D world points")
    rank = _points_rank(wld)
    if rank <= 1:
        raise DegenerateConfiguration("world points are collinear")
    if rank == 2:
        raise DegenerateConfiguration(
            "world points are coplanar; the projection is ambiguous "
            "(use estimate_homography for a single ground plane)")

    imgn, t_img = _normalize_points(img)
    wldn, t_wld = _normalize_points(wld)
    a = np.zeros((2 * len(imgn), 12))
    for i, ((u, v), xh) in enumerate(zip(imgn, np.hstack([wldn, np.ones((len(wldn), 1))]))):
        a[2 * i, 4:8] = -xh
        a[2 * i, 8:12] = v * xh
        a[2 * i + 1, 0:4] = xh
        a[2 * i + 1, 8:12] = -u * xh
    _, s, vt = np.linalg.svd(a)
    if s[0] > 0 and s[-2] / s[0] < 1e-10:
        raise DegenerateConfiguration("rank-deficient correspondence set")
    p = vt[-1].reshape(3, 4)
    p = np.linalg.inv(t_img) @ p @ t_wld

    # canonical scale/sign: unit principal ray, positive depth in front
    scale = np.linalg.norm(p[2, :3])
    if scale == 0:
        raise DegenerateConfiguration("camera at infinity")
    p /= scale
    centroid_h = np.append(wld.mean(axis=0), 1.0)
    if p[2] @ centroid_h < 0:
        p = -p

    reproj = _project_with(p, wld)
    rms = float(np.sqrt(np.mean(np.sum((reproj - img) ** 2, axis=1))))
    hig = p[:, [0, 1, 3]]
    if abs(np.linalg.det(hig)) < 1e-15:
        raise DegenerateConfiguration("camera center lies in the ground plane")
    horizon = _horizon_from_projection(p)
    model = CameraModel(projection=p, ground_homography=np.linalg.inv(hig),
                        horizon=horizon, image_size=tuple(image_size),
                        reproj_rms_px=rms)
    if rms > reproj_tol_px:
        raise CalibrationError(
            f"reprojection RMS {rms:.3f} px exceeds tolerance {reproj_tol_px} px")
    return model


def _project_with(p: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = np.hstack([pts, np.ones((len(pts), 1))])
    uvw = ph @ p.T
    return uvw[:, :2] / uvw[:, 2:3]


def _horizon_from_projection(p: np.ndarray) -> np.ndarray:
    line = np.cross(p[:, 0], p[:, 1])
    n = np.hypot(line[0], line[1])
    if n < 1e-12 * max(abs(line[2]), 1.0):
        raise DegenerateHorizon("optical axis perpendicular to the ground")
    return line / n


def compute_horizon(camera: CameraModel) -> np.ndarray:
    """Homogeneous image line through all ground-direction vanishing points."""
    return _horizon_from_projection(camera.projection)


def estimate_homography(correspondences: list[PointCorrespondence],
                        reference_pixel: tuple[float, float] | None = None) -> GroundTransform:
    """DLT homography from >= 4 image/ground correspondences (image -> ground)."""
    if len(correspondences) < 4:
        raise TooFewPoints(f"need >= 4 correspondences, got {len(correspondences)}")
    img = np.array([c.image_point for c in correspondences], dtype=float)
    gnd = np.array([np.asarray(c.world_point)[:2] for c in correspondences], dtype=float)
    if _points_rank(img) <= 1 or _points_rank(gnd) <= 1:
        raise DegenerateConfiguration("correspondences are collinear")

    imgn, t_img = _normalize_points(img)
    gndn, t_gnd = _normalize_points(gnd)
    a = np.zeros((2 * len(imgn), 9))
    for i, ((x, y), (u, v)) in enumerate(zip(gndn, imgn)):
        uh = np.array([u, v, 1.0])
        a[2 * i, 3:6] = -uh
        a[2 * i, 6:9] = y * uh
        a[2 * i + 1, 0:3] = uh
        a[2 * i + 1, 6:9] = -x * uh
    _, s, vt = np.linalg.svd(a)
    if s[0] > 0 and s[-2] / s[0] < 1e-10:
        raise DegenerateConfiguration("degenerate correspondence set")
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_gnd) @ h @ t_img
    if abs(np.linalg.det(h)) < 1e-15:
        raise DegenerateConfiguration("homography is singular")
    h /= np.linalg.norm(h)
    ref = tuple(img.mean(axis=0)) if reference_pixel is None else tuple(reference_pixel)
    return GroundTransform(kind="homography", homography=h, reference_pixel=ref)


def ground_transform_from_camera(camera: CameraModel,
                                 surface: Heightfield | None = None) -> GroundTransform:
    """Build T from a calibrated camera: homography for flat ground, ray-cast
    LUT when a heightfield is supplied."""
    if surface is not None:
        return build_ground_lut(camera, surface)
    ref = _reference_ground_pixel(camera)
    t = GroundTransform(kind="homography", homography=camera.ground_homography,
                        reference_pixel=ref, image_size=camera.image_size)
    t._camera = camera
    return t


def _reference_ground_pixel(camera: CameraModel) -> tuple[float, float]:
    # pixel of a ground point ahead of the camera, guaranteed below horizon
    c = camera.center
    horizon = camera.horizon
    w, h = camera.image_size
    # walk a ground ray under the camera's principal direction
    m = camera.projection[:, :3]
    principal = np.linalg.solve(m, np.array([w / 2, h / 2, 1.0]))
    if camera.projection[2, :3] @ principal < 0:
        principal = -principal
    d = principal / np.linalg.norm(principal)
    if abs(d[2]) > 1e-9 and c[2] > 0 and d[2] < 0:
        t = -c[2] / d[2]
        g = c + t * d
        px = camera.project(np.array([g[0], g[1], 0.0]))
        return float(px[0]), float(px[1])
    # fall back to the lowest image border point below the horizon
    probe = np.array([w / 2.0, h - 1.0, 1.0])
    if horizon @ probe != 0:
        return w / 2.0, h - 1.0
    return w / 2.0, 0.0


def build_ground_lut(camera: CameraModel, surface: Heightfield,
                     max_range: float = 1000.0) -> GroundTransform:
    """Per-pixel first ray/heightfield intersection along each viewing ray.

    Pixels whose ray never reaches the surface (above the horizon or leaving
    the grid) are marked invalid.
    """
    w, h = camera.image_size
    c = camera.center
    m = camera.projection[:, :3]
    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pix = np.stack([us.ravel(), vs.ravel(), np.ones(w * h)], axis=1)
    dirs = np.linalg.solve(m, pix.T).T
    # orient rays to point away from the camera (positive depth)
    depth_sign = np.sign(camera.projection[2, :3] @ dirs.T)
    dirs *= np.where(depth_sign == 0, 1.0, depth_sign)[:, None]

    horiz = np.linalg.norm(dirs[:, :2], axis=1)
    horiz = np.where(horiz < 1e-12, 1e-12, horiz)
    step = surface.cell_size / 2.0
    n_steps = int(np.ceil(max_range / step))

    pts = np.zeros((w * h, 3))
    valid = np.zeros(w * h, dtype=bool)
    d_unit = dirs / horiz[:, None]      # unit horizontal speed

    s_lo = np.zeros(w * h)
    f_lo = c[2] - surface.sample(np.full(w * h, c[0]), np.full(w * h, c[1]))
    f_lo = np.where(np.isnan(f_lo), np.inf, f_lo)
    active = np.ones(w * h, dtype=bool)
    hit_lo = np.zeros(w * h)
    hit_hi = np.zeros(w * h)
    found = np.zeros(w * h, dtype=bool)
    for k in range(1, n_steps + 1):
        if not active.any():
            break
        s = k * step
        p = c[None, :] + s * d_unit
        zs = surface.sample(p[:, 0], p[:, 1])
        f = p[:, 2] - zs
        oob = np.isnan(f)
        cross = active & ~oob & (f <= 0) & (f_lo > 0) & np.isfinite(f_lo)
        hit_lo[cross] = s_lo[cross]
        hit_hi[cross] = s
        found |= cross
        active &= ~cross
        # rays that left the grid after having been on it stop marching
        was_on = np.isfinite(f_lo) & (f_lo != np.inf)
        active &= ~(oob & was_on)
        s_lo = np.where(active, s, s_lo)
        f_lo = np.where(active, np.where(oob, np.inf, f), f_lo)

    if found.any():
        lo = hit_lo[found]
        hi = hit_hi[found]
        sel = d_unit[found]
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            p = c[None, :] + mid[:, None] * sel
            f = p[:, 2] - surface.sample(p[:, 0], p[:, 1])
            f = np.where(np.isnan(f), -1.0, f)
            above = f > 0
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        smid = 0.5 * (lo + hi)
        pts[found] = c[None, :] + smid[:, None] * sel
        valid[found] = True

    if not valid.any():
        raise EmptyIntersection("no image pixel hits the ground surface")
    t = GroundTransform(kind="lut",
                        lut=pts.reshape(h, w, 3),
                        lut_valid=valid.reshape(h, w),
                        surface=surface, image_size=(w, h))
    t._camera = camera
    return t


def image_to_ground(t: GroundTransform, px) -> np.ndarray:
    return t.image_to_ground(px)


def world_to_map(frame: MapFrame, p) -> np.ndarray:
    return frame.world_to_map(p)


def map_to_world(frame: MapFrame, p) -> np.ndarray:
    return frame.map_to_world(p)


# --- geodetic conversions (local ENU tangent plane about the map anchor) ---

def geodetic_to_ecef(lat_deg: float, lon_deg: float, h: float) -> np.ndarray:
    lat, lon = np.radians(lat_deg), np.radians(lon_deg)
    n = _WGS84_A / np.sqrt(1 - _WGS84_E2 * np.sin(lat) ** 2)
    return np.array([
        (n + h) * np.cos(lat) * np.cos(lon),
        (n + h) * np.cos(lat) * np.sin(lon),
        (n * (1 - _WGS84_E2) + h) * np.sin(lat),
    ])


def ecef_to_geodetic(xyz) -> tuple[float, float, float]:
    """Bowring's iteration; sub-millimeter for terrestrial points."""
    x, y, z = (float(v) for v in xyz)
    lon = np.arctan2(y, x)
    p = np.hypot(x, y)
    if p < 1e-9:
        lat = np.pi / 2 * np.sign(z)
        h = abs(z) - _WGS84_B
        return np.degrees(lat), np.degrees(lon), h
    lat = np.arctan2(z, p * (1 - _WGS84_E2))
    for _ in range(10):
        n = _WGS84_A / np.sqrt(1 - _WGS84_E2 * np.sin(lat) ** 2)
        h = p / np.cos(lat) - n
        lat = np.arctan2(z, p * (1 - _WGS84_E2 * n / (n + h)))
    n = _WGS84_A / np.sqrt(1 - _WGS84_E2 * np.sin(lat) ** 2)
    h = p / np.cos(lat) - n
    return float(np.degrees(lat)), float(np.degrees(lon)), float(h)


def _enu_rotation(lat_deg: float, lon_deg: float) -> np.ndarray:
    """Rows are the ENU axes expressed in ECEF."""
    lat, lon = np.radians(lat_deg), np.radians(lon_deg)
    sl, cl = np.sin(lat), np.cos(lat)
    so, co = np.sin(lon), np.cos(lon)
    return np.array([
        [-so, co, 0.0],
        [-sl * co, -sl * so, cl],
        [cl * co, cl * so, sl],
    ])


def enu_to_geodetic(anchor: tuple[float, float, float], enu) -> tuple[float, float, float]:
    r = _enu_rotation(anchor[0], anchor[1])
    ecef = geodetic_to_ecef(*anchor) + r.T @ np.asarray(enu, dtype=float)
    return ecef_to_geodetic(ecef)


def geodetic_to_enu(anchor: tuple[float, float, float],
                    lat_deg: float, lon_deg: float, h: float) -> np.ndarray:
    r = _enu_rotation(anchor[0], anchor[1])
    return r @ (geodetic_to_ecef(lat_deg, lon_deg, h) - geodetic_to_ecef(*anchor))


def world_to_wgs84(frame: MapFrame, p) -> tuple[float, float, float]:
    """World point -> (lat deg, lon deg, ellipsoidal height m)."""
    if frame.geodetic_anchor is None:
        raise MissingAnchor("map frame has no geodetic anchor")
    enu = frame.enu_from_world(np.asarray(p, dtype=float))
    return enu_to_geodetic(frame.geodetic_anchor, enu)


# --- calibration file I/O ---

def save_calibration(path, camera: CameraModel | None, map_frame: MapFrame,
                     transform: GroundTransform | None = None,
                     heightfield_path: str | None = None) -> None:
    doc = {
        "version": 1,
        "image_size": list(camera.image_size) if camera else None,
        "projection": camera.projection.ravel().tolist() if camera else None,
        "ground_homography": (camera.ground_homography.ravel().tolist() if camera
                              else transform.homography.ravel().tolist() if transform is not None
                              else None),
        "horizon": camera.horizon.tolist() if camera else None,
        "reproj_rms_px": camera.reproj_rms_px if camera else None,
        "reference_pixel": (list(transform.reference_pixel)
                            if transform is not None and transform.reference_pixel else None),
        "map": {
            "kind": map_frame.kind,
            "scale": map_frame.scale,
            "anchor_px": list(map_frame.anchor_px),
            "rotation": map_frame.rotation,
            "geodetic_anchor": (list(map_frame.geodetic_anchor)
                                if map_frame.geodetic_anchor else None),
        },
        "heightfield": heightfield_path,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_calibration(path) -> tuple[CameraModel | None, MapFrame, GroundTransform | None]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise SchemaMismatch(f"{path}: not valid JSON ({e})")
    if doc.get("version") != 1:
        raise SchemaMismatch(f"{path}: unsupported calibration version {doc.get('version')}")
    m = doc["map"]
    map_frame = MapFrame(kind=m["kind"], scale=m["scale"],
                         anchor_px=tuple(m["anchor_px"]), rotation=m["rotation"],
                         geodetic_anchor=tuple(m["geodetic_anchor"]) if m.get("geodetic_anchor") else None)
    camera = None
    if doc.get("projection"):
        proj = np.array(doc["projection"], dtype=float).reshape(3, 4)
        camera = CameraModel(projection=proj,
                             ground_homography=np.array(doc["ground_homography"]).reshape(3, 3),
                             horizon=np.array(doc["horizon"]),
                             image_size=tuple(doc["image_size"]),
                             reproj_rms_px=doc.get("reproj_rms_px") or 0.0)
    transform = None
    if camera is not None:
        surface = None
        if doc.get("heightfield"):
            hf_path = Path(doc["heightfield"])
            if not hf_path.is_absolute():
                hf_path = path.parent / hf_path
            surface = Heightfield.load(hf_path)
        transform = ground_transform_from_camera(camera, surface)
    elif doc.get("ground_homography"):
        transform = GroundTransform(kind="homography",
                                    homography=np.array(doc["ground_homography"]).reshape(3, 3),
                                    reference_pixel=tuple(doc["reference_pixel"]) if doc.get("reference_pixel") else (0.0, 0.0))
    return camera, map_frame, transform
