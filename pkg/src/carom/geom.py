"""Per-frame vehicle pose geometry.

Heading from the consensus vanishing point of sparse flow vectors, the
orthogonal vanishing-point triple for the vehicle axes, and the tangent-line
3D bounding box lifted from the silhouette contour.

The box construction works in a ground frame rotated so the vehicle heading
is the +a axis ("a" forward, "b" left).  Tangent lines from the forward and
lateral vanishing points map through T to ground lines: the line on the
camera side of the footprint is an exact footprint edge, the far one is the
elevated roof edge's ground shadow.  Tangents from the vertical vanishing
point are images of vertical box edges whose ground points are exact
footprint corners.  Height comes from the roof-edge viewing planes once the
footprint is fixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .calib import CameraModel, GroundTransform
from .config import BoxSection, FallbackSection, OcclusionSection, RansacSection
from .errors import (
    DegenerateDirection,
    DegenerateView,
    InsufficientHistory,
    InsufficientMotion,
    MaskTooSmall,
    RansacFailure,
)

VEHICLE_TYPES = (
    "pedestrian", "two-wheelers", "bus", "mini-truck", "semi-truck",
    "pickup-truck", "convertible", "coupe", "sedan", "all-terrain vehicle",
    "minivan", "van", "SUV", "trailer",
)


@dataclass(frozen=True)
class FlowVectorSet:
    """Sparse optical-flow vectors (p_prev -> p_cur) of one instance."""

    prev: np.ndarray  # (n, 2) px
    cur: np.ndarray   # (n, 2) px

    def __post_init__(self):
        object.__setattr__(self, "prev", np.asarray(self.prev, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "cur", np.asarray(self.cur, dtype=float).reshape(-1, 2))
        if len(self.prev) != len(self.cur):
            raise ValueError("prev/cur endpoint counts differ")

    def __len__(self) -> int:
        return len(self.prev)

    @property
    def vectors(self) -> np.ndarray:
        return self.cur - self.prev

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.prev + self.cur)

    @property
    def lengths(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)


@dataclass(frozen=True)
class VanishingTriple:
    """Homogeneous image points of the vehicle x (forward), y (left), z (up) axes."""

    vp_x: np.ndarray
    vp_y: np.ndarray
    vp_z: np.ndarray


@dataclass(frozen=True)
class VpConsensus:
    """RANSAC result: vanishing point, inlier mask, and whether the image
    motion runs toward the affine vp (receding) or away from it (approaching)."""

    vp: np.ndarray
    inliers: np.ndarray
    toward_vp: bool

    def __iter__(self):
        yield self.vp
        yield self.inliers


@dataclass
class Box3D:
    center_bottom: np.ndarray           # world m, on the ground surface
    heading: float                      # rad, world frame CCW from +x
    dims: tuple[float, float, float]    # length, width, height m
    corners: np.ndarray                 # (8, 3) world m
    image_corners: np.ndarray | None    # (8, 2) px
    method: str = "tangent"             # "tangent" | "fallback"
    raw_dims: tuple[float, float, float] | None = None  # pre-clamp tangent output


@dataclass(frozen=True)
class DimRange:
    lo: float
    default: float
    hi: float


@dataclass(frozen=True)
class TypeDimensionPrior:
    """Plausible (length, width, height) range and default per vehicle type."""

    ranges: dict[str, tuple[DimRange, DimRange, DimRange]]

    def for_type(self, vtype: str) -> tuple[DimRange, DimRange, DimRange]:
        if vtype not in self.ranges:
            # unknown labels fall back to the sedan prior rather than failing
            return self.ranges["sedan"]
        return self.ranges[vtype]

    def default_dims(self, vtype: str) -> tuple[float, float, float]:
        l, w, h = self.for_type(vtype)
        return (l.default, w.default, h.default)

    def clamp(self, vtype: str, dims) -> tuple[float, float, float]:
        rng = self.for_type(vtype)
        return tuple(float(np.clip(d, r.lo, r.hi)) for d, r in zip(dims, rng))

    @classmethod
    def load_default(cls) -> "TypeDimensionPrior":
        raw = json.loads(resources.files("carom.data").joinpath("vehicle_dims.json").read_text())
        ranges = {}
        for vtype, axes in raw.items():
            ranges[vtype] = tuple(DimRange(*axes[k]) for k in ("length", "width", "height"))
        return cls(ranges=ranges)


# --- small polygon helpers -------------------------------------------------

def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns CCW hull vertices (image y-down CCW)."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) < 3:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def build(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                ax, ay = out[-1] - out[-2]
                bx, by = p - out[-2]
                if ax * by - ay * bx <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = build(pts)
    upper = build(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def polygon_area(poly: np.ndarray) -> float:
    p = np.asarray(poly, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Vectorized even-odd crossing test; boundary points count as inside."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    poly = np.asarray(poly, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        crosses = ((y0 > y) != (y1 > y))
        with np.errstate(divide="ignore", invalid="ignore"):
            xin = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < np.where(crosses, xin, np.inf))
    return inside


def rect_iou(a, b) -> float:
    """IoU of two (x0, y0, x1, y1) rectangles."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def _vp_affine(vp: np.ndarray) -> tuple[np.ndarray | None, np.ndarray]:
    """Split a homogeneous vp into (affine position | None, unit direction)."""
    vp = np.asarray(vp, dtype=float)
    xy = vp[:2]
    if abs(vp[2]) < 1e-9 * max(np.linalg.norm(xy), 1.0):
        d = xy / np.linalg.norm(xy)
        return None, d
    pos = xy / vp[2]
    return pos, np.zeros(2)


# --- heading from flow vanishing point -------------------------------------

def ransac_heading_vp(flows: FlowVectorSet, horizon: np.ndarray,
                      cfg: RansacSection | None = None,
                      seed: int | None = None) -> VpConsensus:
    """Consensus vanishing point of the flow vectors, constrained to the horizon.

    Candidates are intersections of sampled flow-line pairs projected onto the
    horizon line.  A vector is an inlier when its direction is aligned with
    the candidate within the angular tolerance; the consensus must agree on
    one alignment (image motion toward the vp for receding vehicles, away for
    approaching ones).  Deterministic for a given seed.
    """
    cfg = cfg or RansacSection()
    if len(flows) < cfg.min_vectors:
        raise RansacFailure(f"need >= {cfg.min_vectors} flow vectors, got {len(flows)}")
    lengths = flows.lengths
    if float(np.median(lengths)) < cfg.min_flow_px:
        raise InsufficientMotion(
            f"median flow {np.median(lengths):.3f} px < {cfg.min_flow_px} px")

    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    usable = lengths > 1e-9
    idx = np.flatnonzero(usable)
    if len(idx) < 2:
        raise InsufficientMotion("all flow vectors are degenerate")

    # homogeneous flow lines through (prev, cur)
    p0 = np.hstack([flows.prev, np.ones((len(flows), 1))])
    p1 = np.hstack([flows.cur, np.ones((len(flows), 1))])
    lines = np.cross(p0, p1)

    # horizon parameterization: h0 + t * hd stays exactly on the line
    a, b, c = horizon / np.hypot(horizon[0], horizon[1])
    h0 = np.array([-a * c, -b * c])
    hd = np.array([-b, a])

    mids = flows.midpoints
    dirs = flows.vectors / np.maximum(lengths[:, None], 1e-12)
    tol = np.radians(cfg.angular_tol_deg)

    i = rng.integers(0, len(idx), size=cfg.iterations)
    j = rng.integers(0, len(idx), size=cfg.iterations)
    keep = i != j
    li, lj = lines[idx[i[keep]]], lines[idx[j[keep]]]
    cand = np.cross(li, lj)
    ok = np.abs(cand[:, 2]) > 1e-12 * np.linalg.norm(cand[:, :2], axis=1)
    cand = cand[ok]
    if len(cand) == 0:
        raise RansacFailure("no usable vanishing-point candidates")
    pts = cand[:, :2] / cand[:, 2:3]
    # closest point on the horizon
    tproj = (pts - h0) @ hd
    cand_vp = h0[None, :] + tproj[:, None] * hd[None, :]

    toward, away = _alignment_matrices(cand_vp, mids, dirs, tol)
    toward &= usable[None, :]
    away &= usable[None, :]
    counts = np.maximum(toward.sum(axis=1), away.sum(axis=1))
    best = int(np.argmax(counts))
    if counts[best] < max(2, cfg.min_inlier_ratio * len(flows)):
        raise RansacFailure(
            f"best consensus {counts[best]}/{len(flows)} below ratio {cfg.min_inlier_ratio}")

    # refine along the horizon with the inlier lines (perpendicular LSQ)
    t = tproj[best]
    inliers = toward[best] if toward[best].sum() >= away[best].sum() else away[best]
    ln = lines[inliers]
    nrm = np.linalg.norm(ln[:, :2], axis=1)
    ln = ln / np.maximum(nrm, 1e-12)[:, None]
    # residual of vp(t): ln . (h0 + t hd, 1), linear in t
    r0 = ln[:, 0] * h0[0] + ln[:, 1] * h0[1] + ln[:, 2]
    r1 = ln[:, 0] * hd[0] + ln[:, 1] * hd[1]
    denom = float(r1 @ r1)
    if denom > 1e-15:
        t = float(-(r0 @ r1) / denom)
    vp = h0 + t * hd
    tw, aw = _alignment_matrices(vp[None, :], mids, dirs, tol)
    toward_vp = tw[0].sum() >= aw[0].sum()
    inliers = (tw[0] if toward_vp else aw[0]) & usable
    if inliers.sum() < max(2, cfg.min_inlier_ratio * len(flows)):
        raise RansacFailure("refined vanishing point lost its consensus")
    return VpConsensus(vp=np.array([vp[0], vp[1], 1.0]), inliers=inliers,
                       toward_vp=bool(toward_vp))


def _alignment_matrices(cands: np.ndarray, mids: np.ndarray, dirs: np.ndarray,
                        tol: float) -> tuple[np.ndarray, np.ndarray]:
    to_vp = cands[:, None, :] - mids[None, :, :]
    nrm = np.linalg.norm(to_vp, axis=2)
    to_vp = to_vp / np.maximum(nrm, 1e-12)[:, :, None]
    cosang = np.clip((to_vp * dirs[None, :, :]).sum(axis=2), -1.0, 1.0)
    ang = np.arccos(cosang)
    return ang <= tol, ang >= np.pi - tol


def heading_from_vp(center_px, vp_x: np.ndarray, t: GroundTransform,
                    toward_vp: bool = True) -> float:
    """Ground heading of the image line from the 2D box center to vp_x.

    The line through the vanishing point images a world line parallel to the
    motion, so the direction of its ground trace is exact.  ``toward_vp``
    carries the flow-consensus alignment: receding vehicles move toward the
    affine vanishing point on the image, approaching vehicles away from it.
    """
    center = np.asarray(center_px, dtype=float)
    pos, d = _vp_affine(vp_x)
    if pos is not None:
        offs = pos - center
        dist = np.linalg.norm(offs)
        if dist < 1.0:
            raise DegenerateDirection("vanishing point coincides with the box center")
        step = offs * min(0.25, 50.0 / dist)
    else:
        step = 50.0 * d
    g0 = t.image_to_ground(center)
    g1 = t.image_to_ground(center + step)
    v = g1[:2] - g0[:2]
    if not toward_vp:
        v = -v
    if np.linalg.norm(v) < 1e-12:
        raise DegenerateDirection("zero-length ground direction")
    return float(np.arctan2(v[1], v[0]) % (2 * np.pi))


def orthogonal_vps(location_px, heading: float, t: GroundTransform,
                   camera: CameraModel) -> VanishingTriple:
    """Vanishing points of the vehicle's forward/left/up axes at a heading."""
    del location_px, t  # the projective vps depend only on directions
    cx, sx = np.cos(heading), np.sin(heading)
    vp_x = camera.vanishing_point([cx, sx, 0.0])
    vp_y = camera.vanishing_point([-sx, cx, 0.0])
    vp_z = camera.vanishing_point([0.0, 0.0, 1.0])
    return VanishingTriple(vp_x=vp_x, vp_y=vp_y, vp_z=vp_z)


def backproject_direction(camera: CameraModel, vp: np.ndarray) -> np.ndarray:
    """World direction whose image is the given vanishing point (unit norm)."""
    d = np.linalg.solve(camera.projection[:, :3], np.asarray(vp, dtype=float))
    return d / np.linalg.norm(d)


# --- occlusion gate ---------------------------------------------------------

def occlusion_gate(box2d, mask_area: float, neighbors,
                   cfg: OcclusionSection | None = None) -> str:
    """Classify a detection as 'clear', 'partial', or 'skip' for box fitting."""
    cfg = cfg or OcclusionSection()
    x0, y0, x1, y1 = box2d
    box_area = max((x1 - x0) * (y1 - y0), 1e-9)
    fill = mask_area / box_area
    max_iou = max((rect_iou(box2d, nb) for nb in neighbors), default=0.0)
    if max_iou > cfg.iou_skip or fill < cfg.fill_min:
        return "skip"
    if max_iou > cfg.iou_partial or fill < cfg.fill_partial:
        return "partial"
    return "clear"


# --- heading fallback from track history ------------------------------------

def heading_fallback(ground_history: np.ndarray,
                     cfg: FallbackSection | None = None) -> float:
    """Heading of the least-squares line through recent ground positions,
    oriented by time order (straight-line travel assumption)."""
    cfg = cfg or FallbackSection()
    pts = np.asarray(ground_history, dtype=float)[:, :2]
    if len(pts) < cfg.window:
        raise InsufficientHistory(f"need {cfg.window} positions, got {len(pts)}")
    disp = pts[-1] - pts[0]
    if np.linalg.norm(disp) < cfg.min_disp_m:
        raise InsufficientHistory(
            f"total displacement {np.linalg.norm(disp):.2f} m < {cfg.min_disp_m} m")
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered)
    d = vt[0]
    if d @ disp < 0:
        d = -d
    return float(np.arctan2(d[1], d[0]) % (2 * np.pi))


# --- tangent-line 3D bounding box -------------------------------------------

def _tangents_from_vp(hull: np.ndarray, vp: np.ndarray, cand_tol: float = 1e-9):
    """The two tangent lines from a vanishing point to a convex contour.

    Returns (line_lo, line_hi) as (touch_vertices, homogeneous_line) pairs:
    every hull vertex within ``cand_tol`` radians of the extreme ray counts
    as a candidate touch point (noisy contours split a tangent edge into
    near-collinear vertices).  Raises DegenerateView when the vp lies inside
    or too close to the hull.
    """
    pos, d = _vp_affine(vp)
    if pos is not None:
        if bool(points_in_polygon(pos[None, :], hull)[0]):
            raise DegenerateView("vanishing point inside the silhouette")
        rel = hull - pos
        ang = np.arctan2(rel[:, 1], rel[:, 0])
        ref = np.arctan2(*(hull.mean(axis=0) - pos)[::-1])
        ang = (ang - ref + np.pi) % (2 * np.pi) - np.pi
        if ang.max() - ang.min() >= np.pi - 1e-9:
            raise DegenerateView("vanishing point too close to the silhouette")
        i_lo, i_hi = int(np.argmin(ang)), int(np.argmax(ang))
        out = []
        for i in (i_lo, i_hi):
            q = hull[i]
            line = np.cross(np.array([vp[0], vp[1], vp[2]]),
                            np.array([q[0], q[1], 1.0]))
            near = np.abs(ang - ang[i]) <= cand_tol
            out.append((hull[near], line))
        return out
    # vp at infinity: tangents are the two support lines with direction d
    n = np.array([-d[1], d[0]])
    offs = hull @ n
    span = max(offs.max() - offs.min(), 1e-9)
    out = []
    for i in (int(np.argmin(offs)), int(np.argmax(offs))):
        q = hull[i]
        line = np.cross(np.array([q[0], q[1], 1.0]),
                        np.array([d[0], d[1], 0.0]))
        near = np.abs(offs - offs[i]) <= max(1e-9, cand_tol * span)
        out.append((hull[near], line))
    return out


def _ground_line(t: GroundTransform, touch: np.ndarray, line: np.ndarray,
                 vp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map an image tangent line to its ground trace (point, unit direction)."""
    q = touch[0]
    pos, d = _vp_affine(vp)
    if pos is not None:
        away = q - pos
        away = away / np.linalg.norm(away)
    else:
        away = d if d[1] >= 0 else -d  # either direction stays below the horizon
    g0 = t.image_to_ground(q)
    g1 = t.image_to_ground(q + 40.0 * away)
    v = g1[:2] - g0[:2]
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise DegenerateView("tangent line maps to a point on the ground")
    return g0[:2], v / n


def _line_coord_at(p0: np.ndarray, d: np.ndarray, axis_u: np.ndarray,
                   axis_v: np.ndarray, origin: np.ndarray, at_a: float) -> float:
    """b-coordinate of the ground line where its a-coordinate equals ``at_a``."""
    a0 = (p0 - origin) @ axis_u
    b0 = (p0 - origin) @ axis_v
    da = d @ axis_u
    db = d @ axis_v
    if abs(da) < 1e-9:
        return b0
    return b0 + (at_a - a0) / da * db


def box_corners(center_bottom: np.ndarray, heading: float,
                dims: tuple[float, float, float]) -> np.ndarray:
    """8 world corners: bottom (fl, fr, rr, rl) then top, x forward, y left."""
    length, w, h = dims
    cx, sx = np.cos(heading), np.sin(heading)
    u = np.array([cx, sx, 0.0])
    v = np.array([-sx, cx, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    c = np.asarray(center_bottom, dtype=float)
    half_l, half_w = length / 2.0, w / 2.0
    bottom = [c + half_l * u + half_w * v,
              c + half_l * u - half_w * v,
              c - half_l * u - half_w * v,
              c - half_l * u + half_w * v]
    return np.array(bottom + [p + h * up for p in bottom])


def box3d_from_mask(contour: np.ndarray, vps: VanishingTriple,
                    t: GroundTransform, camera: CameraModel,
                    prior: TypeDimensionPrior, vtype: str,
                    heading: float,
                    cfg: BoxSection | None = None,
                    fallback: bool = True) -> Box3D:
    """Tangent-line 3D bounding box of a silhouette contour.

    Needs the vehicle heading (the rotated ground frame), the vanishing
    triple, and the ground transform.  Degenerate viewing angles (a vanishing
    point inside the silhouette, or an unobservable extent) fall back to the
    type prior anchored at the mask-bottom ground point when ``fallback`` is
    true, otherwise raise DegenerateView.
    """
    cfg = cfg or BoxSection()
    contour = np.asarray(contour, dtype=float)
    if polygon_area(contour) < cfg.min_mask_px:
        raise MaskTooSmall(f"mask area {polygon_area(contour):.0f} px^2 < {cfg.min_mask_px}")
    hull = convex_hull(contour)

    try:
        return _box3d_tangent(hull, vps, t, camera, prior, vtype, heading, cfg)
    except DegenerateView:
        if not fallback:
            raise
        return fallback_box(contour, t, camera, prior, vtype, heading)


def _box3d_tangent(hull, vps, t, camera, prior, vtype, heading, cfg) -> Box3D:
    u2 = np.array([np.cos(heading), np.sin(heading)])
    v2 = np.array([-u2[1], u2[0]])

    tan_u = _tangents_from_vp(hull, vps.vp_x)
    tan_v = _tangents_from_vp(hull, vps.vp_y)
    # wider candidate window on the vertical tangents: the footprint corner
    # is whichever near-collinear touch vertex grounds closest to the camera
    tan_w = _tangents_from_vp(hull, vps.vp_z, cand_tol=3.5e-3)

    # vertical tangents give exact footprint corners (bottom ends of the
    # extreme vertical edges; the T-image of the top end is farther away)
    cam_xy = camera.center[:2]
    corners_g = []
    for touch, _line in tan_w:
        pts, ok = t.image_to_ground_many(touch)
        pts = pts[ok]
        if len(pts) == 0:
            raise DegenerateView("vertical tangent touches above the horizon")
        dist = np.linalg.norm(pts[:, :2] - cam_xy, axis=1)
        corners_g.append(pts[int(np.argmin(dist)), :2])
    origin = 0.5 * (corners_g[0] + corners_g[1])

    def coords(p):
        return float((p - origin) @ u2), float((p - origin) @ v2)

    ca = [coords(c)[0] for c in corners_g]
    cb = [coords(c)[1] for c in corners_g]
    cam_a, cam_b = coords(cam_xy)

    # ground traces of the forward/lateral tangents, evaluated near the vehicle
    u_lines = [_ground_line(t, touch, line, vps.vp_x) for touch, line in tan_u]
    v_lines = [_ground_line(t, touch, line, vps.vp_y) for touch, line in tan_v]
    ub = [_line_coord_at(p0, d, u2, v2, origin, 0.0) for p0, d in u_lines]
    va = [_line_coord_at(p0, d, v2, u2, origin, 0.0) for p0, d in v_lines]

    b_cands = list(cb)
    b_near = None
    if not (min(ub) <= cam_b <= max(ub)):
        b_near = min(ub, key=lambda y: abs(y - cam_b))
        b_cands.append(b_near)
    a_cands = list(ca)
    a_near = None
    if not (min(va) <= cam_a <= max(va)):
        a_near = min(va, key=lambda x: abs(x - cam_a))
        a_cands.append(a_near)

    a0, a1 = min(a_cands), max(a_cands)
    b0, b1 = min(b_cands), max(b_cands)
    a_known = (a1 - a0) > cfg.min_extent_m
    b_known = (b1 - b0) > cfg.min_extent_m
    if not a_known and not b_known:
        raise DegenerateView("neither footprint extent observable")

    rng_l, rng_w, rng_h = prior.for_type(vtype)
    u3 = np.array([u2[0], u2[1], 0.0])
    v3 = np.array([v2[0], v2[1], 0.0])
    o3 = np.array([origin[0], origin[1], 0.0])

    def roof_height(line, q_xy):
        plane = camera.projection.T @ line
        if abs(plane[2]) < 1e-12:
            return None
        q = o3 + q_xy[0] * u3 + q_xy[1] * v3
        h = -(plane[0] * q[0] + plane[1] * q[1] + plane[3]) / plane[2]
        return float(h)

    # each tangent's ground trace lies on the same side of the footprint as
    # the box edge it touches; bottom-edge tangents solve to h ~ 0 and are
    # dropped by the sanity band
    h_est = []
    if b_known:
        amid = 0.5 * (a0 + a1) if a_known else 0.0
        for (touch, line), yb in zip(tan_u, ub):
            b_side = b1 if yb > 0.5 * (b0 + b1) else b0
            hv = roof_height(line, (amid, b_side))
            if hv is not None:
                h_est.append(hv)
    if a_known:
        bmid = 0.5 * (b0 + b1) if b_known else 0.0
        for (touch, line), xa in zip(tan_v, va):
            a_side = a1 if xa > 0.5 * (a0 + a1) else a0
            hv = roof_height(line, (a_side, bmid))
            if hv is not None:
                h_est.append(hv)
    h_est = [h for h in h_est if 0.3 * rng_h.lo < h < 3.0 * rng_h.hi]
    height = float(np.mean(h_est)) if h_est else rng_h.default

    # recover an unobserved extent from the far roof edge at the solved height
    if not a_known:
        far_line = tan_v[int(np.argmax([abs(x - cam_a) for x in va]))][1]
        plane = camera.projection.T @ far_line
        bmid = 0.5 * (b0 + b1)
        qc = o3 + bmid * v3 + np.array([0, 0, height])
        denom = plane[:3] @ u3
        if abs(denom) < 1e-12:
            raise DegenerateView("length unobservable at this viewing angle")
        a_far = float(-(plane[:3] @ qc + plane[3]) / denom)
        a_lo, a_hi = min(a_cands + [a_far]), max(a_cands + [a_far])
        if a_hi - a_lo <= cfg.min_extent_m:
            raise DegenerateView("length unobservable at this viewing angle")
        a0, a1 = a_lo, a_hi
    if not b_known:
        far_line = tan_u[int(np.argmax([abs(y - cam_b) for y in ub]))][1]
        plane = camera.projection.T @ far_line
        amid = 0.5 * (a0 + a1)
        qc = o3 + amid * u3 + np.array([0, 0, height])
        denom = plane[:3] @ v3
        if abs(denom) < 1e-12:
            raise DegenerateView("width unobservable at this viewing angle")
        b_far = float(-(plane[:3] @ qc + plane[3]) / denom)
        b_lo, b_hi = min(b_cands + [b_far]), max(b_cands + [b_far])
        if b_hi - b_lo <= cfg.min_extent_m:
            raise DegenerateView("width unobservable at this viewing angle")
        b0, b1 = b_lo, b_hi

    raw = (a1 - a0, b1 - b0, height)
    dims = prior.clamp(vtype, raw)
    center_xy = origin + 0.5 * (a0 + a1) * u2 + 0.5 * (b0 + b1) * v2
    center = _ground_point(t, center_xy)
    corners = box_corners(center, heading, dims)
    image_corners = camera.project(corners)
    return Box3D(center_bottom=center, heading=float(heading % (2 * np.pi)),
                 dims=dims, corners=corners, image_corners=image_corners,
                 method="tangent", raw_dims=tuple(float(x) for x in raw))


def _ground_point(t: GroundTransform, xy: np.ndarray) -> np.ndarray:
    z = 0.0
    if t.kind == "lut" and t.surface is not None:
        zs = t.surface.sample(xy[0], xy[1])
        if np.isfinite(zs):
            z = float(zs)
    return np.array([xy[0], xy[1], z])


def fallback_box(contour: np.ndarray, t: GroundTransform, camera: CameraModel,
                 prior: TypeDimensionPrior, vtype: str, heading: float) -> Box3D:
    """Prior-default box anchored at the mask-bottom ground point."""
    contour = np.asarray(contour, dtype=float)
    vmax = contour[:, 1].max()
    bottom = contour[contour[:, 1] > vmax - 1.0].mean(axis=0)
    g = t.image_to_ground(bottom)
    dims = prior.default_dims(vtype)
    u2 = np.array([np.cos(heading), np.sin(heading)])
    away = g[:2] - camera.center[:2]
    s = 1.0 if away @ u2 >= 0 else -1.0
    center_xy = g[:2] + s * u2 * dims[0] / 2.0
    center = _ground_point(t, center_xy)
    corners = box_corners(center, heading, dims)
    return Box3D(center_bottom=center, heading=float(heading % (2 * np.pi)),
                 dims=dims, corners=corners,
                 image_corners=camera.project(corners),
                 method="fallback", raw_dims=None)
