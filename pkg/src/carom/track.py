"""Frame-to-frame association, velocity measurement, Kalman state estimation,
pose smoothing, and emission of anonymized per-frame state records.

The tracker owns mutable per-track state with a single writer per camera
stream.  Emitted records are plain values; they carry no image crops and no
identity data.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon as ShapelyPolygon

from .calib import CameraModel, GroundTransform
from .config import PipelineConfig
from .errors import (
    AboveHorizon,
    DegenerateDirection,
    HeadingEstimationError,
    InvalidLutEntry,
    MaskTooSmall,
    NoHistory,
    NonPsdCovariance,
)
from .geom import (
    Box3D,
    FlowVectorSet,
    TypeDimensionPrior,
    box3d_from_mask,
    box_corners,
    heading_fallback,
    heading_from_vp,
    occlusion_gate,
    orthogonal_vps,
    points_in_polygon,
    polygon_area,
    ransac_heading_vp,
)

log = logging.getLogger(__name__)


@dataclass
class DetectionRecord:
    """Per-frame, per-instance detector output (pipeline input)."""

    frame_id: int
    instance_id: int
    mask: np.ndarray                    # (n, 2) px polygon
    box2d: tuple[float, float, float, float]
    flow: FlowVectorSet                 # prev -> cur pairs on this instance
    vtype: str
    score: float = 1.0

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DetectionRecord":
        flow = doc.get("flow") or []
        prev = np.array([f[0] for f in flow], dtype=float).reshape(-1, 2)
        cur = np.array([f[1] for f in flow], dtype=float).reshape(-1, 2)
        return cls(frame_id=int(doc["frame"]), instance_id=int(doc["id"]),
                   mask=np.asarray(doc["polygon"], dtype=float),
                   box2d=tuple(doc["box"]),
                   flow=FlowVectorSet(prev=prev, cur=cur),
                   vtype=doc["type"], score=float(doc.get("score", 1.0)))

    def to_json_dict(self) -> dict:
        return {
            "frame": self.frame_id,
            "id": self.instance_id,
            "polygon": [[float(u), float(v)] for u, v in self.mask],
            "box": [float(v) for v in self.box2d],
            "flow": [[[float(a), float(b)], [float(c), float(d)]]
                     for (a, b), (c, d) in zip(self.flow.prev, self.flow.cur)],
            "type": self.vtype,
            "score": float(self.score),
        }


@dataclass
class StateRecord:
    """Anonymized per-frame output: where a vehicle is and how it moves."""

    frame_id: int
    track_id: int
    position: np.ndarray                # world m
    velocity: np.ndarray                # world m/s
    heading: float                      # rad
    dims: tuple[float, float, float]
    corners: np.ndarray                 # (8, 3) world m
    vtype: str
    predicted_only: bool = False
    speed_raw: float | None = None      # debug: raw flow-derived speed
    sigma_pos: float = 0.0              # 1-sigma position uncertainty, m

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.velocity))

    def to_json_dict(self) -> dict:
        return {
            "frame": self.frame_id,
            "track": self.track_id,
            "position": [float(v) for v in self.position],
            "velocity": [float(v) for v in self.velocity],
            "speed": self.speed,
            "heading": float(self.heading),
            "dims": [float(v) for v in self.dims],
            "corners": [[float(x) for x in c] for c in self.corners],
            "type": self.vtype,
            "predicted_only": self.predicted_only,
            "speed_raw": None if self.speed_raw is None else float(self.speed_raw),
            "sigma_pos": float(self.sigma_pos),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "StateRecord":
        return cls(frame_id=int(doc["frame"]), track_id=int(doc["track"]),
                   position=np.asarray(doc["position"], dtype=float),
                   velocity=np.asarray(doc["velocity"], dtype=float),
                   heading=float(doc["heading"]), dims=tuple(doc["dims"]),
                   corners=np.asarray(doc["corners"], dtype=float),
                   vtype=doc["type"],
                   predicted_only=bool(doc.get("predicted_only", False)),
                   speed_raw=doc.get("speed_raw"),
                   sigma_pos=float(doc.get("sigma_pos", 0.0)))


@dataclass
class VehicleTrack:
    """One tracked vehicle: Kalman state plus smoothed pose attributes."""

    track_id: int
    state: np.ndarray                   # (x, y, z, vx, vy, vz)
    cov: np.ndarray                     # 6x6
    planar: bool = True
    status: str = "active"              # active | coasting | closed
    coast_count: int = 0
    heading: float | None = None        # smoothed
    heading_vec: np.ndarray | None = None
    dims: tuple[float, float, float] | None = None  # smoothed
    type_votes: Counter = field(default_factory=Counter)
    history: deque = field(default_factory=lambda: deque(maxlen=40))
    pair_dists: deque = field(default_factory=lambda: deque(maxlen=35))
    n_vel_pairs: int = 0
    last_mask: np.ndarray | None = None
    last_image_pos: np.ndarray | None = None
    last_obs_frame: int | None = None
    observed_this_frame: bool = False

    @property
    def vtype(self) -> str:
        """Majority-voted class; ties break lexicographically for determinism."""
        if not self.type_votes:
            return "sedan"
        top = max(self.type_votes.values())
        return sorted(k for k, v in self.type_votes.items() if v == top)[0]

    def ground_positions(self, n: int) -> np.ndarray:
        pts = [h["ground"] for h in list(self.history)[-n:] if h["ground"] is not None]
        return np.array(pts) if pts else np.zeros((0, 3))


def cv6_matrices(dt: float, sigma_accel: float) -> tuple[np.ndarray, np.ndarray]:
    """Constant-velocity transition and discretized white-acceleration noise."""
    f = np.eye(6)
    f[0, 3] = f[1, 4] = f[2, 5] = dt
    s2 = sigma_accel ** 2
    q11 = s2 * dt ** 4 / 4.0
    q12 = s2 * dt ** 3 / 2.0
    q22 = s2 * dt ** 2
    q = np.zeros((6, 6))
    for i in range(3):
        q[i, i] = q11
        q[i, i + 3] = q[i + 3, i] = q12
        q[i + 3, i + 3] = q22
    return f, q


def _enforce_planar(track: VehicleTrack) -> None:
    track.state[2] = track.state[5] = 0.0
    track.cov[2, :] = track.cov[:, 2] = 0.0
    track.cov[5, :] = track.cov[:, 5] = 0.0
    track.cov[2, 2] = track.cov[5, 5] = 1e-9


def _check_spd(p: np.ndarray) -> np.ndarray:
    p = 0.5 * (p + p.T)
    try:
        np.linalg.cholesky(p + 1e-12 * np.eye(6))
    except np.linalg.LinAlgError:
        raise NonPsdCovariance("covariance lost positive definiteness")
    return p


def kalman_step(track: VehicleTrack,
                obs: tuple[np.ndarray, np.ndarray | None] | None,
                dt: float, cfg: PipelineConfig) -> VehicleTrack:
    """One predict(+update) cycle.  `obs` is (position, velocity|None) or None
    for a coasting frame; coasting beyond kalman.max_coast closes the track."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    kcfg = cfg.kalman
    f, q = cv6_matrices(dt, kcfg.sigma_accel)
    track.state = f @ track.state
    track.cov = f @ track.cov @ f.T + q

    if obs is not None:
        pos, vel = obs
        if vel is not None:
            h = np.eye(6)
            z = np.concatenate([pos, vel])
            r = np.diag([kcfg.sigma_obs_pos ** 2] * 3 + [kcfg.sigma_obs_vel ** 2] * 3)
        else:
            h = np.eye(6)[:3]
            z = np.asarray(pos, dtype=float)
            r = np.diag([kcfg.sigma_obs_pos ** 2] * 3)
        y = z - h @ track.state
        s = h @ track.cov @ h.T + r
        k = track.cov @ h.T @ np.linalg.inv(s)
        track.state = track.state + k @ y
        track.cov = (np.eye(6) - k @ h) @ track.cov
        track.coast_count = 0
        track.status = "active"
    else:
        track.coast_count += 1
        if track.coast_count > kcfg.max_coast:
            track.status = "closed"
        elif track.status != "closed":
            track.status = "coasting"

    if track.planar:
        _enforce_planar(track)
    track.cov = _check_spd(track.cov)
    return track


def aggregate_distances(dists, max_dist_m: float, max_steps: int) -> tuple[float, int]:
    """Walk recent frame-pair distances backward, newest first, accumulating
    until adding another pair would pass max_dist_m or max_steps is reached.
    The newest pair is always included."""
    total = 0.0
    n = 0
    for d in reversed(list(dists)):
        if n >= max_steps:
            break
        if n >= 1 and total + d > max_dist_m:
            break
        total += d
        n += 1
        assert n <= max_steps and (n == 1 or total <= max_dist_m)
    return total, n


def measure_velocity(track: VehicleTrack, inlier_flows: FlowVectorSet,
                     t: GroundTransform, frame_dt: float,
                     max_dist_m: float = 5.0, max_steps: int = 30) -> tuple[float, float]:
    """Speed from the mean inlier flow length mapped through T at the vehicle
    location, aggregated over recent frame pairs (5 m / 30 steps window).
    Returns (speed m/s, per-pair ground distance m).  The velocity direction
    is the track heading."""
    if track.last_image_pos is None:
        raise NoHistory("track has no image location yet")
    if len(inlier_flows) == 0:
        raise NoHistory("no inlier flow vectors")
    mean_len = float(inlier_flows.lengths.mean())
    d = inlier_flows.vectors.mean(axis=0)
    n = np.linalg.norm(d)
    if n < 1e-12:
        raise NoHistory("flow vectors cancel out")
    d = d / n
    # the flow chord ends at the current location: walk backward to its start
    p = np.asarray(track.last_image_pos, dtype=float)
    g0 = t.image_to_ground(p - mean_len * d)
    g1 = t.image_to_ground(p)
    pair_dist = float(np.linalg.norm((g1 - g0)[:2]))
    track.pair_dists.append(pair_dist)
    total, pairs = aggregate_distances(track.pair_dists, max_dist_m, max_steps)
    return total / (pairs * frame_dt), pair_dist


def smooth_pose(track: VehicleTrack, heading: float | None,
                dims: tuple[float, float, float] | None,
                prior: TypeDimensionPrior, smooth_n: int = 10) -> VehicleTrack:
    """Running average of heading (circular) and box dimensions."""
    alpha = 1.0 / smooth_n
    if heading is not None:
        v = np.array([np.cos(heading), np.sin(heading)])
        if track.heading_vec is None:
            track.heading_vec = v
        else:
            track.heading_vec = (1 - alpha) * track.heading_vec + alpha * v
        track.heading = float(np.arctan2(track.heading_vec[1],
                                         track.heading_vec[0]) % (2 * np.pi))
    if dims is not None:
        if track.dims is None:
            track.dims = tuple(dims)
        else:
            track.dims = tuple((1 - alpha) * np.array(track.dims) + alpha * np.array(dims))
        track.dims = prior.clamp(track.vtype, track.dims)
    return track


def emit(track: VehicleTrack, frame_id: int,
         speed_raw: float | None = None) -> StateRecord | None:
    """StateRecord for an open track; closed tracks emit nothing."""
    if track.status == "closed":
        return None
    if track.heading is None or track.dims is None:
        return None
    pos = track.state[:3].copy()
    vel = track.state[3:].copy()
    corners = box_corners(pos, track.heading, track.dims)
    sigma = float(np.sqrt(max(track.cov[0, 0] + track.cov[1, 1], 0.0) / 2.0))
    return StateRecord(frame_id=frame_id, track_id=track.track_id,
                       position=pos, velocity=vel, heading=track.heading,
                       dims=track.dims, corners=corners, vtype=track.vtype,
                       predicted_only=not track.observed_this_frame,
                       speed_raw=speed_raw, sigma_pos=sigma)


# --- association -------------------------------------------------------------

@dataclass
class TrackView:
    """What association needs to know about an existing track."""

    track_id: int
    polygon: np.ndarray         # positioned at the expected current location
    warp_by_flow: bool = True   # warp by the candidate's mean flow (active tracks)


def _poly(p: np.ndarray) -> ShapelyPolygon:
    poly = ShapelyPolygon(p)
    return poly if poly.is_valid else poly.buffer(0)


def associate(tracks: list[TrackView], detections: list[DetectionRecord],
              alpha: float = 0.5, min_score: float = 0.05) -> dict[int, int]:
    """Greedy one-to-one assignment instance_id -> track_id.

    Score blends the fraction of a detection's flow origins landing inside
    the track's previous mask with the overlap of the flow-warped previous
    mask and the current mask.  Ties break on lower track id, then lower
    instance id.
    """
    if not tracks or not detections:
        return {}
    scores = []
    det_polys = {d.instance_id: _poly(d.mask) for d in detections}
    for tv in tracks:
        tpoly_raw = tv.polygon
        for det in detections:
            if len(det.flow) > 0 and np.isfinite(det.flow.vectors).all():
                frac = float(points_in_polygon(det.flow.prev, tpoly_raw).mean()) \
                    if len(det.flow) else 0.0
                shift = det.flow.vectors.mean(axis=0) if tv.warp_by_flow else np.zeros(2)
            else:
                frac = 0.0
                shift = np.zeros(2)
            warped = _poly(tpoly_raw + shift)
            dpoly = det_polys[det.instance_id]
            union = warped.union(dpoly).area
            iou = warped.intersection(dpoly).area / union if union > 0 else 0.0
            score = alpha * frac + (1 - alpha) * iou
            if score >= min_score:
                scores.append((-score, tv.track_id, det.instance_id))
    scores.sort()
    taken_tracks: set[int] = set()
    taken_dets: set[int] = set()
    assignment: dict[int, int] = {}
    for s, track_id, det_id in scores:
        if track_id in taken_tracks or det_id in taken_dets:
            continue
        assignment[det_id] = track_id
        taken_tracks.add(track_id)
        taken_dets.add(det_id)
    return assignment


# --- the per-camera tracking pipeline ---------------------------------------

class Tracker:
    """Single-camera online tracking pipeline.

    Feed frames in order through step(); records come back per frame once a
    track has a settled pose and velocity.
    """

    def __init__(self, camera: CameraModel, transform: GroundTransform,
                 config: PipelineConfig | None = None, frame_dt: float = 1 / 30.0,
                 planar: bool = True, prior: TypeDimensionPrior | None = None):
        self.camera = camera
        self.transform = transform
        self.cfg = config or PipelineConfig()
        self.frame_dt = frame_dt
        self.planar = planar
        self.prior = prior or TypeDimensionPrior.load_default()
        self.tracks: dict[int, VehicleTrack] = {}
        self._next_id = 1

    def open_tracks(self) -> list[VehicleTrack]:
        return [t for t in self.tracks.values() if t.status != "closed"]

    def step(self, frame_id: int, detections: list[DetectionRecord]) -> list[StateRecord]:
        cfg = self.cfg
        views = []
        for track in self.open_tracks():
            if track.last_mask is None:
                continue
            poly = track.last_mask
            coasting = track.status == "coasting"
            if coasting and track.last_image_pos is not None:
                try:
                    pred_img = self.transform.ground_to_image(track.state[:3])
                    poly = poly + (pred_img - track.last_image_pos)
                except (AboveHorizon, InvalidLutEntry):
                    pass
            views.append(TrackView(track_id=track.track_id, polygon=poly,
                                   warp_by_flow=not coasting))
        assignment = associate(views, detections,
                               alpha=cfg.association.alpha,
                               min_score=cfg.association.min_score)

        records: list[StateRecord] = []
        matched_tracks: set[int] = set()
        speed_raw_by_track: dict[int, float | None] = {}
        for det in sorted(detections, key=lambda d: d.instance_id):
            if det.instance_id in assignment:
                track = self.tracks[assignment[det.instance_id]]
                matched_tracks.add(track.track_id)
            else:
                track = self._spawn(det)
            speed_raw_by_track[track.track_id] = self._update_track(
                track, det, frame_id, detections)

        for track in self.open_tracks():
            if track.track_id not in matched_tracks and \
                    track.track_id not in speed_raw_by_track:
                track.observed_this_frame = False
                kalman_step(track, None, self.frame_dt, cfg)
                track.history.append({"frame": frame_id, "ground": None})
                if self._prediction_left_image(track):
                    track.status = "closed"

        for track in sorted(self.open_tracks(), key=lambda t: t.track_id):
            if track.n_vel_pairs >= 2:
                rec = emit(track, frame_id,
                           speed_raw=speed_raw_by_track.get(track.track_id))
                if rec is not None:
                    records.append(rec)
        return records

    # internal helpers

    def _spawn(self, det: DetectionRecord) -> VehicleTrack:
        kcfg = self.cfg.kalman
        pos = self._mask_bottom_ground(det.mask)
        state = np.zeros(6)
        if pos is not None:
            state[:3] = pos
        cov = np.diag([kcfg.init_pos_var] * 3 + [kcfg.init_vel_var] * 3)
        track = VehicleTrack(track_id=self._next_id, state=state, cov=cov,
                             planar=self.planar)
        if self.planar:
            _enforce_planar(track)
        self._next_id += 1
        self.tracks[track.track_id] = track
        return track

    def _prediction_left_image(self, track: VehicleTrack) -> bool:
        """Coasting tracks whose predicted position exits the frame are closed
        immediately (the vehicle left the camera's coverage)."""
        try:
            px = self.transform.ground_to_image(track.state[:3])
        except (AboveHorizon, InvalidLutEntry):
            return True
        w, h = self.camera.image_size
        margin = 8.0
        return not (-margin <= px[0] <= w + margin and -margin <= px[1] <= h + margin)

    def _mask_bottom_ground(self, mask: np.ndarray) -> np.ndarray | None:
        vmax = mask[:, 1].max()
        bottom = mask[mask[:, 1] > vmax - 1.0].mean(axis=0)
        try:
            return self.transform.image_to_ground(bottom)
        except (AboveHorizon, InvalidLutEntry):
            return None

    def _update_track(self, track: VehicleTrack, det: DetectionRecord,
                      frame_id: int, all_dets: list[DetectionRecord]) -> float | None:
        cfg = self.cfg
        track.type_votes[det.vtype] += 1
        track.observed_this_frame = True

        heading_meas, inliers = self._heading(track, det, frame_id)

        neighbors = [d.box2d for d in all_dets if d.instance_id != det.instance_id]
        gate = occlusion_gate(det.box2d, polygon_area(det.mask), neighbors,
                              cfg.occlusion)

        box: Box3D | None = None
        if heading_meas is not None and gate != "skip":
            try:
                box = box3d_from_mask(det.mask,
                                      orthogonal_vps(None, heading_meas,
                                                     self.transform, self.camera),
                                      self.transform, self.camera, self.prior,
                                      det.vtype, heading_meas, cfg.box)
            except (MaskTooSmall, AboveHorizon, InvalidLutEntry):
                box = None

        speed_raw = None
        vel_obs = None
        if box is not None:
            try:
                track.last_image_pos = self.transform.ground_to_image(box.center_bottom)
            except (AboveHorizon, InvalidLutEntry):
                track.last_image_pos = None
            if inliers is not None and track.last_image_pos is not None:
                inl = FlowVectorSet(prev=det.flow.prev[inliers],
                                    cur=det.flow.cur[inliers])
                try:
                    speed_raw, _ = measure_velocity(
                        track, inl, self.transform, self.frame_dt,
                        max_dist_m=cfg.velocity.max_dist_m,
                        max_steps=cfg.velocity.max_steps)
                    track.n_vel_pairs += 1
                    if track.n_vel_pairs >= 2 and track.heading is not None:
                        hd = track.heading
                        vel_obs = speed_raw * np.array([np.cos(hd), np.sin(hd), 0.0])
                except NoHistory:
                    pass

        if box is not None:
            obs = (box.center_bottom, vel_obs)
            kalman_step(track, obs, self.frame_dt, cfg)
            track.history.append({"frame": frame_id, "ground": box.center_bottom})
        else:
            # detected but pose not measurable: predict only, keep the track
            # alive (coasting closure counts only missing detections)
            ground = self._mask_bottom_ground(det.mask)
            if track.heading is None and ground is not None:
                kalman_step(track, (ground, None), self.frame_dt, cfg)
            else:
                kalman_step(track, None, self.frame_dt, cfg)
                track.coast_count = 0
                track.status = "active"
                track.observed_this_frame = False
            track.history.append({"frame": frame_id, "ground": ground})

        dims_meas = None
        if box is not None and box.method == "tangent" and gate == "clear":
            dims_meas = box.dims
        elif track.dims is None and box is not None:
            dims_meas = box.dims
        elif track.dims is None:
            dims_meas = self.prior.default_dims(det.vtype)
        smooth_pose(track, heading_meas, dims_meas, self.prior,
                    cfg.smoothing.smooth_n)

        track.last_mask = det.mask
        track.last_obs_frame = frame_id
        if track.last_image_pos is None:
            vmax = det.mask[:, 1].max()
            track.last_image_pos = det.mask[det.mask[:, 1] > vmax - 1.0].mean(axis=0)
        return speed_raw

    def _heading(self, track: VehicleTrack, det: DetectionRecord,
                 frame_id: int) -> tuple[float | None, np.ndarray | None]:
        cfg = self.cfg
        seed = cfg.ransac.seed + frame_id * 1000003 + det.instance_id
        x0, y0, x1, y1 = det.box2d
        center = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])
        try:
            res = ransac_heading_vp(det.flow, self.camera.horizon,
                                    cfg.ransac, seed=seed)
            heading = heading_from_vp(center, res.vp, self.transform,
                                      toward_vp=res.toward_vp)
            return heading, res.inliers
        except (HeadingEstimationError, AboveHorizon, InvalidLutEntry,
                DegenerateDirection):
            pass
        try:
            pts = track.ground_positions(cfg.fallback.window + 5)
            return heading_fallback(pts, cfg.fallback), None
        except HeadingEstimationError:
            return track.heading, None


# --- file I/O ----------------------------------------------------------------

def write_detections(path, detections) -> None:
    with open(path, "w") as f:
        for det in detections:
            f.write(json.dumps(det.to_json_dict(), separators=(",", ":")) + "\n")


def read_detections(path) -> list[DetectionRecord]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(DetectionRecord.from_json_dict(json.loads(line)))
    out.sort(key=lambda d: (d.frame_id, d.instance_id))
    return out


def write_records(path, records) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json_dict(), separators=(",", ":")) + "\n")


def read_records(path) -> list[StateRecord]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(StateRecord.from_json_dict(json.loads(line)))
    return out


CSV_FIELDS = ["frame", "t", "track", "type", "x", "y", "z", "vx", "vy", "vz",
              "speed", "heading", "length", "width", "height", "predicted_only"]


def write_csv(path, records, frame_dt: float) -> None:
    """CSV export; timestamps derive from frame_id * frame_dt, SI units."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.frame_id, r.frame_id * frame_dt, r.track_id, r.vtype,
                        *(float(v) for v in r.position),
                        *(float(v) for v in r.velocity),
                        r.speed, r.heading, *r.dims, int(r.predicted_only)])


def run_tracking(camera: CameraModel, transform: GroundTransform,
                 detections: list[DetectionRecord],
                 config: PipelineConfig | None = None,
                 frame_dt: float = 1 / 30.0, planar: bool = True) -> list[StateRecord]:
    """Run the full tracking pipeline over a detection stream."""
    tracker = Tracker(camera, transform, config=config, frame_dt=frame_dt,
                      planar=planar)
    by_frame: dict[int, list[DetectionRecord]] = {}
    for det in detections:
        by_frame.setdefault(det.frame_id, []).append(det)
    records: list[StateRecord] = []
    if not by_frame:
        return records
    for frame_id in range(min(by_frame), max(by_frame) + 1):
        records.extend(tracker.step(frame_id, by_frame.get(frame_id, [])))
    return records
