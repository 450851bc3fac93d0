"""Scene persistence, replay, what-if re-simulation, and the read/edit service.

A scene is the reconstructed traffic for one camera over one period: the map
frame, the per-track state records, and the fitted shape vectors.  Replay is
pure interpolation over the records; a what-if edit re-runs one vehicle along
its recorded polyline at a modified speed as a non-destructive overlay.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calib import MapFrame, load_calibration
from .errors import (
    FrameOutOfLifespan,
    MissingCalibration,
    OutOfRange,
    SchemaMismatch,
    UnknownTrack,
)
from .track import StateRecord, read_records

SCENE_VERSION = 1


@dataclass(frozen=True)
class WhatIfEdit:
    """Speed modification of one vehicle from a frame onward."""

    track_id: int
    edit_frame: int
    speed_scale: float | None = None
    speed_mps: float | None = None

    def __post_init__(self):
        if (self.speed_scale is None) == (self.speed_mps is None):
            raise ValueError("specify exactly one of speed_scale / speed_mps")
        val = self.speed_scale if self.speed_scale is not None else self.speed_mps
        if val < 0:
            raise ValueError("speed must be non-negative")


@dataclass
class Scene:
    map_frame: MapFrame
    frame_dt: float
    tracks: dict[int, list[StateRecord]]          # time-ordered per track
    shapes: dict[int, dict] = field(default_factory=dict)
    backdrop: str | None = None

    def __post_init__(self):
        for tid, recs in self.tracks.items():
            frames = [r.frame_id for r in recs]
            if any(b <= a for a, b in zip(frames, frames[1:])):
                raise SchemaMismatch(f"track {tid} records not strictly increasing")

    @property
    def duration(self) -> float:
        last = max((recs[-1].frame_id for recs in self.tracks.values() if recs),
                   default=0)
        return last * self.frame_dt

    def track_ids(self) -> list[int]:
        return sorted(self.tracks)

    def lifespan(self, track_id: int) -> tuple[int, int]:
        recs = self.tracks[track_id]
        return recs[0].frame_id, recs[-1].frame_id


def _interp_records(a: StateRecord, b: StateRecord, t: float, frame_dt: float):
    ta, tb = a.frame_id * frame_dt, b.frame_id * frame_dt
    if tb <= ta:
        s = 0.0
    else:
        s = (t - ta) / (tb - ta)
    pos = a.position + s * (b.position - a.position)
    speed = a.speed + s * (b.speed - a.speed)
    dh = (b.heading - a.heading + np.pi) % (2 * np.pi) - np.pi
    heading = (a.heading + s * dh) % (2 * np.pi)
    dims = tuple(np.asarray(a.dims) + s * (np.asarray(b.dims) - np.asarray(a.dims)))
    sigma = a.sigma_pos + s * (b.sigma_pos - a.sigma_pos)
    return pos, heading, speed, dims, sigma


@dataclass
class FrameVehicle:
    track_id: int
    position: np.ndarray
    heading: float
    speed: float
    dims: tuple[float, float, float]
    vtype: str
    sigma_pos: float
    predicted_only: bool
    at_path_end: bool = False


def frame_at(scene: Scene, t: float,
             overlays: dict[int, list[StateRecord]] | None = None) -> list[FrameVehicle]:
    """Interpolated vehicle states at time t; tracks outside their lifespan
    are omitted.  `overlays` substitutes re-simulated record lists per track."""
    if t < -1e-9 or t > scene.duration + 1e-9:
        raise OutOfRange(f"t={t} outside [0, {scene.duration:.3f}]")
    out: list[FrameVehicle] = []
    for tid in scene.track_ids():
        recs = scene.tracks[tid]
        if overlays and tid in overlays:
            recs = overlays[tid]
        t0 = recs[0].frame_id * scene.frame_dt
        t1 = recs[-1].frame_id * scene.frame_dt
        if t < t0 - 1e-9 or t > t1 + 1e-9:
            continue
        frames = [r.frame_id * scene.frame_dt for r in recs]
        j = int(np.searchsorted(frames, t, side="right"))
        j = min(max(j, 1), len(recs) - 1)
        a, b = recs[j - 1], recs[j]
        pos, heading, speed, dims, sigma = _interp_records(a, b, t, scene.frame_dt)
        out.append(FrameVehicle(
            track_id=tid, position=pos, heading=heading, speed=speed,
            dims=dims, vtype=a.vtype, sigma_pos=sigma,
            predicted_only=a.predicted_only,
            at_path_end=bool(getattr(a, "_at_path_end", False))))
    return out


def resimulate(scene: Scene, edit: WhatIfEdit) -> list[StateRecord]:
    """Re-run one vehicle along its recorded polyline at a modified speed.

    Records before the edit frame are unchanged.  After it, the vehicle
    traverses the same arc-length parameterized path with each segment's
    speed scaled (or replaced by an absolute speed); it freezes at the path
    end when it arrives early.  The scene itself is never modified.
    """
    if edit.track_id not in scene.tracks:
        raise UnknownTrack(f"no track {edit.track_id}")
    recs = scene.tracks[edit.track_id]
    first, last = recs[0].frame_id, recs[-1].frame_id
    if not (first <= edit.edit_frame <= last):
        raise FrameOutOfLifespan(
            f"frame {edit.edit_frame} outside track lifespan [{first}, {last}]")

    idx = next(i for i, r in enumerate(recs) if r.frame_id >= edit.edit_frame)
    head = [r for r in recs[:idx + 1]]
    pts = np.array([r.position for r in recs[idx:]])
    times = np.array([r.frame_id * scene.frame_dt for r in recs[idx:]])
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    seg_dt = np.diff(times)

    # new traversal time per segment
    if edit.speed_scale is not None:
        k = edit.speed_scale
        new_dt = np.where(seg_dt > 0, seg_dt / k, 0.0) if k > 0 else np.full_like(seg_dt, np.inf)
        new_speed = np.where(seg_dt > 0, seg_len / seg_dt * k, 0.0)
    else:
        v = edit.speed_mps
        new_dt = seg_len / v if v > 0 else np.full_like(seg_len, np.inf)
        new_speed = np.full_like(seg_len, v)
    arrive = times[0] + np.concatenate([[0.0], np.cumsum(new_dt)])

    out: list[StateRecord] = list(head)
    template = recs[idx]
    for frame in range(edit.edit_frame + 1, last + 1):
        t = frame * scene.frame_dt
        j = int(np.searchsorted(arrive, t, side="right")) - 1
        if j >= len(seg_len) and len(seg_len) and t <= arrive[-1] + 1e-9:
            j = len(seg_len) - 1  # exactly at the path end, clamp to last segment
        if j >= len(seg_len):
            pos = pts[-1].copy()
            speed = 0.0
            heading = out[-1].heading
            at_end = True
        else:
            j = max(j, 0)
            if not np.isfinite(arrive[j + 1]):
                s = 0.0
            else:
                span = arrive[j + 1] - arrive[j]
                s = (t - arrive[j]) / span if span > 0 else 0.0
            s = min(max(s, 0.0), 1.0)
            pos = pts[j] + s * seg[j]
            speed = float(new_speed[j])
            heading = (float(np.arctan2(seg[j][1], seg[j][0])) % (2 * np.pi)
                       if seg_len[j] > 1e-12 else out[-1].heading)
            at_end = False
        base = next((r for r in recs if r.frame_id == frame), template)
        vel = speed * np.array([np.cos(heading), np.sin(heading), 0.0])
        rec = StateRecord(frame_id=frame, track_id=edit.track_id,
                          position=pos, velocity=vel, heading=heading,
                          dims=base.dims,
                          corners=_corners(pos, heading, base.dims),
                          vtype=base.vtype, predicted_only=base.predicted_only,
                          speed_raw=None, sigma_pos=base.sigma_pos)
        rec._at_path_end = at_end
        out.append(rec)
    return out


def _corners(pos, heading, dims):
    from .geom import box_corners
    return box_corners(pos, heading, dims)


# --- scene files ---------------------------------------------------------------

def save_scene(scene: Scene, path, tracks_file: str, shapes_file: str | None,
               calib_file: str | None) -> None:
    doc = {
        "version": SCENE_VERSION,
        "frame_dt": scene.frame_dt,
        "tracks_file": tracks_file,
        "shapes_file": shapes_file,
        "calib_file": calib_file,
        "backdrop": scene.backdrop,
        "map": {
            "kind": scene.map_frame.kind,
            "scale": scene.map_frame.scale,
            "anchor_px": list(scene.map_frame.anchor_px),
            "rotation": scene.map_frame.rotation,
            "geodetic_anchor": (list(scene.map_frame.geodetic_anchor)
                                if scene.map_frame.geodetic_anchor else None),
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaMismatch(f"{path}: invalid JSON ({e})")
    if doc.get("version") != SCENE_VERSION:
        raise SchemaMismatch(f"{path}: unsupported scene version {doc.get('version')}")

    def resolve(rel):
        p = Path(rel)
        return p if p.is_absolute() else path.parent / p

    if doc.get("calib_file"):
        calib_path = resolve(doc["calib_file"])
        if not calib_path.exists():
            raise MissingCalibration(f"calibration file not found: {calib_path}")
        _, map_frame, _ = load_calibration(calib_path)
    else:
        m = doc.get("map")
        if not m:
            raise MissingCalibration(f"{path}: neither calib_file nor map present")
        map_frame = MapFrame(kind=m["kind"], scale=m["scale"],
                             anchor_px=tuple(m["anchor_px"]),
                             rotation=m["rotation"],
                             geodetic_anchor=(tuple(m["geodetic_anchor"])
                                              if m.get("geodetic_anchor") else None))

    tracks: dict[int, list[StateRecord]] = {}
    if doc.get("tracks_file"):
        tracks_path = resolve(doc["tracks_file"])
        if not tracks_path.exists():
            raise SchemaMismatch(f"track file not found: {tracks_path}")
        for rec in read_records(tracks_path):
            tracks.setdefault(rec.track_id, []).append(rec)
        for recs in tracks.values():
            recs.sort(key=lambda r: r.frame_id)

    shapes: dict[int, dict] = {}
    if doc.get("shapes_file"):
        shapes_path = resolve(doc["shapes_file"])
        if shapes_path.exists():
            from .shape import read_shapes
            shapes = read_shapes(shapes_path)

    return Scene(map_frame=map_frame, frame_dt=doc["frame_dt"], tracks=tracks,
                 shapes=shapes, backdrop=doc.get("backdrop"))


# --- service --------------------------------------------------------------------

def _vehicle_payload(scene: Scene, v: FrameVehicle) -> dict:
    from .geom import box_corners

    corners = box_corners(v.position, v.heading, v.dims)[:4]
    footprint = [[float(x) for x in scene.map_frame.world_to_map(c)] for c in corners]
    map_px = scene.map_frame.world_to_map(v.position)
    return {
        "track_id": v.track_id,
        "position_m": [float(x) for x in v.position],
        "map_px": [float(map_px[0]), float(map_px[1])],
        "heading_rad": float(v.heading),
        "speed_mps": float(v.speed),
        "dims_m": [float(x) for x in v.dims],
        "type": v.vtype,
        "sigma_pos_m": float(v.sigma_pos),
        "predicted_only": bool(v.predicted_only),
        "at_path_end": bool(v.at_path_end),
        "footprint_map_px": footprint,
    }


def frame_payload(scene: Scene, t: float,
                  overlays: dict[int, list[StateRecord]] | None = None) -> dict:
    vehicles = frame_at(scene, t, overlays=overlays)
    return {"t": float(t), "vehicles": [_vehicle_payload(scene, v) for v in vehicles]}


def scene_payload(scene: Scene) -> dict:
    return {
        "version": SCENE_VERSION,
        "frame_dt": scene.frame_dt,
        "duration_s": scene.duration,
        "track_ids": scene.track_ids(),
        "backdrop": scene.backdrop,
        "map": {
            "kind": scene.map_frame.kind,
            "scale_m_per_px": scene.map_frame.scale,
            "anchor_px": list(scene.map_frame.anchor_px),
            "rotation_rad": scene.map_frame.rotation,
        },
    }


def tracks_payload(scene: Scene) -> list[dict]:
    out = []
    for tid in scene.track_ids():
        first, last = scene.lifespan(tid)
        recs = scene.tracks[tid]
        out.append({"track_id": tid, "type": recs[0].vtype,
                    "first_frame": first, "last_frame": last,
                    "duration_s": (last - first) * scene.frame_dt,
                    "mean_speed_mps": float(np.mean([r.speed for r in recs]))})
    return out


def shape_payload(scene: Scene, track_id: int) -> dict:
    if track_id not in scene.tracks:
        raise UnknownTrack(f"no track {track_id}")
    doc = {"track_id": track_id}
    shape = scene.shapes.get(track_id)
    if shape:
        doc.update({"coefficients": shape["coefficients"],
                    "provenance": shape.get("provenance", "fitted"),
                    "histogram": shape.get("histogram"),
                    "dims_m": shape.get("dims")})
    else:
        doc.update({"coefficients": None, "provenance": None,
                    "histogram": None, "dims_m": None})
    return doc


try:
    from pydantic import BaseModel as _BaseModel
except ImportError:  # pragma: no cover
    _BaseModel = object


class EditRequest(_BaseModel):
    """Wire form of a what-if edit (POST /edit)."""

    track_id: int
    edit_frame: int
    speed_scale: float | None = None
    speed_mps: float | None = None


def make_app(scene: Scene, ui_dir: str | None = None):
    """FastAPI app exposing the scene read endpoints and the session-scoped
    what-if edit overlay."""
    from fastapi import FastAPI, HTTPException
    from fastapi.middleware.cors import CORSMiddleware

    app = FastAPI(title="carom scene service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    state: dict = {"edits": {}, "overlays": {}}
    app.state.scene = scene

    @app.get("/scene")
    def get_scene():
        return scene_payload(scene)

    @app.get("/tracks")
    def get_tracks():
        return tracks_payload(scene)

    @app.get("/frame")
    def get_frame(t: float):
        try:
            return frame_payload(scene, t, overlays=state["overlays"])
        except OutOfRange as e:
            raise HTTPException(status_code=400, detail=str(e))

    @app.get("/shape/{track_id}")
    def get_shape(track_id: int):
        try:
            return shape_payload(scene, track_id)
        except UnknownTrack as e:
            raise HTTPException(status_code=404, detail=str(e))

    @app.post("/edit")
    def post_edit(req: EditRequest):
        try:
            edit = WhatIfEdit(track_id=req.track_id, edit_frame=req.edit_frame,
                              speed_scale=req.speed_scale, speed_mps=req.speed_mps)
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))
        try:
            overlay = resimulate(scene, edit)
        except UnknownTrack as e:
            raise HTTPException(status_code=404, detail=str(e))
        except FrameOutOfLifespan as e:
            raise HTTPException(status_code=400, detail=str(e))
        state["edits"][req.track_id] = edit
        state["overlays"][req.track_id] = overlay
        return {"ok": True, "track_id": req.track_id,
                "edit_frame": req.edit_frame,
                "speed_scale": req.speed_scale, "speed_mps": req.speed_mps}

    @app.delete("/edit")
    def delete_edit():
        state["edits"].clear()
        state["overlays"].clear()
        return {"ok": True}

    if ui_dir:
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def serve(scene: Scene, host: str = "127.0.0.1", port: int = 8008,
          ui_dir: str | None = None) -> None:
    import uvicorn

    uvicorn.run(make_app(scene, ui_dir=ui_dir), host=host, port=port,
                log_level="warning")
