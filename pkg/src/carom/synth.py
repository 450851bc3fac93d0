"""Synthetic scenario generator and evaluation harness.

Vehicles are cuboids following timed waypoints on flat ground.  Each frame
renders exact silhouette polygons (convex hull of the projected corners),
2D boxes, and sparse flow from material body points projected at consecutive
instants, with optional boundary dilation, flow jitter, dropout, and
wheel-point outliers.  Everything is deterministic for a fixed seed.

Evaluation follows CLEAR-style multi-object tracking accounting with a
ground-plane distance gate, plus mean location/velocity differences binned
by camera distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from shapely.geometry import Polygon as ShapelyPolygon
from shapely.geometry import box as shapely_box
from shapely.ops import unary_union

from .calib import CameraModel, MapFrame, _horizon_from_projection, ground_transform_from_camera
from .errors import FrameMismatch, VehicleOffMap
from .geom import FlowVectorSet, box_corners, convex_hull
from .track import DetectionRecord, StateRecord

DEFAULT_IMAGE_SIZE = (1280, 720)


@dataclass
class CameraSpec:
    position: tuple[float, float, float] = (0.0, 0.0, 12.0)
    yaw_deg: float = 0.0
    pitch_down_deg: float = 12.0
    focal_px: float = 1000.0
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE
    fps: float = 30.0

    def projection(self) -> np.ndarray:
        yaw = np.radians(self.yaw_deg)
        pitch = np.radians(self.pitch_down_deg)
        fwd = np.array([np.cos(yaw) * np.cos(pitch),
                        np.sin(yaw) * np.cos(pitch),
                        -np.sin(pitch)])
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        w, h = self.image_size
        k = np.array([[self.focal_px, 0, w / 2.0],
                      [0, self.focal_px, h / 2.0],
                      [0, 0, 1.0]])
        t = -rot @ np.asarray(self.position, dtype=float)
        p = k @ np.hstack([rot, t[:, None]])
        return p / np.linalg.norm(p[2, :3])

    def camera_model(self) -> CameraModel:
        p = self.projection()
        return CameraModel(projection=p,
                           ground_homography=np.linalg.inv(p[:, [0, 1, 3]]),
                           horizon=_horizon_from_projection(p),
                           image_size=tuple(self.image_size))


@dataclass
class VehicleSpec:
    vtype: str
    dims: tuple[float, float, float]
    waypoints: list[tuple[float, float, float]]   # (t s, x m, y m)

    def lifespan(self) -> tuple[float, float]:
        return self.waypoints[0][0], self.waypoints[-1][0]

    def state_at(self, t: float):
        """(position xy, heading, speed) at time t; None outside the lifespan."""
        wp = self.waypoints
        if t < wp[0][0] - 1e-9 or t > wp[-1][0] + 1e-9:
            return None
        for i in range(len(wp) - 1):
            t0, x0, y0 = wp[i]
            t1, x1, y1 = wp[i + 1]
            if t <= t1 + 1e-12 or i == len(wp) - 2:
                if t1 <= t0:
                    continue
                s = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
                pos = np.array([x0 + s * (x1 - x0), y0 + s * (y1 - y0)])
                seg = np.array([x1 - x0, y1 - y0])
                seg_len = np.linalg.norm(seg)
                speed = seg_len / (t1 - t0)
                heading = float(np.arctan2(seg[1], seg[0])) if seg_len > 1e-9 else 0.0
                return pos, heading % (2 * np.pi), speed
        return None


@dataclass
class NoiseSpec:
    mask_dilation_px: float = 0.0
    flow_jitter_px: float = 0.0
    dropout_prob: float = 0.0


@dataclass
class Scenario:
    camera: CameraSpec = field(default_factory=CameraSpec)
    vehicles: list[VehicleSpec] = field(default_factory=list)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    n_frames: int = 300
    n_flow_points: int = 24
    n_wheel_outliers: int = 0
    flow_band_frac: float = 0.15     # body feature height band, fraction of height
    map_extent: tuple[float, float, float, float] | None = None  # x0 y0 x1 y1

    def to_dict(self) -> dict:
        return {
            "camera": {
                "position": list(self.camera.position),
                "yaw_deg": self.camera.yaw_deg,
                "pitch_down_deg": self.camera.pitch_down_deg,
                "focal_px": self.camera.focal_px,
                "image_size": list(self.camera.image_size),
                "fps": self.camera.fps,
            },
            "vehicles": [{"type": v.vtype, "dims": list(v.dims),
                          "waypoints": [list(w) for w in v.waypoints]}
                         for v in self.vehicles],
            "noise": {"mask_dilation_px": self.noise.mask_dilation_px,
                      "flow_jitter_px": self.noise.flow_jitter_px,
                      "dropout_prob": self.noise.dropout_prob},
            "seed": self.seed,
            "n_frames": self.n_frames,
            "n_flow_points": self.n_flow_points,
            "n_wheel_outliers": self.n_wheel_outliers,
            "flow_band_frac": self.flow_band_frac,
            "map_extent": list(self.map_extent) if self.map_extent else None,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        cam = doc.get("camera", {})
        camera = CameraSpec(position=tuple(cam.get("position", (0, 0, 12))),
                            yaw_deg=cam.get("yaw_deg", 0.0),
                            pitch_down_deg=cam.get("pitch_down_deg", 12.0),
                            focal_px=cam.get("focal_px", 1000.0),
                            image_size=tuple(cam.get("image_size", DEFAULT_IMAGE_SIZE)),
                            fps=cam.get("fps", 30.0))
        vehicles = [VehicleSpec(vtype=v["type"], dims=tuple(v["dims"]),
                                waypoints=[tuple(w) for w in v["waypoints"]])
                    for v in doc.get("vehicles", [])]
        noise = NoiseSpec(**doc.get("noise", {}))
        return cls(camera=camera, vehicles=vehicles, noise=noise,
                   seed=doc.get("seed", 0), n_frames=doc.get("n_frames", 300),
                   n_flow_points=doc.get("n_flow_points", 24),
                   n_wheel_outliers=doc.get("n_wheel_outliers", 0),
                   flow_band_frac=doc.get("flow_band_frac", 0.15),
                   map_extent=tuple(doc["map_extent"]) if doc.get("map_extent") else None)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class TruthRecord:
    """Ground-truth vehicle state plus bookkeeping for the metrics harness."""

    frame_id: int
    vehicle_id: int
    position: np.ndarray
    velocity: np.ndarray
    heading: float
    dims: tuple[float, float, float]
    vtype: str
    cam_distance: float
    visible_frac: float = 1.0
    detected: bool = True

    def to_json_dict(self) -> dict:
        return {"frame": self.frame_id, "vehicle": self.vehicle_id,
                "position": [float(v) for v in self.position],
                "velocity": [float(v) for v in self.velocity],
                "heading": float(self.heading),
                "dims": [float(v) for v in self.dims], "type": self.vtype,
                "cam_distance": float(self.cam_distance),
                "visible_frac": float(self.visible_frac),
                "detected": bool(self.detected)}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TruthRecord":
        return cls(frame_id=int(doc["frame"]), vehicle_id=int(doc["vehicle"]),
                   position=np.asarray(doc["position"], dtype=float),
                   velocity=np.asarray(doc["velocity"], dtype=float),
                   heading=float(doc["heading"]), dims=tuple(doc["dims"]),
                   vtype=doc["type"], cam_distance=float(doc["cam_distance"]),
                   visible_frac=float(doc.get("visible_frac", 1.0)),
                   detected=bool(doc.get("detected", True)))


def _body_points(rng, n, dims, band_frac):
    """Material feature points on the lower band of the four side faces."""
    length, width, height = dims
    zmax = band_frac * height
    pts = []
    for _ in range(n):
        face = rng.integers(0, 4)
        z = rng.uniform(0.02, max(zmax, 0.03))
        if face == 0:    # left side
            pts.append([rng.uniform(-length / 2, length / 2), width / 2, z])
        elif face == 1:  # right side
            pts.append([rng.uniform(-length / 2, length / 2), -width / 2, z])
        elif face == 2:  # front
            pts.append([length / 2, rng.uniform(-width / 2, width / 2), z])
        else:            # rear
            pts.append([-length / 2, rng.uniform(-width / 2, width / 2), z])
    return np.array(pts)


def _wheel_points(rng, n, dims):
    length, width, height = dims
    hub_z = 0.12 * height
    hubs = np.array([[0.35 * length, 0.5 * width, hub_z],
                     [0.35 * length, -0.5 * width, hub_z],
                     [-0.35 * length, 0.5 * width, hub_z],
                     [-0.35 * length, -0.5 * width, hub_z]])
    return hubs[rng.integers(0, 4, size=n)]


def _pose_matrix(pos_xy, heading):
    c, s = np.cos(heading), np.sin(heading)
    r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    t = np.array([pos_xy[0], pos_xy[1], 0.0])
    return r, t


def generate(scenario: Scenario) -> tuple[list[DetectionRecord], list[TruthRecord]]:
    """Render the scenario to a detection stream and a ground-truth stream."""
    rng = np.random.default_rng(scenario.seed)
    cam = scenario.camera.camera_model()
    cam_pos = np.asarray(scenario.camera.position, dtype=float)
    w, h = scenario.camera.image_size
    img_box = shapely_box(0, 0, w - 1, h - 1)
    dt = 1.0 / scenario.camera.fps

    if scenario.map_extent is not None:
        x0, y0, x1, y1 = scenario.map_extent
        for v in scenario.vehicles:
            for _, x, y in v.waypoints:
                if not (x0 <= x <= x1 and y0 <= y <= y1):
                    raise VehicleOffMap(
                        f"waypoint ({x}, {y}) outside map extent {scenario.map_extent}")

    detections: list[DetectionRecord] = []
    truths: list[TruthRecord] = []
    for k in range(scenario.n_frames):
        t_now = k * dt
        rendered = []
        for vid, veh in enumerate(scenario.vehicles):
            st = veh.state_at(t_now)
            if st is None:
                continue
            pos, heading, speed = st
            center = np.array([pos[0], pos[1], 0.0])
            corners = box_corners(center, heading, veh.dims)
            if (cam.depths(corners) <= 0.1).any():
                continue
            proj = cam.project(corners)
            sil = convex_hull(proj)
            if len(sil) < 3:
                continue
            poly = ShapelyPolygon(sil).intersection(img_box)
            if poly.is_empty or poly.area < 50.0:
                continue
            depth = float(np.linalg.norm(center - cam_pos))
            rendered.append({"vid": vid, "veh": veh, "pos": pos, "heading": heading,
                             "speed": speed, "center": center, "poly": poly,
                             "sil": sil, "depth": depth})

        # visibility: fraction hidden by strictly nearer vehicles
        for item in rendered:
            nearer = [o["poly"] for o in rendered
                      if o is not item and o["depth"] < item["depth"]]
            if nearer:
                hidden = item["poly"].intersection(unary_union(nearer)).area
                item["visible"] = 1.0 - hidden / max(item["poly"].area, 1e-9)
            else:
                item["visible"] = 1.0

        instance = 0
        for item in sorted(rendered, key=lambda it: it["vid"]):
            veh: VehicleSpec = item["veh"]
            vid = item["vid"]
            detected = item["visible"] >= 0.2
            if detected and scenario.noise.dropout_prob > 0:
                detected = rng.uniform() >= scenario.noise.dropout_prob
            vel = item["speed"] * np.array([np.cos(item["heading"]),
                                            np.sin(item["heading"]), 0.0])
            truths.append(TruthRecord(
                frame_id=k, vehicle_id=vid, position=item["center"],
                velocity=vel, heading=item["heading"], dims=veh.dims,
                vtype=veh.vtype, cam_distance=item["depth"],
                visible_frac=float(item["visible"]), detected=bool(detected)))
            if not detected:
                continue

            mask = np.asarray(item["poly"].exterior.coords[:-1], dtype=float)
            if scenario.noise.mask_dilation_px > 0:
                centroid = mask.mean(axis=0)
                out = mask - centroid
                nrm = np.linalg.norm(out, axis=1, keepdims=True)
                out = out / np.maximum(nrm, 1e-9)
                grow = np.abs(rng.normal(0, scenario.noise.mask_dilation_px,
                                         (len(mask), 1)))
                mask = mask + out * grow
            bx0, by0 = mask.min(axis=0)
            bx1, by1 = mask.max(axis=0)

            prev_st = veh.state_at(t_now - dt) if k > 0 else None
            if prev_st is not None:
                body = _body_points(rng, scenario.n_flow_points, veh.dims,
                                    scenario.flow_band_frac)
                if scenario.n_wheel_outliers > 0:
                    body = np.vstack([body, _wheel_points(
                        rng, scenario.n_wheel_outliers, veh.dims)])
                r0, t0 = _pose_matrix(prev_st[0], prev_st[1])
                r1, t1 = _pose_matrix(item["pos"], item["heading"])
                world_prev = body @ r0.T + t0
                world_cur = body @ r1.T + t1
                p_prev = cam.project(world_prev)
                p_cur = cam.project(world_cur)
                if scenario.n_wheel_outliers > 0:
                    n_out = scenario.n_wheel_outliers
                    ang = rng.uniform(0, 2 * np.pi, n_out)
                    mag = np.linalg.norm(p_cur[:-n_out] - p_prev[:-n_out],
                                         axis=1).mean() if len(body) > n_out else 3.0
                    p_cur[-n_out:] = p_prev[-n_out:] + mag * np.stack(
                        [np.cos(ang), np.sin(ang)], axis=1)
                if scenario.noise.flow_jitter_px > 0:
                    p_cur = p_cur + rng.normal(0, scenario.noise.flow_jitter_px,
                                               p_cur.shape)
                flow = FlowVectorSet(prev=p_prev, cur=p_cur)
            else:
                flow = FlowVectorSet(prev=np.zeros((0, 2)), cur=np.zeros((0, 2)))

            detections.append(DetectionRecord(
                frame_id=k, instance_id=instance, mask=mask,
                box2d=(float(bx0), float(by0), float(bx1), float(by1)),
                flow=flow, vtype=veh.vtype, score=1.0))
            instance += 1
    return detections, truths


def write_truth(path, truths) -> None:
    with open(path, "w") as f:
        for tr in truths:
            f.write(json.dumps(tr.to_json_dict(), separators=(",", ":")) + "\n")


def read_truth(path) -> list[TruthRecord]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(TruthRecord.from_json_dict(json.loads(line)))
    return out


# --- CLEAR-style evaluation ---------------------------------------------------

@dataclass
class MetricsReport:
    mota: float
    moda: float
    mme: int
    fp: int
    fn: int
    n_objects: int
    n_images: int
    n_vehicles: int
    n_ide: int
    n_to: int
    n_po: int
    mt: int
    ml: int
    l_diff: float
    v_diff: float
    l_diff_bins: dict[str, float]
    v_diff_bins: dict[str, float]
    matches: int = 0

    def to_dict(self) -> dict:
        return {
            "MOTA": self.mota, "MODA": self.moda, "MME": self.mme,
            "FP": self.fp, "FN": self.fn, "n_objects": self.n_objects,
            "n_images": self.n_images, "n_vehicles": self.n_vehicles,
            "n_IDE": self.n_ide, "n_TO": self.n_to, "n_PO": self.n_po,
            "MT": self.mt, "ML": self.ml,
            "L_diff_m": self.l_diff, "V_diff_mps": self.v_diff,
            "L_diff_bins_m": self.l_diff_bins, "V_diff_bins_mps": self.v_diff_bins,
            "matches": self.matches,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def format_table(self) -> str:
        rows = [
            ("MOTA", f"{self.mota:.1%}"), ("MODA", f"{self.moda:.1%}"),
            ("MME", self.mme), ("FP", self.fp), ("FN", self.fn),
            ("#Objects", self.n_objects), ("#Images", self.n_images),
            ("#Vehicles", self.n_vehicles), ("#IDE", self.n_ide),
            ("#TO", self.n_to), ("#PO", self.n_po),
            ("MT", self.mt), ("ML", self.ml),
            ("L-Diff (m)", f"{self.l_diff:.3f}"),
            ("V-Diff (m/s)", f"{self.v_diff:.3f}"),
        ]
        head = " | ".join(f"{name}" for name, _ in rows)
        vals = " | ".join(f"{val}" for _, val in rows)
        lines = [head, "-" * len(head), vals, ""]
        lines.append("L-Diff by camera distance: " + ", ".join(
            f"{k}: {v:.3f} m" for k, v in self.l_diff_bins.items()))
        lines.append("V-Diff by camera distance: " + ", ".join(
            f"{k}: {v:.3f} m/s" for k, v in self.v_diff_bins.items()))
        return "\n".join(lines)


def evaluate(pred: list[StateRecord], truth: list[TruthRecord],
             dist_gate_m: float = 2.0,
             range_bins_m: tuple[float, ...] = (50.0, 120.0),
             mt_threshold: float = 0.8, ml_threshold: float = 0.2,
             occlusion_hidden: float = 0.8) -> MetricsReport:
    """CLEAR-style accounting with a ground-plane distance gate.

    Matching per frame keeps carried-over pairs that are still within the
    gate, then optimally assigns the rest by ground distance.
    """
    truth_frames = {t.frame_id for t in truth}
    if not truth_frames:
        raise FrameMismatch("empty ground truth")
    lo, hi = min(truth_frames), max(truth_frames)
    pred_frames = {p.frame_id for p in pred}
    outside = sorted(f for f in pred_frames if f < lo or f > hi)
    if outside:
        raise FrameMismatch(
            f"prediction frames outside the truth range [{lo}, {hi}]: {outside[:5]}")

    by_frame_truth: dict[int, list[TruthRecord]] = {}
    for t in truth:
        by_frame_truth.setdefault(t.frame_id, []).append(t)
    by_frame_pred: dict[int, list[StateRecord]] = {}
    for p in pred:
        by_frame_pred.setdefault(p.frame_id, []).append(p)
    eval_frames = sorted(truth_frames | pred_frames)

    last_match: dict[int, int] = {}          # vehicle_id -> track_id
    mismatch_vehicles: set[int] = set()
    matched_frames: dict[int, int] = {}      # vehicle_id -> n matched frames
    lifespan: dict[int, int] = {}
    fp = fn = mme = 0
    n_objects = 0
    l_diffs: list[tuple[float, float]] = []  # (cam_distance, err)
    v_diffs: list[tuple[float, float]] = []

    for frame_id in eval_frames:
        gts = by_frame_truth.get(frame_id, [])
        prs = by_frame_pred.get(frame_id, [])
        n_objects += len(gts)
        for g in gts:
            lifespan[g.vehicle_id] = lifespan.get(g.vehicle_id, 0) + 1
        gt_left = list(range(len(gts)))
        pr_left = list(range(len(prs)))
        pairs: list[tuple[int, int]] = []

        # keep carried-over matches still within the gate
        for gi in list(gt_left):
            g = gts[gi]
            tid = last_match.get(g.vehicle_id)
            if tid is None:
                continue
            for pi in pr_left:
                if prs[pi].track_id == tid:
                    d = np.linalg.norm(prs[pi].position[:2] - g.position[:2])
                    if d <= dist_gate_m:
                        pairs.append((gi, pi))
                        gt_left.remove(gi)
                        pr_left.remove(pi)
                    break

        if gt_left and pr_left:
            cost = np.zeros((len(gt_left), len(pr_left)))
            for a, gi in enumerate(gt_left):
                for b, pi in enumerate(pr_left):
                    cost[a, b] = np.linalg.norm(
                        prs[pi].position[:2] - gts[gi].position[:2])
            rows, cols = linear_sum_assignment(cost)
            for a, b in zip(rows, cols):
                if cost[a, b] <= dist_gate_m:
                    pairs.append((gt_left[a], pr_left[b]))
            for gi, pi in pairs:
                if gi in gt_left:
                    gt_left.remove(gi)
                if pi in pr_left:
                    pr_left.remove(pi)

        for gi, pi in pairs:
            g, p = gts[gi], prs[pi]
            prev = last_match.get(g.vehicle_id)
            if prev is not None and prev != p.track_id:
                mme += 1
                mismatch_vehicles.add(g.vehicle_id)
            last_match[g.vehicle_id] = p.track_id
            matched_frames[g.vehicle_id] = matched_frames.get(g.vehicle_id, 0) + 1
            l_err = float(np.linalg.norm(p.position[:2] - g.position[:2]))
            v_err = float(abs(np.linalg.norm(p.velocity) - np.linalg.norm(g.velocity)))
            l_diffs.append((g.cam_distance, l_err))
            v_diffs.append((g.cam_distance, v_err))
        fn += len(gt_left)
        fp += len(pr_left)

    n_images = hi - lo + 1
    vehicles = sorted(lifespan)
    mt = ml = 0
    for vid in vehicles:
        frac = matched_frames.get(vid, 0) / lifespan[vid]
        if frac > mt_threshold:
            mt += 1
        elif frac < ml_threshold:
            ml += 1

    # occlusion counts from ground-truth visibility
    worst_visibility: dict[int, float] = {}
    for t in truth:
        cur = worst_visibility.get(t.vehicle_id, 1.0)
        worst_visibility[t.vehicle_id] = min(cur, t.visible_frac)
    n_to = sum(1 for v in worst_visibility.values() if 1.0 - v > occlusion_hidden)
    n_po = sum(1 for v in worst_visibility.values()
               if 0.0 < 1.0 - v <= occlusion_hidden)

    def _bin_means(samples):
        out = {}
        edges = [0.0, *range_bins_m]
        for lo, hi in zip(edges[:-1], edges[1:]):
            vals = [e for d, e in samples if lo < d <= hi]
            out[f"<={hi:.0f}m"] = float(np.mean(vals)) if vals else float("nan")
        return out

    mota = 1.0 - (fn + fp + mme) / n_objects if n_objects else 1.0
    moda = 1.0 - (fn + fp) / n_objects if n_objects else 1.0
    return MetricsReport(
        mota=mota, moda=moda, mme=mme, fp=fp, fn=fn,
        n_objects=n_objects, n_images=n_images, n_vehicles=len(vehicles),
        n_ide=len(mismatch_vehicles), n_to=n_to, n_po=n_po, mt=mt, ml=ml,
        l_diff=float(np.mean([e for _, e in l_diffs])) if l_diffs else float("nan"),
        v_diff=float(np.mean([e for _, e in v_diffs])) if v_diffs else float("nan"),
        l_diff_bins=_bin_means(l_diffs), v_diff_bins=_bin_means(v_diffs),
        matches=len(l_diffs))


def scenario_map_frame(scenario: Scenario) -> MapFrame:
    """Planar map frame for a synthetic scenario (0.1 m/px, origin anchor)."""
    return MapFrame(kind="planar", scale=0.1, anchor_px=(0.0, 0.0), rotation=0.0)


def scenario_transform(scenario: Scenario):
    return ground_transform_from_camera(scenario.camera.camera_model())
