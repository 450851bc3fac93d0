// Wire payloads of the scene service. Field names and units mirror the
// server: meters, meters/second, radians, seconds; map coordinates in px.

export interface ScenePayload {
  version: number;
  frame_dt: number;
  duration_s: number;
  track_ids: number[];
  backdrop: string | null;
  map: {
    kind: string;
    scale_m_per_px: number;
    anchor_px: [number, number];
    rotation_rad: number;
  };
}

export interface VehiclePayload {
  track_id: number;
  position_m: [number, number, number];
  map_px: [number, number];
  heading_rad: number;
  speed_mps: number;
  dims_m: [number, number, number];
  type: string;
  sigma_pos_m: number;
  predicted_only: boolean;
  at_path_end: boolean;
  footprint_map_px: [number, number][];
}

export interface FramePayload {
  t: number;
  vehicles: VehiclePayload[];
}

export interface TrackSummary {
  track_id: number;
  type: string;
  first_frame: number;
  last_frame: number;
  duration_s: number;
  mean_speed_mps: number;
}

export interface EditRequest {
  track_id: number;
  edit_frame: number;
  speed_scale?: number | null;
  speed_mps?: number | null;
}
