// Canvas rendering of one frame payload: vehicle footprints rotated by
// heading, speed labels in km/h, 1-sigma uncertainty circles, selection
// highlight. The context is typed structurally so tests can pass a recorder.

import type { FramePayload, VehiclePayload } from "./types.js";
import { mapToScreen, type Viewport } from "./view.js";

export interface Canvas2D {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
  textAlign: CanvasTextAlign;
  globalAlpha: number;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  closePath(): void;
  fill(): void;
  stroke(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  fillText(text: string, x: number, y: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  clearRect(x: number, y: number, w: number, h: number): void;
  save(): void;
  restore(): void;
}

const TYPE_COLORS: Record<string, string> = {
  sedan: "#4d9de0", SUV: "#e15554", coupe: "#7768ae", convertible: "#b36a5e",
  minivan: "#3bb273", van: "#2a9d8f", "pickup-truck": "#e1bc29",
  "mini-truck": "#c57b57", "semi-truck": "#9c6644", bus: "#f4845f",
  trailer: "#8d99ae", pedestrian: "#ef6351", "two-wheelers": "#f78c6b",
  "all-terrain vehicle": "#84a59d",
};

/** Speed label per the display convention: payload m/s shown as km/h. */
export function speedLabelKmh(speedMps: number): string {
  return String(Math.round(speedMps * 3.6));
}

export function vehicleColor(vtype: string, predictedOnly: boolean): string {
  const base = TYPE_COLORS[vtype] ?? "#999999";
  return predictedOnly ? base + "88" : base;
}

/** Screen-space footprint polygon of a vehicle (closed, 4 points). */
export function footprintScreen(v: VehiclePayload, vp: Viewport): [number, number][] {
  return v.footprint_map_px.map(([mx, my]) => mapToScreen(vp, mx, my));
}

export interface RenderOptions {
  width: number;
  height: number;
  selected?: number | null;
  showUncertainty?: boolean;
}

export function renderFrame(
  ctx: Canvas2D, frame: FramePayload, vp: Viewport,
  mapScaleMPerPx: number, opts: RenderOptions,
): void {
  ctx.clearRect(0, 0, opts.width, opts.height);
  ctx.fillStyle = "#1c1f26";
  ctx.fillRect(0, 0, opts.width, opts.height);
  drawGrid(ctx, vp, mapScaleMPerPx, opts);
  for (const v of frame.vehicles) {
    drawVehicle(ctx, v, vp, mapScaleMPerPx, opts);
  }
}

function drawGrid(ctx: Canvas2D, vp: Viewport, scale: number, opts: RenderOptions): void {
  // 10 m grid in map pixels
  const stepMapPx = 10 / Math.max(scale, 1e-9);
  const stepScreen = stepMapPx * vp.zoom;
  if (stepScreen < 8) return;
  ctx.strokeStyle = "#2a2e38";
  ctx.lineWidth = 1;
  const x0 = ((vp.offsetX % stepScreen) + stepScreen) % stepScreen;
  const y0 = ((vp.offsetY % stepScreen) + stepScreen) % stepScreen;
  ctx.beginPath();
  for (let x = x0; x <= opts.width; x += stepScreen) {
    ctx.moveTo(x, 0);
    ctx.lineTo(x, opts.height);
  }
  for (let y = y0; y <= opts.height; y += stepScreen) {
    ctx.moveTo(0, y);
    ctx.lineTo(opts.width, y);
  }
  ctx.stroke();
}

function drawVehicle(
  ctx: Canvas2D, v: VehiclePayload, vp: Viewport,
  scale: number, opts: RenderOptions,
): void {
  const poly = footprintScreen(v, vp);
  if (poly.length < 3) return;
  const selected = opts.selected === v.track_id;

  ctx.beginPath();
  ctx.moveTo(poly[0][0], poly[0][1]);
  for (let i = 1; i < poly.length; i++) ctx.lineTo(poly[i][0], poly[i][1]);
  ctx.closePath();
  ctx.fillStyle = vehicleColor(v.type, v.predicted_only);
  ctx.fill();
  ctx.strokeStyle = selected ? "#ffffff" : "#11131a";
  ctx.lineWidth = selected ? 2.5 : 1;
  ctx.stroke();

  const [cx, cy] = mapToScreen(vp, v.map_px[0], v.map_px[1]);

  if (opts.showUncertainty !== false && v.sigma_pos_m > 0) {
    const rScreen = (v.sigma_pos_m / Math.max(scale, 1e-9)) * vp.zoom;
    ctx.beginPath();
    ctx.arc(cx, cy, rScreen, 0, 2 * Math.PI);
    ctx.strokeStyle = selected ? "#ffffffaa" : "#8899aa66";
    ctx.lineWidth = 1;
    ctx.stroke();
  }

  ctx.fillStyle = "#f0f3f8";
  ctx.font = "12px system-ui, sans-serif";
  ctx.textAlign = "center";
  ctx.fillText(speedLabelKmh(v.speed_mps), cx, cy - 10);
}

/** Hit test in screen space: nearest vehicle center within `radius` px. */
export function pickVehicle(
  frame: FramePayload, vp: Viewport, sx: number, sy: number, radius = 16,
): number | null {
  let best: number | null = null;
  let bestD = radius;
  for (const v of frame.vehicles) {
    const [cx, cy] = mapToScreen(vp, v.map_px[0], v.map_px[1]);
    const d = Math.hypot(cx - sx, cy - sy);
    if (d < bestD) {
      bestD = d;
      best = v.track_id;
    }
  }
  return best;
}
