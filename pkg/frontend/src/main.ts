// DOM wiring: canvas, timeline scrubber, playback controls, track selection,
// and the what-if speed edit. All scene access goes through SceneApi; an
// in-flight frame request is aborted when a newer one supersedes it.

import { ApiError, SceneApi } from "./api.js";
import { pickVehicle, renderFrame } from "./render.js";
import {
  createTimeline,
  frameForTime,
  scrubTo,
  setPlaying,
  setRate,
  tick,
  type TimelineState,
} from "./timeline.js";
import { fitBounds, panBy, zoomAt, type Viewport } from "./view.js";
import type { FramePayload, ScenePayload } from "./types.js";

const api = new SceneApi("");

interface UiState {
  scene: ScenePayload | null;
  timeline: TimelineState;
  viewport: Viewport;
  selected: number | null;
  lastFrame: FramePayload | null;
  editActive: boolean;
}

const state: UiState = {
  scene: null,
  timeline: createTimeline(0),
  viewport: { zoom: 2, offsetX: 0, offsetY: 0 },
  selected: null,
  lastFrame: null,
  editActive: false,
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const canvas = el<HTMLCanvasElement>("map");
const ctx = canvas.getContext("2d")!;
const slider = el<HTMLInputElement>("scrubber");
const playBtn = el<HTMLButtonElement>("play");
const rateSel = el<HTMLSelectElement>("rate");
const timeLabel = el<HTMLSpanElement>("time-label");
const trackLabel = el<HTMLSpanElement>("track-label");
const speedInput = el<HTMLInputElement>("edit-speed");
const applyBtn = el<HTMLButtonElement>("apply-edit");
const clearBtn = el<HTMLButtonElement>("clear-edit");
const toast = el<HTMLDivElement>("toast");

let inflight: AbortController | null = null;
let fetching = false;
let pendingTime: number | null = null;

function showToast(message: string): void {
  toast.textContent = message;
  toast.classList.add("visible");
  setTimeout(() => toast.classList.remove("visible"), 3500);
}

async function requestFrame(t: number): Promise<void> {
  if (fetching) {
    pendingTime = t;
    return;
  }
  fetching = true;
  inflight = new AbortController();
  try {
    const frame = await api.getFrame(t, inflight.signal);
    state.lastFrame = frame;
    draw();
  } catch (err) {
    if (!(err instanceof DOMException && err.name === "AbortError")) {
      showToast(err instanceof ApiError ? `server: ${err.message}` : String(err));
    }
  } finally {
    fetching = false;
    if (pendingTime !== null) {
      const next = pendingTime;
      pendingTime = null;
      void requestFrame(next);
    }
  }
}

function draw(): void {
  if (!state.scene || !state.lastFrame) return;
  renderFrame(ctx, state.lastFrame, state.viewport,
    state.scene.map.scale_m_per_px,
    {
      width: canvas.width, height: canvas.height,
      selected: state.selected, showUncertainty: true,
    });
  timeLabel.textContent =
    `${state.timeline.time.toFixed(2)} / ${state.timeline.duration.toFixed(2)} s`;
  slider.value = String(state.timeline.time);
}

function syncSelection(): void {
  trackLabel.textContent = state.selected === null
    ? "none" : `#${state.selected}`;
  applyBtn.disabled = state.selected === null;
}

async function boot(): Promise<void> {
  const scene = await api.getScene();
  state.scene = scene;
  state.timeline = createTimeline(scene.duration_s);
  slider.max = String(scene.duration_s);
  slider.step = String(scene.frame_dt);

  // fit the viewport to the first frame's footprints
  const first = await api.getFrame(0);
  state.lastFrame = first;
  const xs = first.vehicles.flatMap((v) => v.footprint_map_px.map((p) => p[0]));
  const ys = first.vehicles.flatMap((v) => v.footprint_map_px.map((p) => p[1]));
  if (xs.length) {
    state.viewport = fitBounds(canvas.width, canvas.height,
      Math.min(...xs) - 100, Math.min(...ys) - 100,
      Math.max(...xs) + 100, Math.max(...ys) + 100);
  }
  draw();
  loop();
}

let lastTs = 0;
function loop(ts = 0): void {
  const delta = lastTs ? (ts - lastTs) / 1000 : 0;
  lastTs = ts;
  const next = tick(state.timeline, delta);
  if (next.time !== state.timeline.time) {
    state.timeline = next;
    void requestFrame(state.timeline.time);
  } else {
    state.timeline = next;
  }
  requestAnimationFrame(loop);
}

playBtn.addEventListener("click", () => {
  state.timeline = setPlaying(state.timeline, !state.timeline.playing);
  playBtn.textContent = state.timeline.playing ? "Pause" : "Play";
});

rateSel.addEventListener("change", () => {
  state.timeline = setRate(state.timeline, Number(rateSel.value));
});

slider.addEventListener("input", () => {
  state.timeline = scrubTo(setPlaying(state.timeline, false), Number(slider.value));
  playBtn.textContent = "Play";
  void requestFrame(state.timeline.time);
});

canvas.addEventListener("click", (ev) => {
  if (!state.lastFrame) return;
  const rect = canvas.getBoundingClientRect();
  state.selected = pickVehicle(state.lastFrame, state.viewport,
    ev.clientX - rect.left, ev.clientY - rect.top);
  syncSelection();
  draw();
});

canvas.addEventListener("wheel", (ev) => {
  ev.preventDefault();
  const rect = canvas.getBoundingClientRect();
  state.viewport = zoomAt(state.viewport, ev.clientX - rect.left,
    ev.clientY - rect.top, ev.deltaY < 0 ? 1.15 : 1 / 1.15);
  draw();
}, { passive: false });

let dragging = false;
let dragLast: [number, number] = [0, 0];
canvas.addEventListener("mousedown", (ev) => {
  dragging = true;
  dragLast = [ev.clientX, ev.clientY];
});
window.addEventListener("mouseup", () => { dragging = false; });
window.addEventListener("mousemove", (ev) => {
  if (!dragging) return;
  state.viewport = panBy(state.viewport, ev.clientX - dragLast[0], ev.clientY - dragLast[1]);
  dragLast = [ev.clientX, ev.clientY];
  draw();
});

applyBtn.addEventListener("click", async () => {
  if (state.selected === null || !state.scene) return;
  const speed = Number(speedInput.value);
  if (!(speed >= 0)) {
    showToast("speed must be >= 0 km/h");
    return;
  }
  try {
    await api.applyEdit({
      track_id: state.selected,
      edit_frame: frameForTime(state.timeline.time, state.scene.frame_dt),
      speed_mps: speed / 3.6,
    });
    state.editActive = true;
    clearBtn.disabled = false;
    void requestFrame(state.timeline.time);
  } catch (err) {
    // stale selection or bad frame: surface the error, change nothing
    showToast(err instanceof ApiError ? `edit rejected: ${err.message}` : String(err));
  }
});

clearBtn.addEventListener("click", async () => {
  try {
    await api.clearEdit();
    state.editActive = false;
    clearBtn.disabled = true;
    void requestFrame(state.timeline.time);
  } catch (err) {
    showToast(String(err));
  }
});

boot().catch((err) => showToast(`failed to load scene: ${err}`));
