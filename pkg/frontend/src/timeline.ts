// Playback state machine: play/pause, rate, scrubbing. Pure logic; the
// animation loop lives in main.ts and just calls tick() with wall-clock
// deltas.

export interface TimelineState {
  time: number;        // current scene time, s
  duration: number;    // scene duration, s
  playing: boolean;
  rate: number;        // playback rate multiplier, > 0
  looping: boolean;
}

export function createTimeline(duration: number): TimelineState {
  return { time: 0, duration, playing: false, rate: 1.0, looping: true };
}

export function clampTime(s: TimelineState, t: number): number {
  return Math.min(Math.max(t, 0), s.duration);
}

export function tick(s: TimelineState, wallDeltaS: number): TimelineState {
  if (!s.playing || s.duration <= 0) return s;
  let t = s.time + wallDeltaS * s.rate;
  if (t > s.duration) {
    t = s.looping ? t % s.duration : s.duration;
  }
  return { ...s, time: t, playing: s.looping || t < s.duration };
}

export function scrubTo(s: TimelineState, t: number): TimelineState {
  return { ...s, time: clampTime(s, t) };
}

export function setPlaying(s: TimelineState, playing: boolean): TimelineState {
  return { ...s, playing };
}

export function setRate(s: TimelineState, rate: number): TimelineState {
  if (!(rate > 0)) throw new Error("playback rate must be positive");
  return { ...s, rate };
}

/** Frame index shown for a scene time (for the edit request). */
export function frameForTime(t: number, frameDt: number): number {
  return Math.max(Math.round(t / frameDt), 0);
}
