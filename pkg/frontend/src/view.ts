// Viewport transform between map pixels and screen pixels: uniform zoom,
// pan offset. Pure math, no DOM.

export interface Viewport {
  zoom: number;       // screen px per map px
  offsetX: number;    // screen position of map (0, 0)
  offsetY: number;
}

export function mapToScreen(v: Viewport, mx: number, my: number): [number, number] {
  return [v.offsetX + mx * v.zoom, v.offsetY + my * v.zoom];
}

export function screenToMap(v: Viewport, sx: number, sy: number): [number, number] {
  return [(sx - v.offsetX) / v.zoom, (sy - v.offsetY) / v.zoom];
}

export function panBy(v: Viewport, dx: number, dy: number): Viewport {
  return { ...v, offsetX: v.offsetX + dx, offsetY: v.offsetY + dy };
}

/** Zoom about a fixed screen point so the map point under the cursor stays put. */
export function zoomAt(v: Viewport, sx: number, sy: number, factor: number): Viewport {
  const zoom = Math.min(Math.max(v.zoom * factor, 0.05), 200);
  const [mx, my] = screenToMap(v, sx, sy);
  return { zoom, offsetX: sx - mx * zoom, offsetY: sy - my * zoom };
}

/** Viewport fitting a map-pixel bounding box into a screen with padding. */
export function fitBounds(
  width: number, height: number,
  minX: number, minY: number, maxX: number, maxY: number,
  padding = 24,
): Viewport {
  const spanX = Math.max(maxX - minX, 1e-9);
  const spanY = Math.max(maxY - minY, 1e-9);
  const zoom = Math.min(
    (width - 2 * padding) / spanX,
    (height - 2 * padding) / spanY,
  );
  return {
    zoom,
    offsetX: (width - spanX * zoom) / 2 - minX * zoom,
    offsetY: (height - spanY * zoom) / 2 - minY * zoom,
  };
}
