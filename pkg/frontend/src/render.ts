/**
 * Canvas compositing: nearest-neighbour upscaled scene image, optional
 * overlay (heatmaps through the fixed colormap, segmentation maps through
 * the class palette), and the in-progress mask on top.
 */
import { heatColor } from "./colormap.js";
import { ANOMALY_ID, IGNORE_ID } from "./compose.js";
import type { GrayImage, RgbImage } from "./pgm.js";
import type { OverlayKind } from "./types.js";

// anomaly pixels render black, ignore pixels mid-gray, classes get a
// stable hue wheel
export function classColor(id: number): readonly [number, number, number] {
  if (id === ANOMALY_ID) return [0, 0, 0];
  if (id === IGNORE_ID) return [128, 128, 128];
  const golden = 137.50776405003785;
  const hue = (id * golden) % 360;
  return hslToRgb(hue, 0.65, 0.55);
}

function hslToRgb(h: number, s: number, l: number): [number, number, number] {
  const c = (1 - Math.abs(2 * l - 1)) * s;
  const x = c * (1 - Math.abs(((h / 60) % 2) - 1));
  const m = l - c / 2;
  let rgb: [number, number, number];
  if (h < 60) rgb = [c, x, 0];
  else if (h < 120) rgb = [x, c, 0];
  else if (h < 180) rgb = [0, c, x];
  else if (h < 240) rgb = [0, x, c];
  else if (h < 300) rgb = [x, 0, c];
  else rgb = [c, 0, x];
  return [Math.round((rgb[0] + m) * 255), Math.round((rgb[1] + m) * 255), Math.round((rgb[2] + m) * 255)];
}

const HEAT_OVERLAYS: ReadonlySet<OverlayKind> = new Set(["eds", "mmsp", "mixed"]);

export function paintScene(
  ctx: CanvasRenderingContext2D,
  scene: RgbImage,
  overlay: GrayImage | null,
  overlayKind: OverlayKind | null,
  opacity: number,
  mask: Uint8Array | null,
  scale: number,
): void {
  const { width, height } = scene;
  const img = ctx.createImageData(width * scale, height * scale);
  for (let y = 0; y < height * scale; y++) {
    const sy = Math.floor(y / scale);
    for (let x = 0; x < width * scale; x++) {
      const sx = Math.floor(x / scale);
      const src = sy * width + sx;
      let r = scene.data[src * 3];
      let g = scene.data[src * 3 + 1];
      let b = scene.data[src * 3 + 2];
      if (overlay && overlayKind) {
        const v = overlay.data[src];
        const [or_, og, ob] = HEAT_OVERLAYS.has(overlayKind) ? heatColor(v) : classColor(v);
        r = Math.round(r * (1 - opacity) + or_ * opacity);
        g = Math.round(g * (1 - opacity) + og * opacity);
        b = Math.round(b * (1 - opacity) + ob * opacity);
      }
      if (mask && mask[src]) {
        // painted region pops in saturated red with a steady pulse-free tint
        r = Math.round(r * 0.35 + 255 * 0.65);
        g = Math.round(g * 0.35);
        b = Math.round(b * 0.35);
      }
      const dst = (y * width * scale + x) * 4;
      img.data[dst] = r;
      img.data[dst + 1] = g;
      img.data[dst + 2] = b;
      img.data[dst + 3] = 255;
    }
  }
  ctx.putImageData(img, 0, 0);
}
