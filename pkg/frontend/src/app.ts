/**
 * Console wiring: scene browsing, overlay switching, the lambda slider
 * (recomposed client-side, no server round trip), mask painting, shot
 * submission, and triggering incremental learning.
 */
import * as api from "./api.js";
import { composeOpenSet, countAnomalous } from "./compose.js";
import { b64ToBytes, bytesToB64, decodePgm, decodePpm, encodePgm } from "./pgm.js";
import type { GrayImage, RgbImage } from "./pgm.js";
import { paintScene } from "./render.js";
import {
  ViewState,
  addPendingShot,
  canRunIncremental,
  canSubmitShot,
  clearMask,
  initialState,
  maskPixelCount,
  nextShotIndex,
} from "./state.js";
import type { InferPayload, OverlayKind, ServiceStateInfo } from "./types.js";

const SCALE = 12;
const BASE = "";

interface Loaded {
  scene: RgbImage;
  label: GrayImage;
  infer: InferPayload;
  maps: Record<OverlayKind, GrayImage>;
}

let state: ViewState;
let loaded: Loaded | null = null;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function banner(message: string, kind: "error" | "info" = "error"): void {
  const box = el<HTMLDivElement>("banner");
  box.textContent = message;
  box.className = `banner ${kind}`;
  box.style.display = message ? "block" : "none";
}

function decodeMaps(infer: InferPayload): Record<OverlayKind, GrayImage> {
  const out = {} as Record<OverlayKind, GrayImage>;
  for (const key of ["closeset", "eds", "mmsp", "mixed", "openset"] as OverlayKind[]) {
    out[key] = decodePgm(b64ToBytes(infer.maps_pgm_b64[key]));
  }
  return out;
}

/** The slider recomposition: identical integer rule to the server's. */
function currentOpenSet(): GrayImage {
  if (!loaded) throw new Error("nothing loaded");
  const { closeset, mixed } = loaded.maps;
  return {
    width: closeset.width,
    height: closeset.height,
    data: composeOpenSet(closeset.data, mixed.data, state.lambdaOut),
  };
}

function redraw(): void {
  if (!loaded) return;
  const canvas = el<HTMLCanvasElement>("view");
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("canvas 2d context unavailable");
  const overlay = state.overlay === "openset" ? currentOpenSet() : loaded.maps[state.overlay];
  paintScene(ctx, loaded.scene, overlay, state.overlay, state.overlayOpacity, state.mask, SCALE);
  el<HTMLSpanElement>("anomaly-count").textContent =
    state.overlay === "openset" ? `${countAnomalous(overlay.data)} px flagged` : "";
  el<HTMLButtonElement>("add-shot").disabled = !canSubmitShot(state);
  el<HTMLButtonElement>("run-incremental").disabled = !canRunIncremental(state);
  el<HTMLSpanElement>("mask-count").textContent = `${maskPixelCount(state)} px painted`;
}

function renderLegend(entries: InferPayload["legend"]): void {
  const list = el<HTMLUListElement>("legend");
  list.innerHTML = "";
  for (const entry of entries) {
    const item = document.createElement("li");
    item.textContent = `${entry.id}: ${entry.name}${entry.novel ? " (novel)" : ""}`;
    list.appendChild(item);
  }
}

function renderShots(): void {
  const list = el<HTMLUListElement>("shots");
  list.innerHTML = "";
  for (const shot of state.pendingShots) {
    const item = document.createElement("li");
    item.textContent = `shot ${shot.shotIndex}: ${shot.imageRef} (${shot.pixels} px)`;
    list.appendChild(item);
  }
  el<HTMLSpanElement>("shot-count").textContent =
    `${state.pendingShots.length}/${state.maxShots}`;
}

async function loadScene(): Promise<void> {
  try {
    banner("");
    const [scenePayload, inferPayload] = await Promise.all([
      api.getScene(BASE, state.split, state.sceneIndex),
      api.postInfer(BASE, state.split, state.sceneIndex),
    ]);
    const scene = decodePpm(b64ToBytes(scenePayload.image_ppm_b64));
    const label = decodePgm(b64ToBytes(scenePayload.label_pgm_b64));
    loaded = { scene, label, infer: inferPayload, maps: decodeMaps(inferPayload) };
    if (state.mask.length !== scene.width * scene.height) {
      state.mask = new Uint8Array(scene.width * scene.height);
      state.maskWidth = scene.width;
      state.maskHeight = scene.height;
    }
    const canvas = el<HTMLCanvasElement>("view");
    canvas.width = scene.width * SCALE;
    canvas.height = scene.height * SCALE;
    el<HTMLSpanElement>("scene-label").textContent = `${state.split}/${state.sceneIndex}`;
    renderLegend(inferPayload.legend);
    redraw();
  } catch (err) {
    loaded = null;
    banner(`failed to load scene: ${err instanceof Error ? err.message : err}`);
  }
}

function canvasToPixel(event: MouseEvent): { x: number; y: number } {
  const canvas = el<HTMLCanvasElement>("view");
  const rect = canvas.getBoundingClientRect();
  return {
    x: ((event.clientX - rect.left) / rect.width) * state.maskWidth,
    y: ((event.clientY - rect.top) / rect.height) * state.maskHeight,
  };
}

async function submitShot(): Promise<void> {
  if (!canSubmitShot(state)) return;
  const mask = new Uint8Array(state.mask.length);
  for (let i = 0; i < mask.length; i++) mask[i] = state.mask[i] ? 255 : 0;
  const pgm = encodePgm({ width: state.maskWidth, height: state.maskHeight, data: mask });
  const shotIndex = nextShotIndex(state);
  const imageRef = `${state.split}/${state.sceneIndex}`;
  try {
    const resp = await api.postAnnotation(
      BASE, imageRef, state.className.trim(), shotIndex, bytesToB64(pgm));
    addPendingShot(state, {
      shotIndex,
      imageRef,
      pixels: maskPixelCount(state),
      serverRef: resp.stored,
    });
    clearMask(state);
    renderShots();
    redraw();
    banner(`stored ${resp.stored}`, "info");
  } catch (err) {
    if (err instanceof api.ApiError && err.status === 400) {
      banner(`annotation rejected: ${err.detail}`);
    } else {
      banner(`upload failed: ${err instanceof Error ? err.message : err}`);
    }
  }
}

async function runIncremental(): Promise<void> {
  if (!canRunIncremental(state)) return;
  const button = el<HTMLButtonElement>("run-incremental");
  button.disabled = true;
  try {
    await api.postIncremental(
      BASE, state.mode, state.className.trim(),
      state.pendingShots.map((s) => s.serverRef));
    state.pendingShots = [];
    renderShots();
    banner(`learned ${state.className} via ${state.mode}`, "info");
    await refreshState();
    await loadScene();
  } catch (err) {
    if (err instanceof api.ApiError && err.status === 409) {
      banner("another incremental run is in flight; try again in a moment");
    } else {
      banner(`incremental failed: ${err instanceof Error ? err.message : err}`);
    }
  } finally {
    button.disabled = false;
  }
}

async function refreshState(): Promise<ServiceStateInfo> {
  const info = await api.getState(BASE);
  el<HTMLSpanElement>("model-info").textContent =
    `${info.heads} head(s), ${info.novel_classes} novel, params ${info.params_digest.slice(0, 10)}`;
  state.maxShots = info.max_shots;
  if (state.lambdaOut === -1) {
    state.lambdaOut = info.lambda_out;
    el<HTMLInputElement>("lambda").value = String(info.lambda_out);
  }
  return info;
}

export async function boot(): Promise<void> {
  const info = await api.getState(BASE);
  state = initialState(info.image_size, info.image_size, info.max_shots);
  state.lambdaOut = info.lambda_out;

  el<HTMLInputElement>("lambda").value = String(info.lambda_out);
  el<HTMLSpanElement>("lambda-value").textContent = info.lambda_out.toFixed(3);
  await refreshState();

  el<HTMLInputElement>("lambda").addEventListener("input", (e) => {
    state.lambdaOut = parseFloat((e.target as HTMLInputElement).value);
    el<HTMLSpanElement>("lambda-value").textContent = state.lambdaOut.toFixed(3);
    redraw(); // client-side only: no /infer round trip
  });
  el<HTMLSelectElement>("overlay").addEventListener("change", (e) => {
    state.overlay = (e.target as HTMLSelectElement).value as OverlayKind;
    redraw();
  });
  el<HTMLInputElement>("opacity").addEventListener("input", (e) => {
    state.overlayOpacity = parseFloat((e.target as HTMLInputElement).value);
    redraw();
  });
  el<HTMLInputElement>("brush").addEventListener("input", (e) => {
    state.brushSize = parseInt((e.target as HTMLInputElement).value, 10);
  });
  el<HTMLInputElement>("erase").addEventListener("change", (e) => {
    state.erasing = (e.target as HTMLInputElement).checked;
  });
  el<HTMLInputElement>("class-name").addEventListener("input", (e) => {
    state.className = (e.target as HTMLInputElement).value;
    redraw();
  });
  el<HTMLSelectElement>("mode").addEventListener("change", (e) => {
    state.mode = (e.target as HTMLSelectElement).value as "plm" | "npm";
  });
  el<HTMLButtonElement>("prev").addEventListener("click", () => {
    state.sceneIndex = Math.max(0, state.sceneIndex - 1);
    void loadScene();
  });
  el<HTMLButtonElement>("next").addEventListener("click", () => {
    state.sceneIndex += 1;
    void loadScene();
  });
  el<HTMLButtonElement>("clear-mask").addEventListener("click", () => {
    clearMask(state);
    redraw();
  });
  el<HTMLButtonElement>("add-shot").addEventListener("click", () => void submitShot());
  el<HTMLButtonElement>("run-incremental").addEventListener("click", () => void runIncremental());

  const canvas = el<HTMLCanvasElement>("view");
  let painting = false;
  let last: { x: number; y: number } | null = null;
  canvas.addEventListener("mousedown", (e) => {
    painting = true;
    last = canvasToPixel(e);
  });
  window.addEventListener("mouseup", () => {
    painting = false;
    last = null;
  });
  canvas.addEventListener("mousemove", (e) => {
    if (!painting || !last) return;
    const pos = canvasToPixel(e);
    const value = state.erasing ? 0 : 1;
    import("./painter.js").then(({ stroke }) => {
      stroke(state.mask, state.maskWidth, state.maskHeight, last!, pos, state.brushSize, value);
      last = pos;
      redraw();
    });
  });
  canvas.addEventListener("click", (e) => {
    const pos = canvasToPixel(e);
    import("./painter.js").then(({ stamp }) => {
      stamp(state.mask, state.maskWidth, state.maskHeight, pos.x, pos.y, state.brushSize,
            state.erasing ? 0 : 1);
      redraw();
    });
  });

  await loadScene();
}

if (typeof document !== "undefined" && document.getElementById("view")) {
  void boot().catch((err) => {
    banner(`console failed to start: ${err instanceof Error ? err.message : err}`);
  });
}
