/**
 * View state for the console: which scene and overlay are active, the
 * in-progress mask, pending shots, and the what-if threshold slider.
 */
import type { OverlayKind, PendingShot } from "./types.js";

export type Mode = "plm" | "npm";

export interface ViewState {
  split: string;
  sceneIndex: number;
  overlay: OverlayKind;
  overlayOpacity: number; // 0..1
  brushSize: number; // radius in pixels
  erasing: boolean;
  mask: Uint8Array; // strictly 0/1, scene-shaped
  maskWidth: number;
  maskHeight: number;
  pendingShots: PendingShot[];
  maxShots: number;
  mode: Mode;
  lambdaOut: number;
  className: string;
}

export function initialState(width: number, height: number, maxShots: number): ViewState {
  return {
    split: "test_ood",
    sceneIndex: 0,
    overlay: "openset",
    overlayOpacity: 0.55,
    brushSize: 2,
    erasing: false,
    mask: new Uint8Array(width * height),
    maskWidth: width,
    maskHeight: height,
    pendingShots: [],
    maxShots,
    mode: "npm",
    lambdaOut: 0.5,
    className: "",
  };
}

export function clearMask(state: ViewState): void {
  state.mask.fill(0);
}

export function maskPixelCount(state: ViewState): number {
  let n = 0;
  for (let i = 0; i < state.mask.length; i++) n += state.mask[i];
  return n;
}

/** Submission needs at least one painted pixel and a class name. */
export function canSubmitShot(state: ViewState): boolean {
  return maskPixelCount(state) > 0 && state.className.trim().length > 0;
}

export function canRunIncremental(state: ViewState): boolean {
  return state.pendingShots.length > 0 && state.className.trim().length > 0;
}

export function addPendingShot(state: ViewState, shot: PendingShot): void {
  if (state.pendingShots.length >= state.maxShots) {
    throw new RangeError(`at most ${state.maxShots} shots per class`);
  }
  state.pendingShots.push(shot);
}

export function nextShotIndex(state: ViewState): number {
  return state.pendingShots.length === 0
    ? 0
    : Math.max(...state.pendingShots.map((s) => s.shotIndex)) + 1;
}
