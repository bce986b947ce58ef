/** Typed wrappers over the annotation service endpoints. */
import type { InferPayload, ScenePayload, ServiceStateInfo } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function request<T>(base: string, path: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(base + path, init);
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export function getState(base: string): Promise<ServiceStateInfo> {
  return request(base, "/state");
}

export function getScene(base: string, split: string, index: number): Promise<ScenePayload> {
  return request(base, `/scenes/${split}/${index}`);
}

export function postInfer(
  base: string,
  split: string,
  index: number,
  lambdaOut?: number,
): Promise<InferPayload> {
  return request(base, "/infer", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ split, index, lambda_out: lambdaOut ?? null }),
  });
}

export interface AnnotationResponse {
  stored: string;
  count: number;
  mask_pgm_b64: string;
}

export function postAnnotation(
  base: string,
  imageRef: string,
  className: string,
  shotIndex: number,
  maskPgmB64: string,
): Promise<AnnotationResponse> {
  return request(base, "/annotations", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({
      image_ref: imageRef,
      class_name: className,
      shot_index: shotIndex,
      mask_pgm_b64: maskPgmB64,
    }),
  });
}

export function postIncremental(
  base: string,
  mode: string,
  className: string,
  shotRefs?: string[],
): Promise<Record<string, unknown>> {
  return request(base, "/incremental", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ mode, class_name: className, shot_refs: shotRefs ?? null }),
  });
}
