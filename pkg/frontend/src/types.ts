export interface LegendEntry {
  id: number;
  name: string;
  in_dist: boolean;
  novel: boolean;
}

export interface ServiceStateInfo {
  classes: LegendEntry[];
  heads: number;
  novel_classes: number;
  params_digest: string;
  lambda_out: number;
  busy: boolean;
  splits: Record<string, number>;
  image_size: number;
  max_shots: number;
}

export interface ScenePayload {
  split: string;
  index: number;
  image_ppm_b64: string;
  label_pgm_b64: string;
}

export type OverlayKind = "closeset" | "eds" | "mmsp" | "mixed" | "openset";

export interface InferPayload {
  split: string;
  index: number;
  lambda_out: number;
  threshold_u8: number;
  maps_pgm_b64: Record<OverlayKind, string>;
  legend: LegendEntry[];
}

export interface PendingShot {
  shotIndex: number;
  imageRef: string;
  pixels: number;
  serverRef: string;
}
