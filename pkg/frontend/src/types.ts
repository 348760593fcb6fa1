/** Wire types for the /v1 region-query API. */

/** Normalized coordinates: x and y each in [0, 1], origin top-left. */
export type Point = [number, number];

/** [x_min, y_min, x_max, y_max], normalized, with x_min < x_max and y_min < y_max. */
export type Box = [number, number, number, number];

export type PromptKind = "none" | "points" | "box" | "points_and_box";

export interface PromptJson {
  kind: PromptKind;
  points?: Point[];
  box?: Box;
}

export interface UploadResponse {
  image_id: string;
  h: number;
  w: number;
  patch_grid: [number, number];
}

export interface Match {
  text: string;
  score: number;
  confidence: number;
}

export interface Heatmap {
  h: number;
  w: number;
  values: number[];
}

export interface QueryRequest {
  image_id: string;
  prompt: PromptJson;
  k?: number;
  candidates?: string[];
  class_set?: string;
}

export interface QueryResponse {
  matches: Match[];
  heatmap: Heatmap;
  prompt: PromptJson;
}

export interface HealthResponse {
  status: string;
  checkpoint_id: string | null;
  image_size: number;
  embed_dim: number;
  class_sets: string[];
}
