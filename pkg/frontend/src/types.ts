/** Payload shapes of the review service API. */

export interface SessionInfo {
  width: number;
  height: number;
  patch_size: number;
  window: number;
  grid: { rows: number; cols: number };
  classes: Record<string, string>;
  round_index: number;
  dice_log: DiceEntry[];
  annotated: number;
}

export interface DiceEntry {
  round: number;
  patch_dice: number;
  pixel_dice: number;
}

export interface PatchInfo {
  id: number;
  row: number;
  col: number;
  pred_class: number;
  entropy: number;
  human_label: number | null;
  thumbnail: string; // base64 PNG
}

export interface PatchesPayload {
  round: number;
  patches: PatchInfo[];
}

export interface AnnotationEvent {
  patch_id: number;
  class_index: number;
  timestamp: number;
}

export interface RoundResult {
  noop: boolean;
  round_index: number;
  applied?: number;
  dice_log: DiceEntry[];
}

export type MaskLevel = "patch" | "pixel";
