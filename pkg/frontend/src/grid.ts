import type { PatchInfo } from "./types.js";

/** Fixed class palette; index 0 (background) renders neutral. */
export const CLASS_COLORS = [
  "#d8d4da",
  "#cc3342",
  "#3db351",
  "#3861d6",
  "#a34dbd",
  "#c78f2e",
  "#2ea7a0",
];

export function classColor(classIndex: number): string {
  return CLASS_COLORS[classIndex % CLASS_COLORS.length];
}

export interface GridCell {
  id: number;
  thumbnail: string;
  color: string;
  entropy: number;
  predClass: number;
  humanLabel: number | null;
  reviewed: boolean;
}

/**
 * View model for the patch grid: entropy-descending so the reviewer sees
 * the same informative patches the uncertainty sampler would pick; ties
 * resolve by patch id to match the server's ordering.
 */
export function buildGridViewModel(patches: PatchInfo[]): GridCell[] {
  return [...patches]
    .sort((a, b) => b.entropy - a.entropy || a.id - b.id)
    .map((p) => ({
      id: p.id,
      thumbnail: p.thumbnail,
      color: classColor(p.human_label ?? p.pred_class),
      entropy: p.entropy,
      predClass: p.pred_class,
      humanLabel: p.human_label,
      reviewed: p.human_label !== null && p.human_label !== undefined,
    }));
}

export interface GridCallbacks {
  onCellClick(patchId: number): void;
}

/** Render the grid into a container element. */
export function renderGrid(
  doc: Document,
  container: HTMLElement,
  patches: PatchInfo[],
  callbacks: GridCallbacks,
): void {
  container.textContent = "";
  const cells = buildGridViewModel(patches);
  if (cells.length === 0) {
    const empty = doc.createElement("p");
    empty.className = "empty-state";
    empty.textContent = "No patches to review.";
    container.appendChild(empty);
    return;
  }
  for (const cell of cells) {
    const el = doc.createElement("button");
    el.className = cell.reviewed ? "patch-cell reviewed" : "patch-cell";
    el.dataset.patchId = String(cell.id);
    el.style.borderColor = cell.color;
    el.title = `patch ${cell.id} · entropy ${cell.entropy.toFixed(3)}`;
    const img = doc.createElement("img");
    img.src = `data:image/png;base64,${cell.thumbnail}`;
    img.width = 64;
    img.height = 64;
    el.appendChild(img);
    const tag = doc.createElement("span");
    tag.className = "patch-tag";
    tag.style.background = cell.color;
    tag.textContent = String(cell.humanLabel ?? cell.predClass);
    el.appendChild(tag);
    el.addEventListener("click", () => callbacks.onCellClick(cell.id));
    container.appendChild(el);
  }
}
