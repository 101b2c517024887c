import { ApiClient } from "./api.js";
import { renderDiceChart } from "./chart.js";
import { classColor, renderGrid } from "./grid.js";
import { UISession } from "./session.js";
import type { MaskLevel } from "./types.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

const api = new ApiClient(
  new URLSearchParams(location.search).get("server") ?? "http://127.0.0.1:8234",
);
const session = new UISession(api);
let maskLevel: MaskLevel = "pixel";

function renderAll(): void {
  const banner = el<HTMLDivElement>("banner");
  if (session.status === "offline") {
    banner.textContent = `Server unreachable: ${session.lastError ?? "unknown"}`;
    banner.classList.remove("hidden");
  } else {
    banner.classList.add("hidden");
  }
  if (!session.info) {
    return;
  }
  el<HTMLSpanElement>("round-label").textContent = String(session.round);
  el<HTMLSpanElement>("pending-label").textContent = String(session.pending.length);

  const palette = el<HTMLDivElement>("palette");
  palette.textContent = "";
  const classes: [number, string][] = [[0, "background"]];
  for (const [idx, name] of Object.entries(session.info.classes)) {
    classes.push([Number(idx), name]);
  }
  for (const [idx, name] of classes) {
    const btn = document.createElement("button");
    btn.textContent = `${idx} ${name}`;
    btn.style.background = classColor(idx);
    btn.className = idx === session.selectedClass ? "class-btn selected" : "class-btn";
    btn.addEventListener("click", () => {
      session.selectedClass = idx;
      renderAll();
    });
    palette.appendChild(btn);
  }

  renderGrid(document, el<HTMLDivElement>("grid"), session.patches, {
    onCellClick: (patchId) => {
      session.stageCorrection(patchId, session.selectedClass);
      renderAll();
    },
  });
  renderDiceChart(document, el<HTMLElement>("chart") as unknown as SVGElement,
    session.diceHistory);
  el<HTMLImageElement>("mask-overlay").src = api.maskUrl(maskLevel, session.round);

  const roundBtn = el<HTMLButtonElement>("run-round");
  roundBtn.disabled = session.status === "round-running";
  roundBtn.textContent = session.status === "round-running" ? "Round running…" : "Run round";
}

async function boot(): Promise<void> {
  el<HTMLButtonElement>("submit").addEventListener("click", async () => {
    try {
      await session.submitCorrections();
    } catch {
      // events stay queued; banner/lastError explain what happened
    }
    renderAll();
  });
  el<HTMLButtonElement>("run-round").addEventListener("click", async () => {
    renderAll();
    try {
      await session.runRound();
    } finally {
      renderAll();
    }
  });
  el<HTMLButtonElement>("retry").addEventListener("click", () => void refresh());
  el<HTMLSelectElement>("mask-level").addEventListener("change", (ev) => {
    maskLevel = (ev.target as HTMLSelectElement).value as MaskLevel;
    renderAll();
  });
  await refresh();
}

async function refresh(): Promise<void> {
  try {
    await session.sync();
  } catch {
    // offline banner shows the failure; retry button re-runs this
  }
  renderAll();
}

boot();
