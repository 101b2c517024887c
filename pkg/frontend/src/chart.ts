import type { DiceEntry } from "./types.js";

/** Scale Dice history into polyline points for an SVG of the given size. */
export function dicePolyline(
  log: DiceEntry[],
  width: number,
  height: number,
  key: "pixel_dice" | "patch_dice" = "pixel_dice",
): string {
  if (log.length === 0) {
    return "";
  }
  const maxRound = Math.max(1, log[log.length - 1].round);
  return log
    .map((e) => {
      const x = (e.round / maxRound) * (width - 10) + 5;
      const y = height - 5 - e[key] * (height - 10);
      return `${x.toFixed(1)},${y.toFixed(1)}`;
    })
    .join(" ");
}

export function renderDiceChart(doc: Document, svg: SVGElement, log: DiceEntry[]): void {
  const ns = "http://www.w3.org/2000/svg";
  svg.textContent = "";
  const width = Number(svg.getAttribute("width") ?? 240);
  const height = Number(svg.getAttribute("height") ?? 120);
  for (const [key, color] of [
    ["pixel_dice", "#3861d6"],
    ["patch_dice", "#c78f2e"],
  ] as const) {
    const line = doc.createElementNS(ns, "polyline");
    line.setAttribute("points", dicePolyline(log, width, height, key));
    line.setAttribute("fill", "none");
    line.setAttribute("stroke", color);
    line.setAttribute("stroke-width", "2");
    svg.appendChild(line);
    for (const e of log) {
      const dot = doc.createElementNS(ns, "circle");
      const maxRound = Math.max(1, log[log.length - 1].round);
      dot.setAttribute("cx", String((e.round / maxRound) * (width - 10) + 5));
      dot.setAttribute("cy", String(height - 5 - e[key] * (height - 10)));
      dot.setAttribute("r", "3");
      dot.setAttribute("fill", color);
      dot.setAttribute("data-round", String(e.round));
      svg.appendChild(dot);
    }
  }
}
