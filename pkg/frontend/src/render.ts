/** DOM rendering for the steering page. Every number shown here comes out of
 * a service response; this layer draws, it never recomputes model outputs. */

import type {
  GraphDoc,
  InterventionState,
  RankedItem,
  UserGraphDoc,
} from "./types.js";
import { topMovedItems } from "./state.js";
import type { HistoryEntry, ItemMove } from "./state.js";

const SVG_NS = "http://www.w3.org/2000/svg";
const VIEW = 320;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function nodePositions(k: number): Array<{ x: number; y: number }> {
  const cx = VIEW / 2;
  const cy = VIEW / 2;
  const r = k === 1 ? 0 : VIEW / 2 - 40;
  return Array.from({ length: k }, (_, i) => {
    const angle = (2 * Math.PI * i) / k - Math.PI / 2;
    return { x: cx + r * Math.cos(angle), y: cy + r * Math.sin(angle) };
  });
}

function graphDocIsValid(doc: GraphDoc | null): doc is GraphDoc {
  return (
    doc !== null &&
    typeof doc.k === "number" &&
    doc.k >= 1 &&
    Array.isArray(doc.edges) &&
    doc.edges.every(
      (e) =>
        Number.isInteger(e.from) &&
        Number.isInteger(e.to) &&
        e.from >= 0 &&
        e.from < doc.k &&
        e.to >= 0 &&
        e.to < doc.k,
    )
  );
}

/** Directed graph view. Learned edges (global=1) draw as arrows whose stroke
 * intensity follows the selected user's composed edge weight; clicking an
 * edge toggles its mask bit via the callback. Severed edges draw dashed. */
export function renderGraph(
  container: HTMLElement,
  doc: GraphDoc | null,
  userGraph: UserGraphDoc | null,
  state: InterventionState,
  onToggle: (from: number, to: number) => void,
): void {
  container.replaceChildren();
  if (!graphDocIsValid(doc)) {
    container.append(el("div", "error-state", "graph document is malformed or missing"));
    return;
  }
  const k = doc.k;
  const svg = document.createElementNS(SVG_NS, "svg");
  svg.setAttribute("viewBox", `0 0 ${VIEW} ${VIEW}`);
  svg.setAttribute("class", "graph-svg");

  const defs = document.createElementNS(SVG_NS, "defs");
  const marker = document.createElementNS(SVG_NS, "marker");
  marker.setAttribute("id", "arrowhead");
  marker.setAttribute("markerWidth", "8");
  marker.setAttribute("markerHeight", "8");
  marker.setAttribute("refX", "7");
  marker.setAttribute("refY", "3");
  marker.setAttribute("orient", "auto");
  const tip = document.createElementNS(SVG_NS, "path");
  tip.setAttribute("d", "M0,0 L7,3 L0,6 Z");
  tip.setAttribute("class", "arrowhead");
  marker.append(tip);
  defs.append(marker);
  svg.append(defs);

  const pos = nodePositions(k);
  const composed = userGraph?.composed ?? null;
  const weights = doc.edges
    .filter((e) => e.global === 1 && composed)
    .map((e) => Math.abs(composed![e.from][e.to]));
  const wMax = weights.length ? Math.max(...weights, 1e-12) : 1;

  for (const edge of doc.edges) {
    if (edge.global !== 1) continue;
    const a = pos[edge.from];
    const b = pos[edge.to];
    const dx = b.x - a.x;
    const dy = b.y - a.y;
    const len = Math.hypot(dx, dy) || 1;
    const trim = 22;
    const x1 = a.x + (dx / len) * trim;
    const y1 = a.y + (dy / len) * trim;
    const x2 = b.x - (dx / len) * trim;
    const y2 = b.y - (dy / len) * trim;
    const line = document.createElementNS(SVG_NS, "line");
    line.setAttribute("x1", String(x1));
    line.setAttribute("y1", String(y1));
    line.setAttribute("x2", String(x2));
    line.setAttribute("y2", String(y2));
    line.setAttribute("marker-end", "url(#arrowhead)");
    const severed = state.mask[edge.from]?.[edge.to] === 0;
    const weight = composed ? Math.abs(composed[edge.from][edge.to]) / wMax : 0.7;
    line.setAttribute("class", severed ? "edge severed" : "edge");
    line.setAttribute("stroke-opacity", severed ? "0.9" : String(0.25 + 0.75 * weight));
    line.setAttribute("stroke-width", String(1.5 + 2.5 * (severed ? 0 : weight)));
    const title = document.createElementNS(SVG_NS, "title");
    title.textContent =
      `c${edge.from + 1} -> c${edge.to + 1}` +
      ` p=${edge.global_prob.toFixed(2)}` +
      (composed ? ` user w=${composed[edge.from][edge.to].toFixed(3)}` : "") +
      (severed ? " (severed)" : "") +
      " - click to toggle";
    line.append(title);
    line.addEventListener("click", () => onToggle(edge.from, edge.to));
    svg.append(line);
  }

  for (let i = 0; i < k; i += 1) {
    const g = document.createElementNS(SVG_NS, "g");
    const circle = document.createElementNS(SVG_NS, "circle");
    circle.setAttribute("cx", String(pos[i].x));
    circle.setAttribute("cy", String(pos[i].y));
    circle.setAttribute("r", "18");
    circle.setAttribute("class", "node");
    const label = document.createElementNS(SVG_NS, "text");
    label.setAttribute("x", String(pos[i].x));
    label.setAttribute("y", String(pos[i].y + 4));
    label.setAttribute("text-anchor", "middle");
    label.setAttribute("class", "node-label");
    label.textContent = `c${i + 1}`;
    g.append(circle, label);
    svg.append(g);
  }
  container.append(svg);
  const onEdges = doc.edges.filter((e) => e.global === 1).length;
  container.append(
    el("div", "graph-caption", `${k} confounders, ${onEdges} learned edges`),
  );
}

function listColumn(
  title: string,
  items: RankedItem[],
  avp: number | null,
  highlight: Set<number>,
  shared: Set<number>,
): HTMLElement {
  const col = el("div", "list-col");
  col.append(el("h3", undefined, title));
  if (avp !== null) {
    col.append(el("div", "avp", `AVP ${avp.toFixed(3)}`));
  }
  const ol = el("ol", "ranked");
  items.forEach((item, pos) => {
    const li = el("li");
    li.textContent = `${item.item_id}  (pop #${item.pop_rank})`;
    if (highlight.has(pos)) li.classList.add("moved");
    if (shared.has(item.index)) li.classList.add("shared");
    li.title = `score ${item.score.toFixed(4)}`;
    ol.append(li);
  });
  col.append(ol);
  return col;
}

/** Before/after intervention columns. Highlighted rows are the positions the
 * server reported as changed; no client-side re-ranking happens here. */
export function renderBeforeAfter(
  container: HTMLElement,
  before: RankedItem[],
  after: RankedItem[],
  avpBefore: number,
  avpAfter: number,
  changedPositions: number[],
): void {
  container.replaceChildren();
  const changed = new Set(changedPositions);
  const sharedIdx = new Set(
    before.map((i) => i.index).filter((ix) => after.some((j) => j.index === ix)),
  );
  container.append(
    listColumn("before", before, avpBefore, new Set(), sharedIdx),
    listColumn("after", after, avpAfter, changed, sharedIdx),
  );
  const delta = avpAfter - avpBefore;
  const note = el(
    "div",
    "delta-note",
    `AVP ${delta >= 0 ? "+" : ""}${delta.toFixed(3)}, ` +
      `${changedPositions.length} positions changed`,
  );
  container.append(note);
}

/** Confounded vs confounder-free columns; rows present in both lists get the
 * shared marker so the eye can link them across columns. */
export function renderCompare(
  container: HTMLElement,
  confounded: RankedItem[],
  confounderFree: RankedItem[],
  avpOn: number,
  avpOff: number,
): void {
  container.replaceChildren();
  const sharedIdx = new Set(
    confounded
      .map((i) => i.index)
      .filter((ix) => confounderFree.some((j) => j.index === ix)),
  );
  container.append(
    listColumn("with confounders", confounded, avpOn, new Set(), sharedIdx),
    listColumn("confounder-free", confounderFree, avpOff, new Set(), sharedIdx),
  );
}

export function renderMoves(
  container: HTMLElement,
  before: RankedItem[],
  after: RankedItem[],
  perConfounder: Map<number, ItemMove[]>,
): void {
  container.replaceChildren();
  const moves = topMovedItems(before, after, 5);
  container.append(el("h3", undefined, "top moved items"));
  if (!moves.length) {
    container.append(el("div", "muted", "no movement in the visible list"));
  } else {
    const ul = el("ul", "moves");
    for (const move of moves) {
      const fromTxt = move.from === null ? "out" : `#${move.from + 1}`;
      const toTxt = move.to === null ? "out" : `#${move.to + 1}`;
      ul.append(el("li", undefined, `${move.item_id}: ${fromTxt} -> ${toTxt}`));
    }
    container.append(ul);
  }
  if (perConfounder.size) {
    container.append(el("h3", undefined, "per-confounder hints"));
    const dl = el("div", "hints");
    [...perConfounder.entries()]
      .sort(([a], [b]) => a - b)
      .forEach(([idx, mv]) => {
        const ids = mv.slice(0, 3).map((m) => m.item_id).join(", ") || "none";
        dl.append(el("div", undefined, `c${idx + 1} moves: ${ids}`));
      });
    container.append(dl);
  }
}

export function renderHistory(
  container: HTMLElement,
  entries: HistoryEntry[],
): void {
  container.replaceChildren();
  container.append(el("h3", undefined, "history"));
  if (!entries.length) {
    container.append(el("div", "muted", "no interventions applied yet"));
    return;
  }
  const ul = el("ul", "history");
  for (const entry of [...entries].reverse()) {
    ul.append(
      el(
        "li",
        undefined,
        `${entry.at}  ${entry.summary}  ` +
          `AVP ${entry.avpBefore.toFixed(3)} -> ${entry.avpAfter.toFixed(3)}` +
          ` (${entry.changed} moved)`,
      ),
    );
  }
  container.append(ul);
}

export function renderSliders(
  container: HTMLElement,
  k: number,
  state: InterventionState,
  onSlide: (index: number, value: number | null) => void,
): void {
  container.replaceChildren();
  container.append(el("h3", undefined, "hold confounders"));
  for (let i = 0; i < k; i += 1) {
    const row = el("div", "slider-row");
    const active = i in state.sliders;
    const label = el("label", undefined, `c${i + 1}`);
    const input = el("input") as HTMLInputElement;
    input.type = "range";
    input.min = "-1";
    input.max = "1";
    input.step = "0.05";
    input.value = String(active ? state.sliders[i] : 0);
    input.addEventListener("input", () => onSlide(i, Number(input.value)));
    const value = el(
      "span",
      "slider-value",
      active ? state.sliders[i].toFixed(2) : "free",
    );
    const clear = el("button", "clear-btn", "release");
    clear.disabled = !active;
    clear.addEventListener("click", () => onSlide(i, null));
    row.append(label, input, value, clear);
    container.append(row);
  }
}

export function renderError(
  banner: HTMLElement,
  message: string | null,
  onRetry: (() => void) | null,
): void {
  banner.replaceChildren();
  if (message === null) {
    banner.classList.add("hidden");
    return;
  }
  banner.classList.remove("hidden");
  banner.append(el("span", undefined, message));
  if (onRetry) {
    const btn = el("button", "retry-btn", "retry");
    btn.addEventListener("click", onRetry);
    banner.append(btn);
  }
}

export function renderStatus(target: HTMLElement, text: string): void {
  target.textContent = text;
}
