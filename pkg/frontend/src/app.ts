/** Page wiring: session state, debounced intervention loop, rendering.
 *
 * Client contract: sliders and edge toggles funnel into one 150 ms debounce;
 * at most one intervene request is in flight and newer edits supersede older
 * ones; nothing is rendered optimistically, the page always shows the last
 * server response.
 */

import {
  ApiError,
  getGraph,
  getHealth,
  getRecommendations,
  getUserGraph,
  postIntervene,
} from "./api.js";
import {
  buildExportDocument,
  buildInterventionBody,
  historyEntry,
  initialState,
  resetState,
  setSlider,
  toggleEdge,
  topMovedItems,
} from "./state.js";
import {
  renderBeforeAfter,
  renderCompare,
  renderError,
  renderGraph,
  renderHistory,
  renderMoves,
  renderSliders,
  renderStatus,
} from "./render.js";
import type {
  GraphDoc,
  InterveneDoc,
  InterventionState,
  RecommendationsDoc,
  UserGraphDoc,
} from "./types.js";
import type { HistoryEntry, ItemMove } from "./state.js";

const DEBOUNCE_MS = 150;

interface Session {
  userId: string | null;
  kList: number;
  graph: GraphDoc | null;
  userGraph: UserGraphDoc | null;
  state: InterventionState;
  baseline: RecommendationsDoc | null;
  confounderFree: RecommendationsDoc | null;
  lastResult: InterveneDoc | null;
  lastAppliedState: InterventionState | null;
  history: HistoryEntry[];
  perConfounderMoves: Map<number, ItemMove[]>;
}

const session: Session = {
  userId: null,
  kList: 10,
  graph: null,
  userGraph: null,
  state: initialState(1),
  baseline: null,
  confounderFree: null,
  lastResult: null,
  lastAppliedState: null,
  history: [],
  perConfounderMoves: new Map(),
};

function must(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing page element #${id}`);
  return node;
}

const ui = {
  status: must("status"),
  error: must("error-banner"),
  userInput: must("user-input") as HTMLInputElement,
  loadBtn: must("load-btn") as HTMLButtonElement,
  kInput: must("k-input") as HTMLInputElement,
  graph: must("graph-view"),
  sliders: must("sliders"),
  beforeAfter: must("before-after"),
  compare: must("compare"),
  moves: must("moves"),
  history: must("history-log"),
  exportBtn: must("export-btn") as HTMLButtonElement,
  resetBtn: must("reset-btn") as HTMLButtonElement,
};

/** Single in-flight slot: taking a new signal aborts the previous request. */
class Gate {
  private controller: AbortController | null = null;

  take(): AbortSignal {
    this.controller?.abort();
    this.controller = new AbortController();
    return this.controller.signal;
  }
}

const gate = new Gate();
let applyTimer: ReturnType<typeof setTimeout> | undefined;

function isAbort(err: unknown): boolean {
  return err instanceof DOMException && err.name === "AbortError";
}

function showError(err: unknown, retry: (() => void) | null): void {
  const message =
    err instanceof ApiError
      ? `${err.code}: ${err.message}`
      : `unexpected error: ${String(err)}`;
  renderError(ui.error, message, retry);
}

function clearError(): void {
  renderError(ui.error, null, null);
}

function redrawGraph(): void {
  renderGraph(ui.graph, session.graph, session.userGraph, session.state, (f, t) => {
    session.state = toggleEdge(session.state, f, t);
    redrawGraph();
    scheduleApply();
  });
}

function redrawSliders(): void {
  const k = session.graph?.k ?? session.state.k;
  renderSliders(ui.sliders, k, session.state, (idx, value) => {
    session.state = setSlider(session.state, idx, value);
    redrawSliders();
    scheduleApply();
  });
}

function redrawResult(): void {
  if (!session.lastResult) {
    ui.beforeAfter.replaceChildren();
    ui.moves.replaceChildren();
    return;
  }
  const res = session.lastResult;
  renderBeforeAfter(
    ui.beforeAfter,
    res.before,
    res.after,
    res.avp_before,
    res.avp_after,
    res.changed_positions,
  );
  renderMoves(ui.moves, res.before, res.after, session.perConfounderMoves);
}

/** Confounders touched between two intervention states: held sliders plus
 * sources of flipped mask bits. Used only for the interpretability hint. */
function touchedConfounders(
  prev: InterventionState | null,
  next: InterventionState,
): Set<number> {
  const touched = new Set<number>();
  for (let i = 0; i < next.k; i += 1) {
    for (let j = 0; j < next.k; j += 1) {
      const before = prev?.mask[i]?.[j] ?? 1;
      if (before !== next.mask[i][j]) touched.add(i);
    }
  }
  for (const key of Object.keys(next.sliders)) {
    const idx = Number(key);
    if (prev?.sliders[idx] !== next.sliders[idx]) touched.add(idx);
  }
  return touched;
}

function scheduleApply(): void {
  clearTimeout(applyTimer);
  applyTimer = setTimeout(() => void applyNow(), DEBOUNCE_MS);
}

async function applyNow(): Promise<void> {
  if (!session.userId) return;
  const applied = session.state;
  const body = buildInterventionBody(applied, session.kList);
  const signal = gate.take();
  try {
    const result = await postIntervene(session.userId, body, "", signal);
    clearError();
    session.lastResult = result;
    const touched = touchedConfounders(session.lastAppliedState, applied);
    if (touched.size === 1) {
      const [idx] = [...touched];
      session.perConfounderMoves.set(idx, topMovedItems(result.before, result.after, 5));
    }
    session.lastAppliedState = applied;
    session.history.push(historyEntry(applied, result, new Date()));
    ui.exportBtn.disabled = false;
    redrawResult();
    renderHistory(ui.history, session.history);
    if (result.warning) {
      renderStatus(ui.status, `warning: ${result.warning}`);
    }
  } catch (err) {
    if (isAbort(err)) return;
    showError(err, () => void applyNow());
  }
}

async function loadUser(): Promise<void> {
  const userId = ui.userInput.value.trim();
  if (!userId) return;
  const signal = gate.take();
  try {
    renderStatus(ui.status, `loading ${userId}...`);
    const [graph, userGraph, recsOn, recsOff] = await Promise.all([
      getGraph("",),
      getUserGraph(userId),
      getRecommendations(userId, session.kList, true, "", signal),
      getRecommendations(userId, session.kList, false, "", signal),
    ]);
    clearError();
    session.userId = userId;
    session.graph = graph;
    session.userGraph = userGraph;
    session.baseline = recsOn;
    session.confounderFree = recsOff;
    session.state = initialState(graph.k);
    session.lastResult = null;
    session.lastAppliedState = null;
    session.perConfounderMoves = new Map();
    ui.exportBtn.disabled = true;
    renderStatus(ui.status, `user ${userId}: k=${graph.k} confounders`);
    redrawGraph();
    redrawSliders();
    redrawResult();
    renderCompare(ui.compare, recsOn.items, recsOff.items, recsOn.avp, recsOff.avp);
    renderHistory(ui.history, session.history);
  } catch (err) {
    if (isAbort(err)) return;
    renderStatus(ui.status, "load failed");
    showError(err, () => void loadUser());
  }
}

function exportIntervention(): void {
  if (!session.graph || !session.lastResult) return;
  const doc = buildExportDocument(session.graph, session.lastResult);
  const blob = new Blob([JSON.stringify(doc, null, 2)], {
    type: "application/json",
  });
  const url = URL.createObjectURL(blob);
  const anchor = document.createElement("a");
  anchor.href = url;
  anchor.download = `intervention-${session.userId ?? "user"}.json`;
  anchor.click();
  URL.revokeObjectURL(url);
}

function resetIntervention(): void {
  session.state = resetState(session.state);
  redrawGraph();
  redrawSliders();
  scheduleApply();
}

async function boot(): Promise<void> {
  ui.loadBtn.addEventListener("click", () => void loadUser());
  ui.userInput.addEventListener("keydown", (ev) => {
    if (ev.key === "Enter") void loadUser();
  });
  ui.kInput.value = String(session.kList);
  ui.kInput.addEventListener("change", () => {
    const k = Math.max(1, Math.floor(Number(ui.kInput.value) || 10));
    session.kList = k;
    ui.kInput.value = String(k);
    if (session.userId) void loadUser();
  });
  ui.exportBtn.addEventListener("click", exportIntervention);
  ui.exportBtn.disabled = true;
  ui.resetBtn.addEventListener("click", resetIntervention);
  try {
    const health = await getHealth();
    renderStatus(
      ui.status,
      `service ok: ${health.n_users} users, ${health.n_items} items, ` +
        `k=${health.k}, checkpoint ${health.checkpoint_digest.slice(0, 12)}`,
    );
  } catch (err) {
    renderStatus(ui.status, "service unreachable");
    showError(err, () => void boot());
  }
}

void boot();
