/** Pure intervention-state logic: mask edits, slider values, request bodies,
 * export documents, and list diffing. No DOM, no fetch; everything here is
 * unit-testable in isolation.
 */

import type {
  ExportDocument,
  GraphDoc,
  InterveneDoc,
  InterventionState,
  RankedItem,
} from "./types.js";
import type { InterveneBody } from "./api.js";

/** Mask starts all-ones: every learned edge passes through untouched. */
export function initialState(k: number): InterventionState {
  const mask = Array.from({ length: k }, () => Array(k).fill(1) as number[]);
  return { k, mask, sliders: {} };
}

export function cloneState(state: InterventionState): InterventionState {
  return {
    k: state.k,
    mask: state.mask.map((row) => row.slice()),
    sliders: { ...state.sliders },
  };
}

/** Flip one mask bit. Out-of-range or diagonal toggles are ignored: the
 * diagonal is structurally zero in the model, masking it is meaningless. */
export function toggleEdge(
  state: InterventionState,
  from: number,
  to: number,
): InterventionState {
  if (from === to) return state;
  if (from < 0 || from >= state.k || to < 0 || to >= state.k) return state;
  const next = cloneState(state);
  next.mask[from][to] = next.mask[from][to] ? 0 : 1;
  return next;
}

/** Sever every edge into and out of one confounder (isolate the node). */
export function severNode(
  state: InterventionState,
  node: number,
): InterventionState {
  if (node < 0 || node >= state.k) return state;
  const next = cloneState(state);
  for (let j = 0; j < state.k; j += 1) {
    next.mask[node][j] = 0;
    next.mask[j][node] = 0;
  }
  return next;
}

/** Set a slider scalar, clamped to [-1, 1]; null clears the assignment. */
export function setSlider(
  state: InterventionState,
  index: number,
  value: number | null,
): InterventionState {
  if (index < 0 || index >= state.k) return state;
  const next = cloneState(state);
  if (value === null || Number.isNaN(value)) {
    delete next.sliders[index];
  } else {
    next.sliders[index] = Math.max(-1, Math.min(1, value));
  }
  return next;
}

export function resetState(state: InterventionState): InterventionState {
  return initialState(state.k);
}

export function maskIsIdentityPass(state: InterventionState): boolean {
  return state.mask.every((row, i) =>
    row.every((bit, j) => (i === j ? true : bit === 1)),
  );
}

export function hasAssignments(state: InterventionState): boolean {
  return Object.keys(state.sliders).length > 0;
}

/** Body for POST intervene. The mask is sent only when it deviates from
 * all-pass so a pristine state round-trips as a pure re-rank request. */
export function buildInterventionBody(
  state: InterventionState,
  k: number,
): InterveneBody {
  const body: InterveneBody = { k };
  if (!maskIsIdentityPass(state)) {
    body.mask = state.mask.map((row) => row.slice());
  }
  if (hasAssignments(state)) {
    const assign: Record<string, number> = {};
    for (const [idx, value] of Object.entries(state.sliders)) {
      assign[idx] = value;
    }
    body.assign = assign;
  }
  return body;
}

/** Replayable intervention file: the graph document plus the applied mask
 * and the server-resolved assignment vectors, accepted verbatim by the
 * command-line do operation. Mask and assignments come from the server
 * response so the file reflects what was actually applied. */
export function buildExportDocument(
  graph: GraphDoc,
  result: InterveneDoc,
): ExportDocument {
  return {
    k: graph.k,
    threshold: graph.threshold,
    edges: graph.edges.map((edge) => ({ ...edge })),
    mask: result.mask.map((row) => row.slice()),
    assign: Object.fromEntries(
      Object.entries(result.resolved_assignments).map(([idx, vec]) => [
        idx,
        vec.slice(),
      ]),
    ),
  };
}

/** Positions (0-based) where the two lists disagree, over the longer length. */
export function diffLists(
  before: RankedItem[],
  after: RankedItem[],
): number[] {
  const changed: number[] = [];
  const n = Math.max(before.length, after.length);
  for (let pos = 0; pos < n; pos += 1) {
    if (before[pos]?.index !== after[pos]?.index) changed.push(pos);
  }
  return changed;
}

export interface ItemMove {
  item_id: string;
  index: number;
  from: number | null;
  to: number | null;
  shift: number;
}

/** Largest rank shifts between two lists, ties broken by item order in
 * `after`. Entries leaving or entering the top-k count as a full-length
 * shift so they sort first. */
export function topMovedItems(
  before: RankedItem[],
  after: RankedItem[],
  limit = 5,
): ItemMove[] {
  const posBefore = new Map<number, number>();
  before.forEach((item, pos) => posBefore.set(item.index, pos));
  const posAfter = new Map<number, number>();
  after.forEach((item, pos) => posAfter.set(item.index, pos));
  const span = Math.max(before.length, after.length);
  const moves: ItemMove[] = [];
  const seen = new Set<number>();
  for (const item of [...after, ...before]) {
    if (seen.has(item.index)) continue;
    seen.add(item.index);
    const from = posBefore.has(item.index) ? posBefore.get(item.index)! : null;
    const to = posAfter.has(item.index) ? posAfter.get(item.index)! : null;
    const shift = from === null || to === null ? span : Math.abs(from - to);
    if (shift > 0) {
      moves.push({ item_id: item.item_id, index: item.index, from, to, shift });
    }
  }
  moves.sort((a, b) => b.shift - a.shift || (a.to ?? span) - (b.to ?? span));
  return moves.slice(0, limit);
}

/** One line of the session history log. */
export interface HistoryEntry {
  at: string;
  summary: string;
  avpBefore: number;
  avpAfter: number;
  changed: number;
}

export function describeIntervention(state: InterventionState): string {
  const cut: string[] = [];
  for (let i = 0; i < state.k; i += 1) {
    for (let j = 0; j < state.k; j += 1) {
      if (i !== j && state.mask[i][j] === 0) cut.push(`c${i + 1}->c${j + 1}`);
    }
  }
  const held = Object.entries(state.sliders)
    .sort(([a], [b]) => Number(a) - Number(b))
    .map(([idx, value]) => `c${Number(idx) + 1}=${value.toFixed(2)}`);
  const parts: string[] = [];
  if (cut.length) parts.push(`cut ${cut.join(", ")}`);
  if (held.length) parts.push(`hold ${held.join(", ")}`);
  return parts.length ? parts.join("; ") : "no-op (all edges pass)";
}

export function historyEntry(
  state: InterventionState,
  result: InterveneDoc,
  now: Date,
): HistoryEntry {
  return {
    at: now.toISOString().slice(11, 19),
    summary: describeIntervention(state),
    avpBefore: result.avp_before,
    avpAfter: result.avp_after,
    changed: result.changed_positions.length,
  };
}
