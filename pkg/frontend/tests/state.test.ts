import { describe, expect, it } from "vitest";

import {
  buildExportDocument,
  buildInterventionBody,
  describeIntervention,
  diffLists,
  hasAssignments,
  historyEntry,
  initialState,
  maskIsIdentityPass,
  resetState,
  setSlider,
  severNode,
  toggleEdge,
  topMovedItems,
} from "../src/state.js";
import type { GraphDoc, InterveneDoc, RankedItem } from "../src/types.js";

function ranked(indices: number[]): RankedItem[] {
  return indices.map((index, pos) => ({
    index,
    item_id: `i${index}`,
    score: 1 - pos * 0.01,
    pop_rank: index + 1,
  }));
}

describe("initialState", () => {
  it("starts with an all-pass mask and no sliders", () => {
    const s = initialState(3);
    expect(s.k).toBe(3);
    expect(s.mask).toEqual([
      [1, 1, 1],
      [1, 1, 1],
      [1, 1, 1],
    ]);
    expect(s.sliders).toEqual({});
    expect(maskIsIdentityPass(s)).toBe(true);
    expect(hasAssignments(s)).toBe(false);
  });
});

describe("toggleEdge", () => {
  it("flips exactly one bit and flips it back", () => {
    const s0 = initialState(4);
    const s1 = toggleEdge(s0, 1, 2);
    expect(s1.mask[1][2]).toBe(0);
    const flat0 = s0.mask.flat();
    const flat1 = s1.mask.flat();
    const diffs = flat0.filter((b, i) => b !== flat1[i]).length;
    expect(diffs).toBe(1);
    const s2 = toggleEdge(s1, 1, 2);
    expect(s2.mask).toEqual(s0.mask);
  });

  it("does not mutate the input state", () => {
    const s0 = initialState(2);
    toggleEdge(s0, 0, 1);
    expect(s0.mask[0][1]).toBe(1);
  });

  it("ignores diagonal and out-of-range toggles", () => {
    const s0 = initialState(3);
    expect(toggleEdge(s0, 1, 1)).toBe(s0);
    expect(toggleEdge(s0, -1, 0)).toBe(s0);
    expect(toggleEdge(s0, 0, 3)).toBe(s0);
  });
});

describe("severNode", () => {
  it("zeroes the node's row and column", () => {
    const s = severNode(initialState(3), 1);
    expect(s.mask).toEqual([
      [1, 0, 1],
      [0, 0, 0],
      [1, 0, 1],
    ]);
  });
});

describe("setSlider", () => {
  it("clamps into [-1, 1]", () => {
    const s = setSlider(initialState(2), 0, 3.5);
    expect(s.sliders[0]).toBe(1);
    const s2 = setSlider(s, 0, -9);
    expect(s2.sliders[0]).toBe(-1);
  });

  it("null clears an assignment", () => {
    let s = setSlider(initialState(2), 1, 0.25);
    expect(hasAssignments(s)).toBe(true);
    s = setSlider(s, 1, null);
    expect(hasAssignments(s)).toBe(false);
  });

  it("ignores out-of-range indices", () => {
    const s0 = initialState(2);
    expect(setSlider(s0, 5, 0.5)).toBe(s0);
  });
});

describe("resetState", () => {
  it("returns to the pristine all-pass state", () => {
    let s = toggleEdge(initialState(3), 0, 1);
    s = setSlider(s, 2, -0.4);
    const r = resetState(s);
    expect(maskIsIdentityPass(r)).toBe(true);
    expect(hasAssignments(r)).toBe(false);
  });
});

describe("buildInterventionBody", () => {
  it("sends only k for a pristine state", () => {
    const body = buildInterventionBody(initialState(4), 10);
    expect(body).toEqual({ k: 10 });
  });

  it("includes the mask once any edge is severed", () => {
    const s = toggleEdge(initialState(3), 0, 2);
    const body = buildInterventionBody(s, 5);
    expect(body.k).toBe(5);
    expect(body.mask).toEqual([
      [1, 1, 0],
      [1, 1, 1],
      [1, 1, 1],
    ]);
    expect(body.assign).toBeUndefined();
  });

  it("includes scalar assignments keyed by confounder index", () => {
    const s = setSlider(setSlider(initialState(3), 0, 0.5), 2, -1);
    const body = buildInterventionBody(s, 10);
    expect(body.mask).toBeUndefined();
    expect(body.assign).toEqual({ "0": 0.5, "2": -1 });
  });

  it("body mask is a copy, not a live reference", () => {
    const s = toggleEdge(initialState(2), 0, 1);
    const body = buildInterventionBody(s, 10);
    body.mask![0][0] = 99;
    expect(s.mask[0][0]).toBe(1);
  });
});

describe("buildExportDocument", () => {
  const graph: GraphDoc = {
    k: 2,
    threshold: 0.5,
    edges: [{ from: 0, to: 1, global: 1, global_prob: 0.93 }],
  };
  const result: InterveneDoc = {
    user_id: "u0",
    k: 10,
    before: ranked([1, 2]),
    after: ranked([2, 1]),
    avp_before: 3.0,
    avp_after: 2.5,
    changed_positions: [0, 1],
    resolved_assignments: { "1": [0.1, 0.2, 0.3] },
    mask: [
      [1, 0],
      [1, 1],
    ],
    warning: null,
  };

  it("combines graph, server mask, and resolved assignment vectors", () => {
    const state = toggleEdge(initialState(2), 0, 1);
    const doc = buildExportDocument(graph, result);
    expect(doc.k).toBe(2);
    expect(doc.threshold).toBe(0.5);
    expect(doc.edges).toEqual(graph.edges);
    expect(doc.mask).toEqual([
      [1, 0],
      [1, 1],
    ]);
    expect(doc.assign).toEqual({ "1": [0.1, 0.2, 0.3] });
  });

  it("is detached from its sources", () => {
    const state = initialState(2);
    const doc = buildExportDocument(graph, result);
    doc.mask[0][1] = 7;
    doc.assign["1"][0] = 7;
    doc.edges[0].global = 0;
    expect(result.mask[0][1]).toBe(0);
    expect(result.resolved_assignments["1"][0]).toBe(0.1);
    expect(graph.edges[0].global).toBe(1);
  });

  it("round-trips through JSON unchanged", () => {
    const doc = buildExportDocument(graph, result);
    expect(JSON.parse(JSON.stringify(doc))).toEqual(doc);
  });
});

describe("diffLists", () => {
  it("is empty for identical lists", () => {
    const a = ranked([3, 1, 4]);
    expect(diffLists(a, ranked([3, 1, 4]))).toEqual([]);
  });

  it("reports 0-based positions that differ, including length overhang", () => {
    const before = ranked([3, 1, 4]);
    const after = ranked([3, 4, 1, 5]);
    expect(diffLists(before, after)).toEqual([1, 2, 3]);
  });
});

describe("topMovedItems", () => {
  it("ranks larger shifts first and respects the limit", () => {
    const before = ranked([0, 1, 2, 3, 4]);
    const after = ranked([4, 1, 2, 3, 0]);
    const moves = topMovedItems(before, after, 2);
    expect(moves.length).toBe(2);
    expect(moves.map((m) => m.shift)).toEqual([4, 4]);
    expect(new Set(moves.map((m) => m.index))).toEqual(new Set([0, 4]));
  });

  it("treats entering/leaving the list as a full-span shift", () => {
    const before = ranked([0, 1, 2]);
    const after = ranked([0, 1, 9]);
    const moves = topMovedItems(before, after, 5);
    const entering = moves.find((m) => m.index === 9);
    const leaving = moves.find((m) => m.index === 2);
    expect(entering).toMatchObject({ from: null, to: 2, shift: 3 });
    expect(leaving).toMatchObject({ from: 2, to: null, shift: 3 });
  });

  it("returns nothing when nothing moved", () => {
    const a = ranked([5, 6]);
    expect(topMovedItems(a, ranked([5, 6]))).toEqual([]);
  });
});

describe("describeIntervention / historyEntry", () => {
  it("names cut edges and held sliders with 1-based labels", () => {
    let s = toggleEdge(initialState(3), 0, 2);
    s = setSlider(s, 1, -0.5);
    expect(describeIntervention(s)).toBe("cut c1->c3; hold c2=-0.50");
  });

  it("describes the pristine state as a no-op", () => {
    expect(describeIntervention(initialState(2))).toBe("no-op (all edges pass)");
  });

  it("builds a history entry from the server result", () => {
    const s = toggleEdge(initialState(2), 0, 1);
    const result: InterveneDoc = {
      user_id: "u1",
      k: 2,
      before: ranked([1, 2]),
      after: ranked([2, 1]),
      avp_before: 1.5,
      avp_after: 2.0,
      changed_positions: [0, 1],
      resolved_assignments: {},
      mask: [
        [1, 0],
        [1, 1],
      ],
    };
    const entry = historyEntry(s, result, new Date("2024-05-01T10:20:30Z"));
    expect(entry.at).toBe("10:20:30");
    expect(entry.summary).toBe("cut c1->c2");
    expect(entry.avpBefore).toBe(1.5);
    expect(entry.avpAfter).toBe(2.0);
    expect(entry.changed).toBe(2);
  });
});
