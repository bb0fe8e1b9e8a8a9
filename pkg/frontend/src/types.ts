/** Wire types for the steering service. Every field mirrors a server response
 * verbatim; the UI never derives model quantities itself. */

export interface RankedItem {
  index: number;
  item_id: string;
  score: number;
  pop_rank: number;
}

export interface RecommendationsDoc {
  user_id: string;
  k: number;
  items: RankedItem[];
  avp: number;
  warning?: string | null;
}

export interface GraphEdge {
  from: number;
  to: number;
  global: number;
  global_prob: number;
}

export interface GraphDoc {
  k: number;
  threshold: number;
  edges: GraphEdge[];
}

export interface UserGraphDoc extends GraphDoc {
  user_id?: string;
  local?: number[][];
  composed?: number[][];
}

export interface InterveneDoc {
  user_id: string;
  k: number;
  before: RankedItem[];
  after: RankedItem[];
  avp_before: number;
  avp_after: number;
  changed_positions: number[];
  resolved_assignments: Record<string, number[]>;
  mask: number[][];
  warning?: string | null;
  checkpoint_digest?: string;
}

export interface ServiceError {
  code: string;
  message: string;
}

/** Client-side intervention state: a binary mask over edges plus slider
 * scalars in [-1, 1] keyed by confounder index. */
export interface InterventionState {
  k: number;
  mask: number[][];
  sliders: Record<number, number>;
}

/** The file cmd-line replay accepts: the graph export document extended
 * with the mask and the server-resolved assignment vectors. */
export interface ExportDocument extends GraphDoc {
  mask: number[][];
  assign: Record<string, number[]>;
}
