/** Thin fetch wrapper for the steering service.
 *
 * Each helper returns the parsed JSON payload or throws ApiError with the
 * server's code/message so the UI can show actionable errors. A shared
 * AbortController slot lets the caller supersede an in-flight request.
 */

import type {
  GraphDoc,
  InterveneDoc,
  RecommendationsDoc,
  UserGraphDoc,
} from "./types.js";

export class ApiError extends Error {
  code: string;
  status: number;

  constructor(code: string, message: string, status: number) {
    super(message);
    this.code = code;
    this.status = status;
  }
}

async function request<T>(
  input: string,
  init?: RequestInit,
): Promise<T> {
  let response: Response;
  try {
    response = await fetch(input, init);
  } catch (err) {
    if (err instanceof DOMException && err.name === "AbortError") throw err;
    throw new ApiError("network", `cannot reach service: ${String(err)}`, 0);
  }
  let body: unknown = null;
  try {
    body = await response.json();
  } catch {
    // fall through: non-JSON error bodies become a generic ApiError below
  }
  if (!response.ok) {
    const doc = (body ?? {}) as { code?: string; message?: string };
    throw new ApiError(
      doc.code ?? "http_error",
      doc.message ?? `request failed with status ${response.status}`,
      response.status,
    );
  }
  return body as T;
}

export interface HealthDoc {
  status: string;
  checkpoint_digest: string;
  n_users: number;
  n_items: number;
  k: number;
}

export function getHealth(base = ""): Promise<HealthDoc> {
  return request<HealthDoc>(`${base}/health`);
}

export function getGraph(base = ""): Promise<GraphDoc> {
  return request<GraphDoc>(`${base}/graph`);
}

export function getUserGraph(userId: string, base = ""): Promise<UserGraphDoc> {
  return request<UserGraphDoc>(
    `${base}/users/${encodeURIComponent(userId)}/graph`,
  );
}

export function getRecommendations(
  userId: string,
  k: number,
  confounders: boolean,
  base = "",
  signal?: AbortSignal,
): Promise<RecommendationsDoc> {
  const mode = confounders ? "on" : "off";
  return request<RecommendationsDoc>(
    `${base}/users/${encodeURIComponent(userId)}/recommendations` +
      `?k=${k}&confounders=${mode}`,
    { signal },
  );
}

/** POST body for an intervention: k plus optional mask and slider scalars. */
export interface InterveneBody {
  k: number;
  mask?: number[][];
  assign?: Record<string, number>;
}

export function postIntervene(
  userId: string,
  body: InterveneBody,
  base = "",
  signal?: AbortSignal,
): Promise<InterveneDoc> {
  return request<InterveneDoc>(
    `${base}/users/${encodeURIComponent(userId)}/intervene`,
    {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
      signal,
    },
  );
}
