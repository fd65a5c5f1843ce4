/** Typed client for the /v1 annotation service.
 *
 * All mutations go through postResolution, which keeps one in-flight request
 * per task id: repeated submissions (double clicks, keyboard repeats) share
 * the same promise, so the server never sees a duplicate.
 */

import type { Resolution, TaskDetail, TaskKind, TaskStatus, TaskSummary, Taxonomy } from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export class NetworkError extends Error {}

export interface TaskFilter {
  kind?: TaskKind;
  status?: TaskStatus;
}

export class ApiClient {
  private inFlight = new Map<string, Promise<TaskDetail>>();

  constructor(
    private readonly baseUrl: string,
    private readonly token: string,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchImpl(`${this.baseUrl}${path}`, {
        ...init,
        headers: {
          Authorization: `Bearer ${this.token}`,
          "Content-Type": "application/json",
          ...(init?.headers ?? {}),
        },
      });
    } catch (err) {
      throw new NetworkError(String(err));
    }
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = (await response.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  async listTasks(filter: TaskFilter = {}): Promise<TaskSummary[]> {
    const params = new URLSearchParams();
    if (filter.kind) params.set("kind", filter.kind);
    if (filter.status) params.set("status", filter.status);
    const query = params.toString();
    const doc = await this.request<{ tasks: TaskSummary[] }>(
      `/v1/tasks${query ? `?${query}` : ""}`,
    );
    return doc.tasks;
  }

  getTask(taskId: string): Promise<TaskDetail> {
    return this.request<TaskDetail>(`/v1/tasks/${encodeURIComponent(taskId)}`);
  }

  getTaxonomy(): Promise<Taxonomy> {
    return this.request<Taxonomy>("/v1/taxonomy");
  }

  /** Submit a resolution; concurrent calls for the same task share one POST. */
  postResolution(taskId: string, resolution: Resolution): Promise<TaskDetail> {
    const existing = this.inFlight.get(taskId);
    if (existing) return existing;
    const request = this.request<TaskDetail>(
      `/v1/tasks/${encodeURIComponent(taskId)}/resolution`,
      { method: "POST", body: JSON.stringify(resolution) },
    ).finally(() => {
      this.inFlight.delete(taskId);
    });
    this.inFlight.set(taskId, request);
    return request;
  }
}
