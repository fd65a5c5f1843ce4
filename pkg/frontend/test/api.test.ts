import { describe, expect, it } from "vitest";

import { ApiClient, ApiError, NetworkError } from "../src/api.js";
import type { FetchLike } from "../src/api.js";

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

function recordingFetch(responses: Response[]): { fetch: FetchLike; calls: { url: string; init?: RequestInit }[] } {
  const calls: { url: string; init?: RequestInit }[] = [];
  const queue = [...responses];
  const fetch: FetchLike = async (url, init) => {
    calls.push({ url, init });
    const next = queue.shift();
    if (!next) throw new Error("no scripted response left");
    return next;
  };
  return { fetch, calls };
}

describe("ApiClient", () => {
  it("sends the bearer token on every request", async () => {
    const { fetch, calls } = recordingFetch([jsonResponse({ tasks: [] })]);
    const client = new ApiClient("http://svc", "tok-123", fetch);
    await client.listTasks();
    const headers = calls[0]?.init?.headers as Record<string, string>;
    expect(headers["Authorization"]).toBe("Bearer tok-123");
    expect(calls[0]?.url).toBe("http://svc/v1/tasks");
  });

  it("encodes task filters as query parameters", async () => {
    const { fetch, calls } = recordingFetch([jsonResponse({ tasks: [] })]);
    const client = new ApiClient("", "t", fetch);
    await client.listTasks({ kind: "BoundaryVerdict", status: "open" });
    expect(calls[0]?.url).toBe("/v1/tasks?kind=BoundaryVerdict&status=open");
  });

  it("maps error statuses to ApiError with the service detail", async () => {
    const { fetch } = recordingFetch([jsonResponse({ detail: "unknown task nope" }, 404)]);
    const client = new ApiClient("", "t", fetch);
    const err = await client.getTask("nope").catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(404);
    expect(err.detail).toBe("unknown task nope");
  });

  it("wraps transport failures in NetworkError", async () => {
    const client = new ApiClient("", "t", async () => {
      throw new TypeError("fetch failed");
    });
    const err = await client.listTasks().catch((e) => e);
    expect(err).toBeInstanceOf(NetworkError);
  });

  it("shares one in-flight POST per task id (no duplicate submissions)", async () => {
    let resolveResponse: (r: Response) => void = () => {};
    const pending = new Promise<Response>((resolve) => {
      resolveResponse = resolve;
    });
    const calls: string[] = [];
    const client = new ApiClient("", "t", async (url) => {
      calls.push(url);
      return pending;
    });
    const first = client.postResolution("task-1", { verdict: "failed" });
    const second = client.postResolution("task-1", { verdict: "failed" });
    expect(second).toBe(first); // double-click shares the same request
    resolveResponse(jsonResponse({ task_id: "task-1", status: "closed" }));
    await first;
    expect(calls).toHaveLength(1);

    // After settling, a new submission is allowed again.
    const { fetch } = recordingFetch([jsonResponse({ task_id: "task-1", status: "closed" })]);
    const fresh = new ApiClient("", "t", fetch);
    await fresh.postResolution("task-1", { verdict: "failed" });
  });

  it("posts the resolution body as JSON", async () => {
    const { fetch, calls } = recordingFetch([jsonResponse({ task_id: "t1", status: "closed" })]);
    const client = new ApiClient("", "t", fetch);
    await client.postResolution("t1", { mode_id: "1.1" });
    expect(calls[0]?.url).toBe("/v1/tasks/t1/resolution");
    expect(JSON.parse(String(calls[0]?.init?.body))).toEqual({ mode_id: "1.1" });
  });
});
