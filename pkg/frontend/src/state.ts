/** Queue store: server-derived task state plus the resolution flow.
 *
 * The store never computes labels and never invents counts; everything
 * rendered comes from GET /tasks and GET /tasks/{id}. Submissions close the
 * selected task optimistically, a 409 swaps in the winning resolution from
 * the server, and a network failure arms a retry banner that re-sends the
 * same payload (the task id doubles as the idempotency key).
 */

import { ApiClient, ApiError, NetworkError } from "./api.js";
import type { Resolution, TaskDetail, TaskKind, TaskSummary, Taxonomy } from "./types.js";

export interface Banner {
  tone: "info" | "error" | "conflict";
  text: string;
}

export interface PendingRetry {
  taskId: string;
  resolution: Resolution;
}

export type Listener = () => void;

export class QueueStore {
  tasks: TaskSummary[] = [];
  selectedIndex = 0;
  detail: TaskDetail | null = null;
  taxonomy: Taxonomy | null = null;
  kindFilter: TaskKind | "all" = "all";
  banner: Banner | null = null;
  pendingRetry: PendingRetry | null = null;
  private listeners: Listener[] = [];

  constructor(private readonly api: ApiClient) {}

  subscribe(listener: Listener): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  /** Open-queue counts straight from the task listing. */
  countsByKind(): Record<string, number> {
    const counts: Record<string, number> = {};
    for (const task of this.tasks) {
      if (task.status !== "closed") {
        counts[task.kind] = (counts[task.kind] ?? 0) + 1;
      }
    }
    return counts;
  }

  openTasks(): TaskSummary[] {
    return this.tasks.filter(
      (t) =>
        t.status !== "closed" &&
        (this.kindFilter === "all" || t.kind === this.kindFilter),
    );
  }

  selected(): TaskSummary | null {
    return this.openTasks()[this.selectedIndex] ?? null;
  }

  async refresh(): Promise<void> {
    this.tasks = await this.api.listTasks();
    if (this.taxonomy === null) {
      this.taxonomy = await this.api.getTaxonomy();
    }
    const open = this.openTasks();
    if (this.selectedIndex >= open.length) {
      this.selectedIndex = Math.max(0, open.length - 1);
    }
    await this.loadSelectedDetail();
    this.emit();
  }

  async loadSelectedDetail(): Promise<void> {
    const selected = this.selected();
    this.detail = selected ? await this.api.getTask(selected.task_id) : null;
  }

  async select(offset: number): Promise<void> {
    const open = this.openTasks();
    if (!open.length) return;
    this.selectedIndex = Math.min(Math.max(this.selectedIndex + offset, 0), open.length - 1);
    await this.loadSelectedDetail();
    this.emit();
  }

  async setKindFilter(kind: TaskKind | "all"): Promise<void> {
    this.kindFilter = kind;
    this.selectedIndex = 0;
    await this.loadSelectedDetail();
    this.emit();
  }

  /** The resolution flow: optimistic close, conflict surfacing, retry banner. */
  async submitResolution(taskId: string, resolution: Resolution): Promise<boolean> {
    const task = this.tasks.find((t) => t.task_id === taskId);
    if (!task || task.status === "closed") return false;

    const previousStatus = task.status;
    task.status = "closed"; // optimistic; the server answer below is truth
    this.banner = null;
    this.emit();

    try {
      const closed = await this.api.postResolution(taskId, resolution);
      if (this.detail?.task_id === taskId) this.detail = closed;
      this.pendingRetry = null;
      this.banner = { tone: "info", text: `resolved ${taskId}` };
      await this.refresh();
      return true;
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // Lost the race: refresh the queue but keep the winning resolution
        // on screen instead of jumping to the next task.
        const winning = await this.api.getTask(taskId);
        this.pendingRetry = null;
        this.banner = {
          tone: "conflict",
          text: `already resolved by someone else: ${JSON.stringify(winning.resolution)}`,
        };
        this.tasks = await this.api.listTasks();
        this.detail = winning;
        this.emit();
        return false;
      }
      task.status = previousStatus;
      if (err instanceof NetworkError) {
        this.pendingRetry = { taskId, resolution };
        this.banner = {
          tone: "error",
          text: "network failure; the resolution was not recorded - press r to retry",
        };
        this.emit();
        return false;
      }
      this.banner = {
        tone: "error",
        text: err instanceof ApiError ? err.detail : String(err),
      };
      this.emit();
      return false;
    }
  }

  async retryPending(): Promise<boolean> {
    if (!this.pendingRetry) return false;
    const { taskId, resolution } = this.pendingRetry;
    return this.submitResolution(taskId, resolution);
  }
}
