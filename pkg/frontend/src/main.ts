/** DOM bootstrap: wires the store, renderers, and keyboard map to the page. */

import { ApiClient } from "./api.js";
import { actionForKey } from "./keyboard.js";
import {
  renderBanner,
  renderCounts,
  renderTaskDetail,
  renderTaskList,
} from "./render.js";
import { QueueStore } from "./state.js";
import type { ModeProposal, Resolution } from "./types.js";

function requireElement(id: string): HTMLElement {
  const element = document.getElementById(id);
  if (!element) throw new Error(`missing #${id}`);
  return element;
}

/** Build the resolution payload from the visible form. The UI never invents
 * labels: every value here was typed or picked by the annotator. */
export function resolutionFromForm(form: HTMLFormElement): Resolution | null {
  const kind = form.dataset["kind"];
  const data = new FormData(form);
  if (kind === "BoundaryVerdict") {
    const verdict = data.get("verdict");
    if (verdict === "failed" || verdict === "correct") return { verdict };
    return null;
  }
  if (kind === "UncertainResolution") {
    const modeId = String(data.get("mode_id") ?? "");
    return modeId ? { mode_id: modeId } : null;
  }
  // TaxonomySeed / OtherRefinement: existing mode wins, else a proposal.
  const existing = String(data.get("mode_id") ?? "");
  if (existing) return { mode_id: existing };
  const proposal: ModeProposal = {
    mode_id: String(data.get("new_mode_id") ?? ""),
    name: String(data.get("new_name") ?? ""),
    category: String(data.get("new_category") ?? "emergent"),
    description: String(data.get("new_description") ?? ""),
    stages: [],
  };
  return proposal.mode_id && proposal.name ? proposal : null;
}

export function startApp(): void {
  const params = new URLSearchParams(window.location.search);
  const baseUrl = params.get("api") ?? "";
  const token =
    params.get("token") ??
    window.localStorage.getItem("cti-triage-token") ??
    window.prompt("annotation service bearer token") ??
    "";
  window.localStorage.setItem("cti-triage-token", token);

  const api = new ApiClient(baseUrl, token);
  const store = new QueueStore(api);

  const countsEl = requireElement("counts");
  const listEl = requireElement("task-list");
  const detailEl = requireElement("task-detail");
  const bannerEl = requireElement("banner");

  store.subscribe(() => {
    countsEl.innerHTML = renderCounts(store.countsByKind());
    listEl.innerHTML = renderTaskList(store.openTasks(), store.selectedIndex);
    detailEl.innerHTML = renderTaskDetail(store.detail, store.taxonomy);
    bannerEl.innerHTML = renderBanner(store.banner);
  });

  detailEl.addEventListener("submit", (event) => {
    event.preventDefault();
    const form = event.target as HTMLFormElement;
    if (event instanceof SubmitEvent && event.submitter instanceof HTMLButtonElement) {
      const submitter = event.submitter;
      if (submitter.name === "verdict") {
        const hidden = document.createElement("input");
        hidden.type = "hidden";
        hidden.name = "verdict";
        hidden.value = submitter.value;
        form.appendChild(hidden);
      }
    }
    const resolution = resolutionFromForm(form);
    const selected = store.selected();
    if (resolution && selected) {
      void store.submitResolution(selected.task_id, resolution);
    }
  });

  document.addEventListener("keydown", (event) => {
    const typing =
      event.target instanceof HTMLInputElement ||
      event.target instanceof HTMLSelectElement ||
      event.target instanceof HTMLTextAreaElement;
    const action = actionForKey(event.key, store.detail?.kind ?? null, typing);
    switch (action.type) {
      case "move":
        event.preventDefault();
        void store.select(action.offset);
        break;
      case "verdict": {
        const selected = store.selected();
        if (selected) void store.submitResolution(selected.task_id, { verdict: action.verdict });
        break;
      }
      case "pick-mode": {
        const dropdown = detailEl.querySelector<HTMLSelectElement>("select[name=mode_id]");
        if (dropdown && action.index < dropdown.options.length) {
          dropdown.selectedIndex = action.index;
        }
        break;
      }
      case "submit": {
        const form = detailEl.querySelector<HTMLFormElement>("form.resolution");
        if (form && !typing) form.requestSubmit();
        break;
      }
      case "retry":
        void store.retryPending();
        break;
      case "refresh":
        void store.refresh();
        break;
      case "none":
        break;
    }
  });

  void store.refresh();
  window.setInterval(() => void store.refresh(), 15_000);
}

if (typeof document !== "undefined" && document.getElementById("task-list")) {
  startApp();
}
