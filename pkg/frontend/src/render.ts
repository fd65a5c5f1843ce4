/** Pure HTML renderers. Everything here is a function of server data only. */

import type {
  SignalView,
  TaskContext,
  TaskDetail,
  TaskKind,
  TaskSummary,
  Taxonomy,
} from "./types.js";
import type { Banner } from "./state.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** Escape, then wrap any signal-evidence fragments in <mark>. */
export function highlightFragments(text: string, fragments: string[]): string {
  let html = escapeHtml(text);
  for (const fragment of fragments) {
    const needle = escapeHtml(fragment);
    if (needle && html.includes(needle)) {
      html = html.split(needle).join(`<mark>${needle}</mark>`);
    }
  }
  return html;
}

export function renderCounts(counts: Record<string, number>): string {
  const kinds: TaskKind[] = [
    "BoundaryVerdict",
    "TaxonomySeed",
    "OtherRefinement",
    "UncertainResolution",
  ];
  const chips = kinds
    .map((kind) => `<span class="chip" data-kind="${kind}">${kind}: ${counts[kind] ?? 0}</span>`)
    .join(" ");
  return `<div class="counts">${chips}</div>`;
}

export function renderTaskList(tasks: TaskSummary[], selectedIndex: number): string {
  if (!tasks.length) {
    return `<p class="empty">queue is empty</p>`;
  }
  const rows = tasks
    .map((task, index) => {
      const cls = index === selectedIndex ? "task selected" : "task";
      return (
        `<li class="${cls}" data-task-id="${escapeHtml(task.task_id)}">` +
        `<span class="kind">${task.kind}</span> ` +
        `<span class="ref">${escapeHtml(task.instance_ref)}</span> ` +
        `<span class="status">${task.status}</span></li>`
      );
    })
    .join("");
  return `<ol class="task-list">${rows}</ol>`;
}

function evidenceFragments(signals: SignalView[] | undefined, side: 0 | 1): string[] {
  const fragments: string[] = [];
  for (const signal of signals ?? []) {
    for (const pair of signal.evidence) {
      const fragment = pair[side];
      if (fragment) fragments.push(fragment);
    }
  }
  return fragments;
}

function prettyModelOutput(raw: string | undefined): string {
  if (!raw) return "(no model output)";
  try {
    return JSON.stringify(JSON.parse(raw), null, 2);
  } catch {
    return raw; // contract violations render verbatim
  }
}

function referenceText(context: TaskContext): string {
  const reference = context.instance?.reference;
  if (!reference) return "(no reference)";
  const parts: string[] = [];
  if (reference.gold_label) parts.push(`gold label: ${reference.gold_label}`);
  for (const text of reference.reference_texts) parts.push(text);
  for (const triple of reference.relations ?? []) parts.push(triple.join(" -> "));
  for (const [event, date] of Object.entries(reference.time_anchors ?? {})) {
    parts.push(`${event}: ${date}`);
  }
  if (reference.scope) parts.push(`scope: ${reference.scope.join(", ")}`);
  if (reference.taxonomy_version_tags) {
    parts.push(`standards: ${reference.taxonomy_version_tags.join(", ")}`);
  }
  return parts.join("\n");
}

/** Side-by-side view: model output vs reference, evidence marked on both sides. */
export function renderSideBySide(context: TaskContext): string {
  const output = prettyModelOutput(context.model_output);
  const reference = referenceText(context);
  const outputHtml = highlightFragments(output, evidenceFragments(context.signals, 0));
  const referenceHtml = highlightFragments(reference, evidenceFragments(context.signals, 1));
  return (
    `<div class="side-by-side">` +
    `<div class="pane"><h3>model output</h3><pre>${outputHtml}</pre></div>` +
    `<div class="pane"><h3>reference</h3><pre>${referenceHtml}</pre></div>` +
    `</div>`
  );
}

export function renderSignals(signals: SignalView[] | undefined): string {
  if (!signals?.length) return `<p class="no-signals">no advisory signals fired</p>`;
  const rows = signals
    .map((signal) => {
      const notes = signal.evidence
        .map((pair) => escapeHtml(pair[2] ?? ""))
        .filter(Boolean)
        .join("; ");
      return (
        `<li><strong>${escapeHtml(signal.mode_hint)}</strong> ` +
        `<em>${escapeHtml(signal.strength)}</em> ${notes}</li>`
      );
    })
    .join("");
  return `<ul class="signals">${rows}</ul>`;
}

export function renderAgentLabels(context: TaskContext): string {
  const labels = context.agent_labels;
  if (!labels) return "";
  const agents = Array.from(
    new Set([...Object.keys(labels.round1), ...Object.keys(labels.round2)]),
  ).sort();
  const rows = agents
    .map(
      (agent) =>
        `<tr><td>${escapeHtml(agent)}</td>` +
        `<td>${escapeHtml(labels.round1[agent] ?? "-")}</td>` +
        `<td>${escapeHtml(labels.round2[agent] ?? "-")}</td></tr>`,
    )
    .join("");
  return (
    `<table class="agent-labels"><thead>` +
    `<tr><th>agent</th><th>round 1</th><th>round 2</th></tr></thead>` +
    `<tbody>${rows}</tbody></table>`
  );
}

function taxonomyOptions(taxonomy: Taxonomy | null): string {
  return (taxonomy?.modes ?? [])
    .map(
      (mode) =>
        `<option value="${escapeHtml(mode.mode_id)}">` +
        `${escapeHtml(mode.mode_id)} ${escapeHtml(mode.name)}</option>`,
    )
    .join("");
}

/** Resolution form per task kind; submission wiring lives in main.ts. */
export function renderResolutionForm(task: TaskDetail, taxonomy: Taxonomy | null): string {
  if (task.status === "closed") {
    return (
      `<div class="resolution-closed">closed: ` +
      `<code>${escapeHtml(JSON.stringify(task.resolution))}</code></div>`
    );
  }
  switch (task.kind) {
    case "BoundaryVerdict":
      return (
        `<form class="resolution" data-kind="BoundaryVerdict">` +
        `<button type="submit" name="verdict" value="failed" accesskey="f">failed (f)</button>` +
        `<button type="submit" name="verdict" value="correct" accesskey="c">correct (c)</button>` +
        `</form>`
      );
    case "UncertainResolution":
      return (
        `<form class="resolution" data-kind="UncertainResolution">` +
        `<select name="mode_id">${taxonomyOptions(taxonomy)}</select>` +
        `<button type="submit">assign (enter)</button>` +
        `</form>`
      );
    case "TaxonomySeed":
    case "OtherRefinement":
      // Propose-only: a new mode activates server-side at the next
      // refinement step, never directly from the UI.
      return (
        `<form class="resolution" data-kind="${task.kind}">` +
        `<label>existing mode <select name="mode_id">` +
        `<option value="">(propose new below)</option>` +
        `${taxonomyOptions(taxonomy)}</select></label>` +
        `<fieldset class="proposal"><legend>propose new mode</legend>` +
        `<input name="new_mode_id" placeholder="4.1">` +
        `<input name="new_name" placeholder="name">` +
        `<select name="new_category">` +
        `<option value="emergent">emergent</option>` +
        `<option value="spurious_correlation">spurious_correlation</option>` +
        `<option value="contradictory_knowledge">contradictory_knowledge</option>` +
        `<option value="constrained_generalization">constrained_generalization</option>` +
        `</select>` +
        `<input name="new_description" placeholder="one-line description">` +
        `</fieldset>` +
        `<button type="submit">submit (enter)</button>` +
        `<p class="note">proposals take effect at the next refinement round</p>` +
        `</form>`
      );
  }
}

export function renderBanner(banner: Banner | null): string {
  if (!banner) return "";
  return `<div class="banner ${banner.tone}">${escapeHtml(banner.text)}</div>`;
}

export function renderTaskDetail(task: TaskDetail | null, taxonomy: Taxonomy | null): string {
  if (!task) return `<p class="empty">no task selected</p>`;
  const context = task.context ?? {};
  const header =
    `<header class="task-header"><h2>${task.kind}</h2>` +
    `<span>${escapeHtml(task.instance_ref)}</span>` +
    (context.score !== undefined ? `<span>score ${context.score}</span>` : "") +
    (context.purpose ? `<span>${escapeHtml(context.purpose)}</span>` : "") +
    `</header>`;
  const input = context.instance
    ? `<pre class="input">${escapeHtml(context.instance.input.text_blocks.join("\n"))}</pre>`
    : "";
  return (
    header +
    input +
    renderSideBySide(context) +
    renderSignals(context.signals) +
    renderAgentLabels(context) +
    renderResolutionForm(task, taxonomy)
  );
}
