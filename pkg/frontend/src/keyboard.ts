/** Keyboard-first triage: a pure key -> action map.
 *
 * j/k move through the queue, f/c decide boundary verdicts, digits pick the
 * nth taxonomy option on labeling tasks, enter submits the current form,
 * r retries a failed submission.
 */

import type { TaskKind } from "./types.js";

export type KeyAction =
  | { type: "move"; offset: number }
  | { type: "verdict"; verdict: "failed" | "correct" }
  | { type: "pick-mode"; index: number }
  | { type: "submit" }
  | { type: "retry" }
  | { type: "refresh" }
  | { type: "none" };

export function actionForKey(key: string, kind: TaskKind | null, typing: boolean): KeyAction {
  if (typing) {
    // Never steal keys from form fields, except submit.
    return key === "Enter" ? { type: "submit" } : { type: "none" };
  }
  switch (key) {
    case "j":
    case "ArrowDown":
      return { type: "move", offset: 1 };
    case "k":
    case "ArrowUp":
      return { type: "move", offset: -1 };
    case "Enter":
      return { type: "submit" };
    case "r":
      return { type: "retry" };
    case "g":
      return { type: "refresh" };
  }
  if (kind === "BoundaryVerdict") {
    if (key === "f") return { type: "verdict", verdict: "failed" };
    if (key === "c") return { type: "verdict", verdict: "correct" };
  }
  if (kind === "UncertainResolution" || kind === "TaxonomySeed" || kind === "OtherRefinement") {
    if (/^[1-9]$/.test(key)) {
      return { type: "pick-mode", index: Number(key) - 1 };
    }
  }
  return { type: "none" };
}
