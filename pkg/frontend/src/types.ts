/** Wire types for the /v1 annotation API. */

export type TaskKind =
  | "BoundaryVerdict"
  | "TaxonomySeed"
  | "OtherRefinement"
  | "UncertainResolution";

export type TaskStatus = "open" | "claimed" | "closed";

export interface TaskSummary {
  task_id: string;
  kind: TaskKind;
  instance_ref: string;
  status: TaskStatus;
  opened_seq: number;
}

export interface InstanceRecord {
  id: string;
  task: string;
  source: string;
  snapshot_date: string;
  input: {
    text_blocks: string[];
    iocs: string[];
    cve_ids: string[];
    time_anchors: Record<string, string>;
    extra: Record<string, unknown>;
  };
  reference: {
    gold_label: string | null;
    reference_texts: string[];
    relations: string[][] | null;
    time_anchors: Record<string, string> | null;
    scope: string[] | null;
    taxonomy_version_tags: string[] | null;
  };
}

export interface SignalView {
  mode_hint: string;
  strength: string;
  evidence: string[][];
}

export interface AgentLabels {
  round1: Record<string, string>;
  round2: Record<string, string>;
}

export interface TaskContext {
  instance?: InstanceRecord;
  model_output?: string;
  signals?: SignalView[];
  agent_labels?: AgentLabels;
  score?: number;
  purpose?: string;
}

export interface TaskDetail extends TaskSummary {
  context: TaskContext;
  resolution: Resolution | null;
}

export interface TaxonomyMode {
  mode_id: string;
  name: string;
  category: string;
  description: string;
  stages: string[];
  detection: string;
}

export interface Taxonomy {
  version: number;
  parent_version: number | null;
  modes: TaxonomyMode[];
}

/** Resolution payloads, one shape per task kind. */
export type Resolution =
  | { verdict: "failed" | "correct" }
  | { mode_id: string }
  | ModeProposal;

export interface ModeProposal {
  mode_id: string;
  name: string;
  category: string;
  description: string;
  stages: string[];
}
