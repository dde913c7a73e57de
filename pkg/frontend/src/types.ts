/**
 * Wire types for the failscope service, protocol v1.
 *
 * These mirror docs/protocol.md field-for-field. The UI never re-derives
 * failure modes or metrics from raw geometry; whatever the service said is
 * what gets shown.
 */

// Stored box documents are [x_min, y_min, x_max, y_max], normalized.
export type BoxArray = [number, number, number, number];

export type FailureMode = 'CD' | 'FD' | 'MD' | 'UD';
export type WarningTag = 'FTD' | 'CQS' | 'CQB';
export type DistributionTag = 'ID' | 'OOD';
export type PromptStrategy = 'Guide' | 'Challenge' | 'Repeat';

export interface AnnotationDoc {
  id: string;
  image_id: string;
  label: string;
  box: BoxArray;
}

export interface PredictedObjectDoc {
  id: string;
  label: string;
  box: BoxArray;
  score: number;
}

export interface PredictionDoc {
  image_id: string;
  model_id: string;
  latency_ms: number;
  objects: PredictedObjectDoc[];
}

export interface InstanceDoc {
  instance_id: string;
  image_id: string;
  mode: FailureMode;
  annotation_id: string | null;
  prediction_id: string | null;
  distribution: DistributionTag | null;
  warnings: WarningTag[];
  pair_iou: number | null;
  severity: number;
  model_id: string;
  persona_id: string;
  scenario_id: string;
  last_modified: string | null;
}

export interface SuggestionDoc {
  strategy: PromptStrategy;
  text: string;
  rationale: string;
  annotation_id: string;
}

export interface ExplorationResponse {
  schema_version: number;
  prediction: PredictionDoc;
  report: {
    instances: InstanceDoc[];
    image_warnings: WarningTag[];
  };
  annotations: AnnotationDoc[];
  suggestions: SuggestionDoc[];
  notices: string[];
  instance_ids: string[];
}

export interface JobDoc {
  schema_version: number;
  job_id: string;
  status: 'pending' | 'done' | 'failed';
  status_url?: string;
  poll_interval_ms?: number;
  result?: ExplorationResponse;
  error?: ErrorBody;
}

export interface ErrorBody {
  code: string;
  message: string;
  retryable: boolean;
}

export interface ErrorEnvelope {
  schema_version: number;
  error: ErrorBody;
}

export interface MetricDoc {
  axis: string;
  group: string;
  totals: { instances: number; distribution_tagged: number; warnings: number };
  mode_counts: Record<FailureMode, number>;
  mode_percent: Record<FailureMode, number>;
  distribution_counts: Record<DistributionTag, number>;
  distribution_percent: Record<DistributionTag, number>;
  warning_counts: Record<WarningTag, number>;
  warning_percent: Record<WarningTag, number>;
}

export interface PersonaDoc {
  persona_id: string;
  name: string;
  description: string;
  avatar_image_id: string | null;
}

export interface ScenarioDoc {
  scenario_id: string;
  persona_id: string;
  description: string;
  image_ids: string[];
}

export interface ImageDoc {
  image_id: string;
  content_hash: string;
  width: number;
  height: number;
  source: 'upload' | 'generated' | 'augmented';
  prompt: string | null;
  parent_image_id: string | null;
  augmentation: { kind: string; parameter: number } | null;
}

export interface ModelDoc {
  model_id: string;
  display_name: string;
  backend_kind: 'remote' | 'mock' | 'replay';
  class_list: string[];
  endpoint: string | null;
  auth_token_env: string | null;
}

export interface GroupDoc {
  group_id: string;
  name: string;
  member_instance_ids: string[];
  recovery_note: string;
  suggested_mechanisms: string[];
  canvas_positions: Record<string, [number, number]>;
}

export interface BoardMemberDoc {
  instance_id: string;
  image_id: string;
  thumbnail: string | null;
  mode: FailureMode;
  severity: number;
  canvas: [number, number];
}

export interface BoardExport {
  schema_version: number;
  project_id: string;
  groups: Array<{
    group_id: string;
    name: string;
    recovery_note: string;
    suggested_mechanisms: string[];
    members: BoardMemberDoc[];
  }>;
  ungrouped: string[];
  metrics: Record<string, MetricDoc[]>;
}

export interface RecoveryMechanismDoc {
  name: string;
  description: string;
}
