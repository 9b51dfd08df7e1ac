/** Wire types for the platform /v1 JSON API. Timestamps are UTC epoch ms. */

export interface DashboardSummary {
  campaign_id: string;
  status: 'Draft' | 'Active' | 'Ended';
  computed_at: number;
  period_ms: number;
  energy_attribute: string;
  energy_unit: string;
  current_consumption: number;
  previous_consumption: number | null;
  delta_pct: number | null;
  per_space: Record<string, number>;
  active_stream_count: number;
  recommendations: { delivered: number; accepted: number; validated: number };
}

export interface Campaign {
  id: string;
  name: string;
  space_ids: string[];
  user_ids: string[];
  start_ms: number;
  end_ms: number;
  status: 'Draft' | 'Active' | 'Ended';
  energy_attribute: string;
  energy_unit: string;
  period_ms: number;
}

export interface StreamInfo {
  id: string;
  selector_id: string;
  attribute: string;
  frequency_ms: number;
  measurement_type: 'LastValue' | 'WindowAvg' | 'WindowMin' | 'WindowMax';
  active: boolean;
  activated_at: number;
  campaign_id: string | null;
}

export interface StreamEvent {
  seq: number;
  stream_id: string;
  kind: 'CleanedMeasurement' | 'OutlierDropped' | 'TickSample' | 'ContextChange';
  at: number;
  payload: Record<string, unknown>;
}

export interface RawPoint {
  sensor_id: string;
  attribute: string;
  value: number;
  unit: string;
  observed_at: number;
  quality: 'Raw' | 'Cleaned';
  seq: number | null;
}

export interface AggBucket {
  sensor_id: string;
  attribute: string;
  bucket_start: number;
  bucket_end: number;
  fn: string;
  value: number | null;
  sample_count: number;
}

export interface Recommendation {
  id: string;
  rule_id: string;
  user_id: string;
  kind: 'Task' | 'Message' | 'Quiz';
  content: string;
  state: 'Pending' | 'Delivered' | 'Accepted' | 'Rejected' | 'Validated' | 'Failed' | 'Expired';
  created_at: number;
  delivered_at: number | null;
  window_end: number | null;
  feedback: string | null;
  feedback_at: number | null;
  history: [string, number][];
}

export interface RuleInfo {
  id: string;
  condition_id: string;
  stream_id: string;
  space_id: string;
  target_groups: string[];
  kind: string;
  templates: Record<string, string>;
}

export type QueryLeaf = { field: string; op: string; value: unknown };
export type QueryNode = { op: 'and' | 'or'; items: QueryPredicate[] };
export type QueryPredicate = QueryLeaf | QueryNode;

export interface QueryAst {
  target: 'Users' | 'Series';
  predicate: QueryPredicate | null;
  time_range: [number, number] | null;
  projection: string[];
}

export interface ApiError {
  error: { code: string; message: string };
}
