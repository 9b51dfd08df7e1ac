/** Stream visualisation: live raw points or aggregated buckets plus
 * dropped-outlier markers, straight from API rows. Toggling raw vs
 * aggregated only changes the query we send, never the data. */

import type { AggBucket, RawPoint, StreamEvent } from '../types.js';

export type ChartMode = 'raw' | 'agg';

export interface ChartRequest {
  mode: ChartMode;
  sensor: string;
  attribute: string;
  t0: number;
  t1: number;
  fn?: 'avg' | 'min' | 'max' | 'sum' | 'count';
  bucketMs?: number;
}

export interface ChartPoint {
  x: number;
  y: number;
}

export interface OutlierMarker {
  x: number;
  y: number;
  reason: string;
}

export interface ChartViewModel {
  points: ChartPoint[];
  markers: OutlierMarker[];
  pointCount: number;
}

/** Query parameters for the series endpoints; the only thing a toggle changes. */
export function chartQueryParams(request: ChartRequest): Record<string, string> {
  const base = {
    sensor: request.sensor,
    attribute: request.attribute,
    t0: String(request.t0),
    t1: String(request.t1),
  };
  if (request.mode === 'raw') return base;
  return {
    ...base,
    fn: request.fn ?? 'avg',
    bucket: String(request.bucketMs ?? 3_600_000),
  };
}

export function chartFromRaw(rows: RawPoint[], events: StreamEvent[] = []): ChartViewModel {
  return {
    points: rows.map((r) => ({ x: r.observed_at, y: r.value })),
    markers: outlierMarkers(events),
    pointCount: rows.length,
  };
}

export function chartFromBuckets(buckets: AggBucket[], events: StreamEvent[] = []): ChartViewModel {
  const points = buckets
    .filter((b): b is AggBucket & { value: number } => b.value !== null)
    .map((b) => ({ x: b.bucket_start, y: b.value }));
  return { points, markers: outlierMarkers(events), pointCount: points.length };
}

function outlierMarkers(events: StreamEvent[]): OutlierMarker[] {
  return events
    .filter((e) => e.kind === 'OutlierDropped')
    .map((e) => ({
      x: e.at,
      y: Number(e.payload['value'] ?? 0),
      reason: String(e.payload['reason'] ?? ''),
    }));
}
