/** Campaign overview: a pure render of the server's DashboardSummary.
 *
 * No figure shown here is computed client-side; the platform owns the
 * consumption sums, the period comparison, and the recommendation counters.
 */

import type { DashboardSummary } from '../types.js';
import { formatInZone } from '../time.js';

export interface DeltaBadge {
  visible: boolean;
  text: string;
  direction: 'down' | 'up' | 'flat';
}

export interface SpaceRow {
  spaceId: string;
  consumptionText: string;
}

export interface DashboardViewModel {
  campaignId: string;
  status: string;
  computedAtText: string;
  consumptionText: string;
  previousText: string | null;
  delta: DeltaBadge;
  spaces: SpaceRow[];
  activeStreamCount: number;
  recommendationCounters: { delivered: number; accepted: number; validated: number };
  emptyState: boolean;
  emptyStateHint: string;
}

export function renderDashboard(
  summary: DashboardSummary,
  timeZone = 'UTC',
): DashboardViewModel {
  const unit = summary.energy_unit;
  const delta: DeltaBadge =
    summary.delta_pct === null
      ? { visible: false, text: '', direction: 'flat' }
      : {
          visible: true,
          text: `${summary.delta_pct > 0 ? '+' : ''}${summary.delta_pct.toFixed(1)}%`,
          direction: summary.delta_pct < 0 ? 'down' : summary.delta_pct > 0 ? 'up' : 'flat',
        };
  return {
    campaignId: summary.campaign_id,
    status: summary.status,
    computedAtText: formatInZone(summary.computed_at, timeZone),
    consumptionText: `${summary.current_consumption.toFixed(1)} ${unit}`,
    previousText:
      summary.previous_consumption === null
        ? null
        : `${summary.previous_consumption.toFixed(1)} ${unit}`,
    delta,
    spaces: Object.entries(summary.per_space)
      .sort(([a], [b]) => a.localeCompare(b))
      .map(([spaceId, value]) => ({
        spaceId,
        consumptionText: `${value.toFixed(1)} ${unit}`,
      })),
    activeStreamCount: summary.active_stream_count,
    recommendationCounters: summary.recommendations,
    emptyState: summary.active_stream_count === 0,
    emptyStateHint:
      summary.active_stream_count === 0
        ? 'No active sensor data streams. Activate a stream to start monitoring.'
        : '',
  };
}
