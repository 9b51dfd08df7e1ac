/** Typed fetch client for the platform API.
 *
 * The bearer token lives in this object only (entered at login, held in
 * memory, never persisted). Server error bodies surface as PlatformApiError
 * with the machine-readable code intact so forms can react to it.
 */

import type {
  AggBucket,
  Campaign,
  DashboardSummary,
  QueryAst,
  RawPoint,
  Recommendation,
  RuleInfo,
  StreamEvent,
  StreamInfo,
} from './types.js';

export class PlatformApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private token: string = '',
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  setToken(token: string): void {
    this.token = token;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = { 'Content-Type': 'application/json' };
    if (this.token) headers['Authorization'] = `Bearer ${this.token}`;
    const response = await this.fetchImpl(this.baseUrl + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await response.text();
    const payload = text ? JSON.parse(text) : null;
    if (!response.ok) {
      const code = payload?.error?.code ?? `http-${response.status}`;
      const message = payload?.error?.message ?? response.statusText;
      throw new PlatformApiError(response.status, code, message);
    }
    return payload as T;
  }

  get<T>(path: string): Promise<T> {
    return this.request<T>('GET', path);
  }

  post<T>(path: string, body?: unknown): Promise<T> {
    return this.request<T>('POST', path, body);
  }

  // -- typed endpoints -----------------------------------------------------

  health(): Promise<{ status: string; now_ms: number }> {
    return this.get('/v1/health');
  }

  campaigns(): Promise<Campaign[]> {
    return this.get('/v1/campaigns');
  }

  dashboard(campaignId: string): Promise<DashboardSummary> {
    return this.get(`/v1/campaigns/${campaignId}/dashboard`);
  }

  streams(): Promise<StreamInfo[]> {
    return this.get('/v1/streams');
  }

  streamEvents(streamId: string, sinceSeq = 0): Promise<StreamEvent[]> {
    return this.get(`/v1/streams/${streamId}/events?since=${sinceSeq}`);
  }

  seriesRaw(sensor: string, attribute: string, t0: number, t1: number): Promise<RawPoint[]> {
    const qs = new URLSearchParams({
      sensor, attribute, t0: String(t0), t1: String(t1),
    });
    return this.get(`/v1/series/raw?${qs}`);
  }

  seriesAgg(
    sensor: string, attribute: string, t0: number, t1: number,
    fn: string, bucketMs: number,
  ): Promise<AggBucket[]> {
    const qs = new URLSearchParams({
      sensor, attribute, t0: String(t0), t1: String(t1),
      fn, bucket: String(bucketMs),
    });
    return this.get(`/v1/series/agg?${qs}`);
  }

  registerRule(payload: Record<string, unknown>): Promise<RuleInfo> {
    return this.post('/v1/rules', payload);
  }

  rules(): Promise<RuleInfo[]> {
    return this.get('/v1/rules');
  }

  userRecommendations(userId: string): Promise<Recommendation[]> {
    return this.get(`/v1/users/${userId}/recommendations`);
  }

  sendFeedback(recId: string, response: 'Accept' | 'Reject', answer?: string): Promise<Recommendation> {
    return this.post(`/v1/recommendations/${recId}/feedback`, { response, answer });
  }

  runQuery(ast: QueryAst): Promise<{ query: QueryAst; results: unknown[] }> {
    return this.post('/v1/queries', ast);
  }
}
