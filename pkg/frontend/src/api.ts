// Thin typed client over the run-service HTTP API. The console is a pure
// API client: the feedback POST is the only state-changing call it makes.

import type {
  EventData,
  FeedbackPayload,
  LossSeriesEntry,
  PendingInspectionData,
  RunSummaryData,
} from './types'

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>

export interface FeedbackResult {
  ok: boolean
  status: number
  detail: string
}

export class ConsoleClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`)
    if (!response.ok) {
      throw new Error(`GET ${path} failed: ${response.status}`)
    }
    return (await response.json()) as T
  }

  async listPending(): Promise<PendingInspectionData[]> {
    const body = await this.getJson<{ pending: PendingInspectionData[] }>('/inspections/pending')
    return body.pending
  }

  async getRun(runId: string): Promise<RunSummaryData> {
    return this.getJson<RunSummaryData>(`/runs/${runId}`)
  }

  async getEvents(runId: string, since = -1, wait = 0): Promise<{ status: string; events: EventData[] }> {
    const params = new URLSearchParams({ since: String(since), wait: String(wait) })
    return this.getJson(`/runs/${runId}/events?${params}`)
  }

  async getLossSeries(runId: string): Promise<LossSeriesEntry[]> {
    const body = await this.getJson<{ series: LossSeriesEntry[] }>(`/runs/${runId}/loss-series`)
    return body.series
  }

  async startRun(request: { task: unknown; config: unknown }): Promise<string> {
    const response = await this.fetchImpl(`${this.baseUrl}/runs`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(request),
    })
    if (response.status !== 201) {
      throw new Error(`POST /runs failed: ${response.status}`)
    }
    const body = (await response.json()) as { run_id: string }
    return body.run_id
  }

  /** Submit operator feedback. Server rejections (409/422) come back as a
   *  result rather than a throw so the form can surface them inline. */
  async submitFeedback(inspectionId: string, payload: FeedbackPayload): Promise<FeedbackResult> {
    const response = await this.fetchImpl(`${this.baseUrl}/inspections/${inspectionId}/feedback`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(payload),
    })
    let detail = ''
    try {
      const body = (await response.json()) as { detail?: unknown }
      if (body.detail !== undefined) {
        detail = Array.isArray(body.detail) ? body.detail.join('; ') : String(body.detail)
      }
    } catch {
      // non-JSON error body; keep the status code only
    }
    return { ok: response.ok, status: response.status, detail }
  }
}
