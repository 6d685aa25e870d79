// HTTP client for the verification service.

import type { CapturePayload } from './capture.js'

export interface EnrollResponse {
  user_id: string
  sessions_enrolled: number
}

export interface VerifyDecision {
  distance: number
  threshold: number
  accepted: boolean
  model_checksum: string
}

export class ServiceError extends Error {
  constructor(readonly status: number, message: string) {
    super(message)
  }
}

/** Service base URL: ?service= query param wins, then a build-time default. */
export function resolveBaseUrl(defaultUrl = 'http://127.0.0.1:8000'): string {
  if (typeof window !== 'undefined') {
    const fromQuery = new URLSearchParams(window.location.search).get('service')
    if (fromQuery) return fromQuery.replace(/\/$/, '')
  }
  return defaultUrl.replace(/\/$/, '')
}

async function post<T>(base: string, path: string, body: CapturePayload): Promise<T> {
  let resp: Response
  try {
    resp = await fetch(`${base}${path}`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(body),
    })
  } catch (err) {
    throw new ServiceError(0, `service unreachable: ${err}`)
  }
  const text = await resp.text()
  if (!resp.ok) {
    let detail = text
    try {
      detail = JSON.parse(text).error ?? text
    } catch {
      /* not JSON */
    }
    throw new ServiceError(resp.status, detail)
  }
  return JSON.parse(text) as T
}

export const enroll = (base: string, payload: CapturePayload) =>
  post<EnrollResponse>(base, '/api/v1/enroll', payload)

export const verify = (base: string, payload: CapturePayload) =>
  post<VerifyDecision>(base, '/api/v1/verify', payload)

export async function health(base: string): Promise<{ model_checksum: string }> {
  const resp = await fetch(`${base}/api/v1/health`)
  if (!resp.ok) throw new ServiceError(resp.status, 'health check failed')
  return resp.json()
}
