// Pure view-model helpers: testable without a DOM.

import type { CaptureDiagnostics } from './capture.js'
import type { EnrollResponse, VerifyDecision } from './client.js'

export const ENROLL_TARGET = 5

export function renderEnrollProgress(r: EnrollResponse): string {
  const n = Math.min(r.sessions_enrolled, ENROLL_TARGET)
  return `${n} of ${ENROLL_TARGET} sessions enrolled for ${r.user_id}`
}

export function renderDecision(d: VerifyDecision): string {
  const verdict = d.accepted ? 'ACCEPTED' : 'REJECTED'
  return `${verdict} — distance ${d.distance.toFixed(4)} vs threshold ` +
    `${d.threshold.toFixed(4)} (model ${d.model_checksum.slice(0, 8)})`
}

export function renderDiagnostics(d: CaptureDiagnostics): string {
  return `auto-repeats suppressed: ${d.suppressedRepeats}, ` +
    `unmatched releases: ${d.unmatchedReleases}`
}

export function canSubmit(eventCount: number, userId: string): boolean {
  return eventCount >= 2 && userId.trim().length > 0
}
