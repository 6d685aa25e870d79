// DOM wiring: capture keystrokes while the user types the prompt, submit to
// the service, show progress/decisions. Capture state resets after a
// successful submit; on errors the session is kept for resubmission.

import { buildPayload, CaptureRecorder, keyCodeOf } from './capture.js'
import { enroll, resolveBaseUrl, ServiceError, verify } from './client.js'
import { randomPrompt } from './prompts.js'
import { canSubmit, renderDecision, renderDiagnostics, renderEnrollProgress } from './view.js'

const $ = <T extends HTMLElement>(id: string) => document.getElementById(id) as T

const recorder = new CaptureRecorder()
const baseUrl = resolveBaseUrl()
let prompt = randomPrompt()

function refresh(): void {
  $('prompt').textContent = prompt
  const user = ($('user') as HTMLInputElement).value
  ;($('submit') as HTMLButtonElement).disabled = !canSubmit(recorder.eventCount, user)
  $('diag').textContent = renderDiagnostics(recorder.diagnostics)
  $('count').textContent = `${recorder.eventCount} keystrokes captured`
}

function resetSession(): void {
  recorder.reset()
  ;($('typing') as HTMLTextAreaElement).value = ''
  prompt = randomPrompt(prompt)
  refresh()
}

function showError(message: string): void {
  const banner = $('error')
  banner.textContent = `${message} — session kept, fix and resubmit`
  banner.hidden = false
}

async function submit(): Promise<void> {
  const mode = ($('mode') as HTMLSelectElement).value
  const user = ($('user') as HTMLInputElement).value.trim()
  const events = recorder.finalize(performance.now())
  const payload = buildPayload(user, events)
  $('error').hidden = true
  try {
    if (mode === 'enroll') {
      const r = await enroll(baseUrl, payload)
      $('result').textContent = renderEnrollProgress(r)
    } else {
      const d = await verify(baseUrl, payload)
      $('result').textContent = renderDecision(d)
    }
    resetSession()
  } catch (err) {
    // finalize() closed held keys; the completed events stay submittable
    showError(err instanceof ServiceError && err.status > 0
      ? `service said ${err.status}: ${err.message}`
      : `network error: ${err instanceof Error ? err.message : err}`)
  }
}

export function init(): void {
  const typing = $('typing') as HTMLTextAreaElement
  typing.addEventListener('keydown', (e: KeyboardEvent) => {
    recorder.keyDown(e.key, keyCodeOf(e.key, e.keyCode), performance.now(), e.repeat)
    refresh()
  })
  typing.addEventListener('keyup', (e: KeyboardEvent) => {
    recorder.keyUp(e.key, performance.now())
    refresh()
  })
  $('submit').addEventListener('click', () => void submit())
  $('reset').addEventListener('click', resetSession)
  ;($('user') as HTMLInputElement).addEventListener('input', refresh)
  $('service-url').textContent = baseUrl
  refresh()
}

if (typeof document !== 'undefined' && document.readyState !== 'loading') {
  init()
} else if (typeof document !== 'undefined') {
  document.addEventListener('DOMContentLoaded', init)
}
