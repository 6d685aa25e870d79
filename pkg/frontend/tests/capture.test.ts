import { describe, expect, it } from 'vitest'

import { buildPayload, CaptureRecorder, keyCodeOf } from '../src/capture.js'
import { canSubmit, renderDecision, renderDiagnostics, renderEnrollProgress } from '../src/view.js'

describe('CaptureRecorder', () => {
  it('captures ordered events for plain typing', () => {
    const r = new CaptureRecorder()
    r.keyDown('a', 97, 100.0)
    r.keyUp('a', 190.13)
    r.keyDown('b', 98, 250.0)
    r.keyUp('b', 361.27)
    const events = r.finalize(400.0)
    expect(events).toHaveLength(2)
    expect(events[0]).toEqual({ key_code: 97, press_ms: 0, release_ms: 90.1 })
    expect(events[1]).toEqual({ key_code: 98, press_ms: 150, release_ms: 261.3 })
  })

  it('suppresses auto-repeat to a single event', () => {
    const r = new CaptureRecorder()
    r.keyDown('a', 97, 0)
    r.keyDown('a', 97, 35, true)    // browser repeat flag
    r.keyDown('a', 97, 70, true)
    r.keyDown('a', 97, 105)         // some browsers omit the flag; still held
    r.keyUp('a', 140)
    const events = r.finalize(200)
    expect(events).toHaveLength(1)
    expect(r.diagnostics.suppressedRepeats).toBe(3)
  })

  it('drops unmatched key-ups and counts them', () => {
    const r = new CaptureRecorder()
    r.keyUp('x', 10)
    r.keyDown('a', 97, 20)
    r.keyUp('a', 80)
    expect(r.finalize(100)).toHaveLength(1)
    expect(r.diagnostics.unmatchedReleases).toBe(1)
  })

  it('completes still-held keys at submit time', () => {
    const r = new CaptureRecorder()
    r.keyDown('a', 97, 0)
    r.keyUp('a', 50)
    r.keyDown('b', 98, 60)          // never released
    const events = r.finalize(130)
    expect(events).toHaveLength(2)
    expect(events[1].release_ms).toBe(130)
  })

  it('keeps rollover ordering by press time with interleaved releases', () => {
    const r = new CaptureRecorder()
    r.keyDown('a', 97, 0)
    r.keyDown('b', 98, 40)          // pressed before a releases
    r.keyUp('a', 90)
    r.keyUp('b', 95)
    const events = r.finalize(120)
    expect(events.map(e => e.key_code)).toEqual([97, 98])
    const presses = events.map(e => e.press_ms)
    expect([...presses].sort((x, y) => x - y)).toEqual(presses)
  })

  it('never yields release before press', () => {
    const r = new CaptureRecorder()
    r.keyDown('a', 97, 10)
    r.keyUp('a', 9.96)              // clock jitter guard
    for (const e of r.finalize(20)) {
      expect(e.release_ms).toBeGreaterThanOrEqual(e.press_ms)
    }
  })

  it('reset clears state and diagnostics', () => {
    const r = new CaptureRecorder()
    r.keyDown('a', 97, 0)
    r.keyUp('x', 5)
    r.reset()
    expect(r.eventCount).toBe(0)
    expect(r.diagnostics).toEqual({ suppressedRepeats: 0, unmatchedReleases: 0 })
  })
})

describe('keyCodeOf', () => {
  it('prefers the legacy keyCode and clamps to [0, 255]', () => {
    expect(keyCodeOf('a', 65)).toBe(65)
    expect(keyCodeOf('§', 300)).toBe(255)
    expect(keyCodeOf('q')).toBe(113)
    expect(keyCodeOf('Enter')).toBe(13)
    expect(keyCodeOf('Backspace', 8)).toBe(8)
  })
})

describe('view-model', () => {
  it('gates submission on two events and a user id', () => {
    expect(canSubmit(1, 'u')).toBe(false)
    expect(canSubmit(2, '')).toBe(false)
    expect(canSubmit(2, 'u')).toBe(true)
  })

  it('renders enrolment progress', () => {
    expect(renderEnrollProgress({ user_id: 'ann', sessions_enrolled: 3 }))
      .toBe('3 of 5 sessions enrolled for ann')
  })

  it('renders decisions both ways', () => {
    const base = { distance: 0.1234, threshold: 0.5, model_checksum: 'abcdef0123456789' }
    expect(renderDecision({ ...base, accepted: true })).toContain('ACCEPTED')
    expect(renderDecision({ ...base, accepted: false, distance: 0.9 })).toContain('REJECTED')
  })

  it('renders diagnostics counts', () => {
    expect(renderDiagnostics({ suppressedRepeats: 2, unmatchedReleases: 1 }))
      .toContain('auto-repeats suppressed: 2')
  })
})

describe('payload', () => {
  it('wraps events with the user id', () => {
    const p = buildPayload('u1', [{ key_code: 97, press_ms: 0, release_ms: 50 }])
    expect(p).toEqual({ user_id: 'u1', events: [{ key_code: 97, press_ms: 0, release_ms: 50 }] })
  })
})
