// Keystroke capture state machine, DOM-free so it can be tested directly.
//
// key-down opens an event (auto-repeat suppressed), the matching key-up
// closes it. Unmatched key-ups are dropped and counted. Keys still held at
// submit are completed with release = submit time. Times come from a
// monotonic high-resolution clock, reported relative to the first press and
// rounded to 0.1 ms.

export interface CapturedEvent {
  key_code: number
  press_ms: number
  release_ms: number
}

export interface CapturePayload {
  user_id: string
  events: CapturedEvent[]
}

export interface CaptureDiagnostics {
  suppressedRepeats: number
  unmatchedReleases: number
}

const round1 = (t: number) => Math.round(t * 10) / 10

/** Map a keyboard event to an extended-ASCII style code in [0, 255]. */
export function keyCodeOf(key: string, legacyKeyCode?: number): number {
  if (legacyKeyCode !== undefined && legacyKeyCode > 0) {
    return Math.min(Math.max(legacyKeyCode, 0), 255)
  }
  if (key.length === 1) {
    return Math.min(key.charCodeAt(0), 255)
  }
  // non-character keys without a legacy code: fall back to common values
  const special: Record<string, number> = {
    Enter: 13, Tab: 9, Backspace: 8, Shift: 16, Control: 17, Alt: 18,
    Meta: 91, CapsLock: 20, ' ': 32, ArrowLeft: 37, ArrowUp: 38,
    ArrowRight: 39, ArrowDown: 40, Delete: 46, Escape: 27,
  }
  return special[key] ?? 0
}

export class CaptureRecorder {
  private open = new Map<string, { code: number; t: number }>()
  private events: CapturedEvent[] = []
  private origin: number | null = null
  private repeats = 0
  private unmatched = 0

  /** Completed plus currently-held events; the submit gate uses this. */
  get eventCount(): number {
    return this.events.length + this.open.size
  }

  get diagnostics(): CaptureDiagnostics {
    return { suppressedRepeats: this.repeats, unmatchedReleases: this.unmatched }
  }

  keyDown(key: string, code: number, t: number, repeat = false): void {
    if (repeat || this.open.has(key)) {
      this.repeats += 1
      return
    }
    if (this.origin === null) this.origin = t
    this.open.set(key, { code, t })
  }

  keyUp(key: string, t: number): void {
    const entry = this.open.get(key)
    if (!entry) {
      this.unmatched += 1
      return
    }
    this.open.delete(key)
    this.push(entry.code, entry.t, t)
  }

  private push(code: number, down: number, up: number): void {
    const base = this.origin ?? down
    this.events.push({
      key_code: code,
      press_ms: round1(down - base),
      release_ms: round1(Math.max(up, down) - base),
    })
  }

  /** Close held keys at submit time and return events ordered by press. */
  finalize(t: number): CapturedEvent[] {
    for (const [, entry] of this.open) {
      this.push(entry.code, entry.t, Math.max(t, entry.t))
    }
    this.open.clear()
    const out = [...this.events].sort((a, b) => a.press_ms - b.press_ms)
    return out
  }

  reset(): void {
    this.open.clear()
    this.events = []
    this.origin = null
    this.repeats = 0
    this.unmatched = 0
  }
}

export function buildPayload(userId: string, events: CapturedEvent[]): CapturePayload {
  return { user_id: userId, events }
}
