// Short English prompt sentences: at least 3 words, at most 70 characters.

export const PROMPTS: string[] = [
  'the quick brown fox jumps over the lazy dog',
  'typing rhythm is a surprisingly personal signature',
  'please write this sentence as fast as you can',
  'a cup of coffee helps on a slow monday morning',
  'the train leaves in about fifteen minutes',
  'she sold rare books near the old harbour',
  'nobody expected the meeting to end this early',
  'we walked along the river until it got dark',
  'his password habits were famously terrible',
  'the weather forecast promised sun all week',
  'every keyboard feels different after a while',
  'send me the final draft before noon tomorrow',
]

export function randomPrompt(exclude?: string): string {
  let pick = PROMPTS[Math.floor(Math.random() * PROMPTS.length)]
  if (exclude && PROMPTS.length > 1) {
    while (pick === exclude) {
      pick = PROMPTS[Math.floor(Math.random() * PROMPTS.length)]
    }
  }
  return pick
}
