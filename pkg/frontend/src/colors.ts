/**
 * Deterministic per-object colors and the tag palette.
 *
 * Object colors come from a stable string hash of the object id, so the
 * same id always renders in the same color across sessions and reloads.
 * Tag colors are fixed by kind: failure modes red, distribution badges
 * blue, quality warnings amber.
 */

// FNV-1a, 32 bit. Stable across platforms; good enough spread for hues.
export function hashString(s: string): number {
  let h = 0x811c9dc5;
  for (let i = 0; i < s.length; i++) {
    h ^= s.charCodeAt(i);
    h = Math.imul(h, 0x01000193) >>> 0;
  }
  return h >>> 0;
}

/** Stable HSL color for an object id. */
export function colorForObject(id: string): string {
  const hue = hashString(id) % 360;
  return `hsl(${hue}, 70%, 45%)`;
}

export type TagKind = 'error' | 'info' | 'warning' | 'ok';

const TAG_KINDS: Record<string, TagKind> = {
  CD: 'ok',
  FD: 'error',
  MD: 'error',
  UD: 'error',
  ID: 'info',
  OOD: 'info',
  FTD: 'warning',
  CQS: 'warning',
  CQB: 'warning',
};

export function tagKind(tag: string): TagKind {
  return TAG_KINDS[tag] ?? 'info';
}

// Hover tooltips spell out every acronym in full.
export const TAG_NAMES: Record<string, string> = {
  CD: 'Correct detection',
  FD: 'False detection: matched, but the label is wrong',
  MD: 'Missing detection: the annotation went unmatched',
  UD: 'Unnecessary detection: the prediction went unmatched',
  ID: 'In-distribution: the annotated label is in the model class list',
  OOD: 'Out-of-distribution: the annotated label is outside the model class list',
  FTD: 'Failing to detect: the model returned nothing for this image',
  CQS: 'Critical quality of score: confidence below the floor',
  CQB: 'Critical quality of box: matched box overlap below the floor',
};

export function tagTooltip(tag: string): string {
  return TAG_NAMES[tag] ?? tag;
}
