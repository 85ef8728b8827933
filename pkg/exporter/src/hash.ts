/**
 * Deterministic bag-of-tokens encoder, bit-compatible with the harness
 * mock embedder: 64-bit FNV-1a bucket hashing over lowercased
 * whitespace-split tokens, L2-normalized counts rounded to float32.
 * Counts are small integers, so the float64 norm and division are exact
 * IEEE operations on both sides and the float32 results agree bitwise.
 */

const FNV_OFFSET = 0xcbf29ce484222325n;
const FNV_PRIME = 0x100000001b3n;
const MASK64 = (1n << 64n) - 1n;

const utf8 = new TextEncoder();

export function fnv1a64(data: Uint8Array): bigint {
  let h = FNV_OFFSET;
  for (const byte of data) {
    h = ((h ^ BigInt(byte)) * FNV_PRIME) & MASK64;
  }
  return h;
}

export function tokenBucket(token: string, dimension: number): number {
  return Number(fnv1a64(utf8.encode(token)) % BigInt(dimension));
}

// Python str.split() whitespace; JS \s would add U+FEFF and drop
// the separator controls 1C-1F and 0x85
const PY_WHITESPACE = new RegExp(
  "[\\t\\n\\x0b\\x0c\\r\\x1c-\\x1f \\x85\\xa0\\u1680\\u2000-\\u200a" +
    "\\u2028\\u2029\\u202f\\u205f\\u3000]+",
  "u",
);

export function splitTokens(text: string): string[] {
  return text
    .toLowerCase()
    .split(PY_WHITESPACE)
    .filter((token) => token.length > 0);
}

export function mockEmbed(text: string, dimension: number): Float32Array {
  if (dimension < 8) {
    throw new RangeError(`mock embedding dimension must be >= 8, got ${dimension}`);
  }
  const counts = new Float64Array(dimension);
  const tokens = splitTokens(text);
  for (const token of tokens.length ? tokens : [""]) {
    const bucket = tokenBucket(token, dimension);
    counts[bucket] = counts[bucket]! + 1;
  }
  let sumSquares = 0;
  for (const c of counts) sumSquares += c * c;
  const norm = Math.sqrt(sumSquares);
  const out = new Float32Array(dimension);
  for (let i = 0; i < dimension; i++) out[i] = counts[i]! / norm;
  return out;
}
