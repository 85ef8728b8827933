import { describe, expect, it } from "vitest";

import { fnv1a64, mockEmbed, splitTokens, tokenBucket } from "../src/hash.js";

const utf8 = new TextEncoder();

// frozen from the harness mock embedder; any drift breaks store parity
const FNV_CASES: Array<[string, bigint]> = [
  ["", 14695981039346656037n],
  ["a", 12638187200555641996n],
  ["taxi", 15672339713388457737n],
  ["café", 5253592154431032713n],
];

describe("fnv1a64", () => {
  it("matches the frozen reference hashes", () => {
    for (const [text, expected] of FNV_CASES) {
      expect(fnv1a64(utf8.encode(text))).toBe(expected);
    }
  });

  it("buckets tokens like the reference implementation", () => {
    const tokens = ["user:", "i", "want", "a", "taxi", "", "café"];
    expect(tokens.map((t) => tokenBucket(t, 64))).toEqual([24, 36, 47, 12, 9, 37, 9]);
  });
});

describe("splitTokens", () => {
  it("lowercases and splits on runs of whitespace", () => {
    expect(splitTokens("  User:  HELLO\tworld\n")).toEqual(["user:", "hello", "world"]);
  });

  it("treats non-breaking and ideographic spaces as separators", () => {
    expect(splitTokens("a b　c")).toEqual(["a", "b", "c"]);
  });

  it("returns nothing for blank text", () => {
    expect(splitTokens("   ")).toEqual([]);
  });
});

describe("mockEmbed", () => {
  it("reproduces the reference vector bit for bit", () => {
    const vec = mockEmbed("User: i want a taxi", 64);
    const nonzero: Array<[number, number]> = [];
    vec.forEach((x, i) => {
      if (x !== 0) nonzero.push([i, x]);
    });
    expect(nonzero).toEqual([
      [9, 0.4472135901451111],
      [12, 0.4472135901451111],
      [24, 0.4472135901451111],
      [36, 0.4472135901451111],
      [47, 0.4472135901451111],
    ]);
  });

  it("keeps repeated tokens as counts", () => {
    expect(Array.from(mockEmbed("ride to the station station", 8))).toEqual([
      0, 0, 0, 0.6666666865348816, 0.6666666865348816, 0, 0, 0.3333333432674408,
    ]);
  });

  it("is unit-normalized", () => {
    const vec = mockEmbed("one two three four five six", 32);
    let sum = 0;
    for (const x of vec) sum += x * x;
    expect(Math.abs(Math.sqrt(sum) - 1)).toBeLessThanOrEqual(1e-6);
  });

  it("embeds empty text as a unit vector", () => {
    const vec = mockEmbed("", 16);
    expect(vec[37 % 16]).toBe(1);
  });

  it("rejects dimensions below 8", () => {
    expect(() => mockEmbed("x", 4)).toThrow(/dimension must be >= 8/);
  });

  it("is deterministic", () => {
    const a = mockEmbed("determinism check", 128);
    const b = mockEmbed("determinism check", 128);
    expect(Array.from(a)).toEqual(Array.from(b));
  });
});
