import { describe, expect, it } from "vitest";

import { ApiClient, FetchLike, QueryResponse, Rle } from "../src/api.js";
import { decodeRle, maskArea } from "../src/rle.js";
import { ViewerController } from "../src/state.js";

const FRAMES = 8;
const SIZE = [4, 4];
const PIXELS = 16;

function rleOf(bits: number[]): Rle {
  const counts: number[] = [];
  let current = 0;
  let run = 0;
  for (const bit of bits) {
    if (bit === current) {
      run += 1;
    } else {
      counts.push(run);
      current = bit;
      run = 1;
    }
  }
  counts.push(run);
  return { size: SIZE, counts };
}

const EMPTY_MASK = rleOf(new Array(PIXELS).fill(0));
const BOX_MASK = rleOf([0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0]);

function matchResponse(): QueryResponse {
  return {
    masks: Array.from({ length: FRAMES }, (_, t) => (t >= 4 ? BOX_MASK : EMPTY_MASK)),
    scores: [0.01, 0.02, 0.0, 0.01, 0.8, 0.82, 0.79, 0.81],
    selectedFrames: [4, 5, 6, 7],
    threshold: 0.4,
    level: "part",
    mode: "timeSensitive",
  };
}

function emptyResponse(): QueryResponse {
  return {
    masks: Array.from({ length: FRAMES }, () => EMPTY_MASK),
    scores: Array.from({ length: FRAMES }, () => null),
    selectedFrames: [],
    threshold: null,
    level: "part",
    mode: "timeAgnostic",
  };
}

/** Records every request; /query responses come from the provided factory. */
function mockApi(queryResponse: () => QueryResponse) {
  const calls: { url: string; method: string }[] = [];
  const fetchImpl: FetchLike = async (url, init) => {
    calls.push({ url, method: init?.method ?? "GET" });
    if (url.endsWith("/query")) {
      return { ok: true, status: 200, json: async () => queryResponse() };
    }
    if (url.endsWith("/meta")) {
      return {
        ok: true,
        status: 200,
        json: async () => ({
          frames: FRAMES,
          width: SIZE[1],
          height: SIZE[0],
          num_states: 3,
          levels: ["subpart", "part", "whole"],
        }),
      };
    }
    return { ok: false, status: 404, json: async () => ({ detail: "not found" }) };
  };
  const api = new ApiClient("", fetchImpl);
  return { api, calls };
}

function queryCallCount(calls: { url: string; method: string }[]): number {
  return calls.filter((c) => c.url.endsWith("/query")).length;
}

describe("rle decoding", () => {
  it("round-trips masks exactly", () => {
    const bits = [0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0];
    expect(Array.from(decodeRle(rleOf(bits)))).toEqual(bits);
    expect(maskArea(rleOf(bits))).toBe(4);
    expect(maskArea(EMPTY_MASK)).toBe(0);
  });

  it("rejects counts that do not cover the mask", () => {
    expect(() => decodeRle({ size: SIZE, counts: [3] })).toThrow(/cover/);
  });
});

describe("timeline highlighting", () => {
  it("equals the selectedFrames set exactly", async () => {
    const { api } = mockApi(matchResponse);
    const controller = new ViewerController(api, FRAMES);
    await controller.submitQuery("the cup is pouring", "timeSensitive");
    expect(controller.state.error).toBeNull();
    expect([...controller.highlightedFrames()].sort()).toEqual([4, 5, 6, 7]);
    for (let t = 0; t < FRAMES; t++) {
      expect(controller.frameSelected(t)).toBe(t >= 4);
    }
  });
});

describe("scrubbing", () => {
  it("issues zero additional /query calls", async () => {
    const { api, calls } = mockApi(matchResponse);
    const controller = new ViewerController(api, FRAMES);
    await controller.submitQuery("the cup is pouring", "timeSensitive");
    expect(queryCallCount(calls)).toBe(1);
    for (let pass = 0; pass < 3; pass++) {
      for (let t = 0; t < FRAMES; t++) {
        controller.scrub(t);
        controller.maskFor(t);
        controller.highlightedFrames();
        controller.plotScores();
      }
    }
    expect(queryCallCount(calls)).toBe(1);
  });

  it("clamps out-of-range frames", () => {
    const { api } = mockApi(matchResponse);
    const controller = new ViewerController(api, FRAMES);
    controller.scrub(999);
    expect(controller.state.frame).toBe(FRAMES - 1);
    controller.scrub(-3);
    expect(controller.state.frame).toBe(0);
  });
});

describe("empty results", () => {
  it("enters the no-match state instead of crashing", async () => {
    const { api } = mockApi(emptyResponse);
    const controller = new ViewerController(api, FRAMES);
    await controller.submitQuery("a unicorn", "timeAgnostic");
    expect(controller.state.noMatch).toBe(true);
    expect(controller.state.overlay).toBe("none");
    expect(controller.state.error).toBeNull();
    expect(controller.highlightedFrames().size).toBe(0);
  });

  it("surfaces service errors inline", async () => {
    const fetchImpl: FetchLike = async () => ({
      ok: false,
      status: 400,
      json: async () => ({ detail: "query target not found" }),
    });
    const controller = new ViewerController(new ApiClient("", fetchImpl), FRAMES);
    await controller.submitQuery("", "timeSensitive");
    expect(controller.state.error).toContain("query target not found");
    expect(controller.state.lastResult).toBeNull();
  });
});
