import { describe, expect, it, vi } from "vitest";

import { ApiError, StudioClient } from "../src/api.js";

function fakeFetch(status: number, payload: unknown) {
  return vi.fn(async () => ({
    ok: status >= 200 && status < 300,
    status,
    json: async () => payload,
  })) as unknown as typeof fetch;
}

describe("StudioClient", () => {
  it("shapes the parsing request body", async () => {
    const fetchFn = fakeFetch(200, {
      session_id: "s1",
      parsing_png_base64: "QUJD",
      attributes: { sleeve_length: 2 },
    });
    const client = new StudioClient("http://svc", fetchFn);
    const out = await client.requestParsing({ poseId: "pose-000", shapeText: "long sleeves", seed: 3 });
    expect(out.session_id).toBe("s1");
    const [url, init] = (fetchFn as any).mock.calls[0];
    expect(url).toBe("http://svc/api/parsing");
    expect(JSON.parse(init.body)).toEqual({
      pose_id: "pose-000",
      pose_png_base64: null,
      shape_text: "long sleeves",
      seed: 3,
    });
  });

  it("shapes the image request with a parsing override", async () => {
    const fetchFn = fakeFetch(200, { image_png_base64: "img", provenance: { seed: 4 } });
    const client = new StudioClient("", fetchFn);
    const out = await client.requestImage({
      sessionId: "s1",
      parsingPngBase64: "QUJD",
      textureText: "plaid shirt",
      seed: 4,
    });
    expect(out.provenance.seed).toBe(4);
    const [url, init] = (fetchFn as any).mock.calls[0];
    expect(url).toBe("/api/image");
    expect(JSON.parse(init.body)).toEqual({
      session_id: "s1",
      parsing_png_base64: "QUJD",
      texture_text: "plaid shirt",
      seed: 4,
    });
  });

  it("surfaces server error details as ApiError", async () => {
    const fetchFn = fakeFetch(400, { detail: "no content tokens" });
    const client = new StudioClient("", fetchFn);
    await expect(
      client.requestParsing({ poseId: "pose-000", shapeText: "the the", seed: 0 }),
    ).rejects.toThrowError(ApiError);
    await expect(
      client.requestParsing({ poseId: "pose-000", shapeText: "the the", seed: 0 }),
    ).rejects.toThrow("no content tokens");
  });

  it("lists poses", async () => {
    const fetchFn = fakeFetch(200, {
      poses: [{ id: "pose-000", pose_png_base64: "a", thumbnail_png_base64: "b" }],
    });
    const client = new StudioClient("http://svc", fetchFn);
    const poses = await client.listPoses();
    expect(poses.length).toBe(1);
    expect(poses[0].id).toBe("pose-000");
  });
});
