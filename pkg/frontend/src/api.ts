// Typed client for the studio service. `fetchFn` is injectable for tests.

export interface PoseEntry {
  id: string;
  pose_png_base64: string;
  thumbnail_png_base64: string;
}

export interface ParsingResponse {
  session_id: string;
  parsing_png_base64: string;
  attributes: Record<string, number>;
}

export interface ImageResponse {
  image_png_base64: string;
  provenance: Record<string, unknown>;
}

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(detail);
  }
}

type FetchFn = typeof fetch;

async function post<T>(fetchFn: FetchFn, url: string, body: unknown): Promise<T> {
  const response = await fetchFn(url, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(body),
  });
  const payload = await response.json().catch(() => ({}));
  if (!response.ok) {
    const detail = (payload as { detail?: string }).detail ?? `HTTP ${response.status}`;
    throw new ApiError(response.status, detail);
  }
  return payload as T;
}

export class StudioClient {
  constructor(private base: string, private fetchFn: FetchFn = fetch) {}

  async listPoses(): Promise<PoseEntry[]> {
    const response = await this.fetchFn(`${this.base}/api/poses`);
    if (!response.ok) {
      throw new ApiError(response.status, `HTTP ${response.status}`);
    }
    return ((await response.json()) as { poses: PoseEntry[] }).poses;
  }

  requestParsing(req: {
    poseId?: string;
    posePngBase64?: string;
    shapeText: string;
    seed: number;
  }): Promise<ParsingResponse> {
    return post<ParsingResponse>(this.fetchFn, `${this.base}/api/parsing`, {
      pose_id: req.poseId ?? null,
      pose_png_base64: req.posePngBase64 ?? null,
      shape_text: req.shapeText,
      seed: req.seed,
    });
  }

  requestImage(req: {
    sessionId?: string;
    parsingPngBase64?: string;
    textureText: string;
    seed: number;
  }): Promise<ImageResponse> {
    return post<ImageResponse>(this.fetchFn, `${this.base}/api/image`, {
      session_id: req.sessionId ?? null,
      parsing_png_base64: req.parsingPngBase64 ?? null,
      texture_text: req.textureText,
      seed: req.seed,
    });
  }
}
