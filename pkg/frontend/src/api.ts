/** Typed client for the classification and similar-case service.
 *
 * The UI never computes on scores, distances, or embeddings: everything it
 * shows is a verbatim field from one of these responses.
 */

export interface ClassifyResponse {
  scan_id: string;
  score: number;
  label: string;
  threshold: number;
  model_id: string | null;
}

export interface NeighborCard {
  scan_id: string;
  label: string;
  distance: number;
  image_url: string;
}

export interface NeighborResult {
  query_id: string | null;
  k: number;
  neighbors: NeighborCard[];
}

export interface ProjectionPoint {
  scan_id: string;
  label: string;
  x: number;
  y: number;
}

export interface ScanMetadata {
  scan_id: string;
  source: string;
  label: string | null;
  patient_id: string | null;
  view: string | null;
  machine_id: string | null;
  image_url: string;
  has_embedding: boolean;
}

export class ServiceError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ServiceError";
  }
}

/** The surface the views depend on; tests substitute a mock. */
export interface CaseApi {
  classify(file: File): Promise<ClassifyResponse>;
  similar(scanId: string, k: number): Promise<NeighborResult>;
  metadata(scanId: string): Promise<ScanMetadata>;
  projection(): Promise<ProjectionPoint[]>;
  imageUrl(scanId: string): string;
}

async function errorFrom(resp: Response): Promise<ServiceError> {
  let detail = resp.statusText || "request failed";
  try {
    const body = await resp.json();
    if (body && typeof body.detail === "string") detail = body.detail;
  } catch {
    /* non-JSON error body */
  }
  return new ServiceError(resp.status, detail);
}

export class ApiClient implements CaseApi {
  constructor(private readonly baseUrl: string = "") {}

  private async getJson<T>(path: string): Promise<T> {
    const resp = await fetch(`${this.baseUrl}${path}`);
    if (!resp.ok) throw await errorFrom(resp);
    return (await resp.json()) as T;
  }

  async classify(file: File): Promise<ClassifyResponse> {
    const form = new FormData();
    form.append("file", file, file.name);
    const resp = await fetch(`${this.baseUrl}/classify`, { method: "POST", body: form });
    if (!resp.ok) throw await errorFrom(resp);
    return (await resp.json()) as ClassifyResponse;
  }

  async similar(scanId: string, k: number): Promise<NeighborResult> {
    return this.getJson<NeighborResult>(
      `/scans/${encodeURIComponent(scanId)}/similar?k=${k}`,
    );
  }

  async metadata(scanId: string): Promise<ScanMetadata> {
    return this.getJson<ScanMetadata>(`/scans/${encodeURIComponent(scanId)}`);
  }

  async projection(): Promise<ProjectionPoint[]> {
    const body = await this.getJson<{ points: ProjectionPoint[] }>("/projection");
    return body.points;
  }

  imageUrl(scanId: string): string {
    return `${this.baseUrl}/scans/${encodeURIComponent(scanId)}/image`;
  }
}
