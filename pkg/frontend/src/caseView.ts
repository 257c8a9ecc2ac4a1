/** Case view: one scan's score and label plus its nearest precedent cases.
 *
 * Query by upload or by existing scan id; changing k re-queries in place;
 * clicking a neighbor card pivots the view to that neighbor. At most one
 * query is in flight per view: responses carry a sequence number and stale
 * ones are discarded. All numbers shown are verbatim service values.
 */

import { CaseApi, ClassifyResponse, NeighborCard, ServiceError } from "./api.js";
import { showBanner } from "./banner.js";

export const MIN_K = 1;
export const MAX_K = 20;

interface ScoreInfo {
  score: number;
  threshold: number;
}

export class CaseView {
  private seq = 0;
  private k: number;
  private scanId: string | null = null;
  private scoreInfo: ScoreInfo | null = null;
  private label: string | null = null;

  private readonly banners: HTMLElement;
  private readonly body: HTMLElement;

  constructor(
    private readonly root: HTMLElement,
    private readonly api: CaseApi,
    initialK = 4,
  ) {
    this.k = initialK;
    this.root.classList.add("case-view");
    this.banners = document.createElement("div");
    this.banners.className = "banners";
    this.body = document.createElement("div");
    this.body.className = "case-body";
    this.root.replaceChildren(this.banners, this.body);
    this.renderEmpty();
  }

  get currentK(): number {
    return this.k;
  }

  get currentScanId(): string | null {
    return this.scanId;
  }

  /** Validate and apply a new k; invalid values never reach the service. */
  async setK(value: number): Promise<void> {
    if (!Number.isInteger(value) || value < MIN_K || value > MAX_K) {
      this.showValidation(`k must be an integer between ${MIN_K} and ${MAX_K}`);
      return;
    }
    this.clearValidation();
    this.k = value;
    if (this.scanId !== null) {
      await this.refresh();
    }
  }

  /** Open an existing scan as the query subject. */
  async showScan(scanId: string): Promise<void> {
    const mySeq = ++this.seq;
    try {
      const [meta, result] = await Promise.all([
        this.api.metadata(scanId),
        this.api.similar(scanId, this.k),
      ]);
      if (mySeq !== this.seq) return; // a newer query superseded this one
      this.scanId = scanId;
      this.label = meta.label;
      this.scoreInfo = null; // scores come only from /classify
      this.render(result.neighbors);
    } catch (err) {
      if (mySeq !== this.seq) return;
      this.fail(err);
    }
  }

  /** Classify an upload, then browse its precedents. */
  async showUpload(file: File): Promise<void> {
    const mySeq = ++this.seq;
    let classified: ClassifyResponse;
    try {
      classified = await this.api.classify(file);
    } catch (err) {
      if (mySeq !== this.seq) return;
      this.fail(err);
      return;
    }
    try {
      const result = await this.api.similar(classified.scan_id, this.k);
      if (mySeq !== this.seq) return;
      this.scanId = classified.scan_id;
      this.label = classified.label;
      this.scoreInfo = { score: classified.score, threshold: classified.threshold };
      this.render(result.neighbors);
    } catch (err) {
      if (mySeq !== this.seq) return;
      this.fail(err);
    }
  }

  private async refresh(): Promise<void> {
    if (this.scanId === null) return;
    const mySeq = ++this.seq;
    try {
      const result = await this.api.similar(this.scanId, this.k);
      if (mySeq !== this.seq) return;
      this.render(result.neighbors);
    } catch (err) {
      if (mySeq !== this.seq) return;
      this.fail(err);
    }
  }

  private fail(err: unknown): void {
    if (err instanceof ServiceError) {
      showBanner(this.banners, err.status, err.message);
    } else {
      showBanner(this.banners, 0, String(err));
    }
  }

  private showValidation(message: string): void {
    this.clearValidation();
    const note = document.createElement("div");
    note.className = "k-validation";
    note.textContent = message;
    this.root.appendChild(note);
  }

  private clearValidation(): void {
    this.root.querySelectorAll(".k-validation").forEach((el) => el.remove());
  }

  private renderEmpty(): void {
    const empty = document.createElement("p");
    empty.className = "empty-state";
    empty.textContent = "Upload a radiograph or open a scan id to browse similar cases.";
    this.body.replaceChildren(empty);
  }

  private render(neighbors: NeighborCard[]): void {
    const header = document.createElement("div");
    header.className = "case-header";

    const title = document.createElement("h2");
    title.className = "case-title";
    title.textContent = `Case ${this.scanId}`;
    header.appendChild(title);

    if (this.label !== null) {
      const badge = document.createElement("span");
      badge.className = `label-badge label-${this.label}`;
      badge.textContent = this.label;
      header.appendChild(badge);
    }

    const image = document.createElement("img");
    image.className = "case-image";
    image.alt = `scan ${this.scanId}`;
    image.src = this.api.imageUrl(this.scanId as string);

    const pieces: HTMLElement[] = [header, image];
    if (this.scoreInfo !== null) {
      pieces.push(this.renderScore(this.scoreInfo));
    }
    pieces.push(this.renderGallery(neighbors));
    this.body.replaceChildren(...pieces);
  }

  private renderScore(info: ScoreInfo): HTMLElement {
    const wrap = document.createElement("div");
    wrap.className = "score-row";

    const text = document.createElement("span");
    text.className = "score-value";
    text.textContent = `score ${info.score}`; // verbatim service value
    wrap.appendChild(text);

    const bar = document.createElement("div");
    bar.className = "score-bar";
    const fill = document.createElement("div");
    fill.className = "score-fill";
    fill.style.width = `${info.score * 100}%`;
    const thresholdMark = document.createElement("div");
    thresholdMark.className = "score-threshold";
    thresholdMark.style.left = `${info.threshold * 100}%`;
    thresholdMark.title = `threshold ${info.threshold}`;
    bar.appendChild(fill);
    bar.appendChild(thresholdMark);
    wrap.appendChild(bar);
    return wrap;
  }

  private renderGallery(neighbors: NeighborCard[]): HTMLElement {
    const gallery = document.createElement("div");
    gallery.className = "gallery";
    // Cards render in response order, which the service returns by
    // ascending distance.
    for (const neighbor of neighbors) {
      gallery.appendChild(this.renderCard(neighbor));
    }
    if (neighbors.length === 0) {
      const none = document.createElement("p");
      none.className = "empty-state";
      none.textContent = "No precedent cases in the index.";
      gallery.appendChild(none);
    }
    return gallery;
  }

  private renderCard(neighbor: NeighborCard): HTMLElement {
    const card = document.createElement("button");
    card.type = "button";
    card.className = "neighbor-card";
    card.dataset.scanId = neighbor.scan_id;

    const thumb = document.createElement("img");
    thumb.className = "neighbor-thumb";
    thumb.alt = `scan ${neighbor.scan_id}`;
    thumb.src = neighbor.image_url;
    card.appendChild(thumb);

    const id = document.createElement("div");
    id.className = "neighbor-id";
    id.textContent = neighbor.scan_id;
    card.appendChild(id);

    const badge = document.createElement("span");
    badge.className = `label-badge label-${neighbor.label}`;
    badge.textContent = neighbor.label;
    card.appendChild(badge);

    const distance = document.createElement("div");
    distance.className = "neighbor-distance";
    distance.textContent = `distance ${neighbor.distance}`; // verbatim
    card.appendChild(distance);

    card.addEventListener("click", () => {
      void this.showScan(neighbor.scan_id); // pivot: neighbor becomes the query
    });
    return card;
  }
}
