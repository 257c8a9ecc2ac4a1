/** Interactive 2-D embedding map: labeled scatter with class toggles.
 *
 * Clicking a point opens that scan in the case view (via onSelect). The
 * view draws exactly the coordinates the service returns.
 */

import { CaseApi, ProjectionPoint, ServiceError } from "./api.js";
import { showBanner } from "./banner.js";

const SVG_NS = "http://www.w3.org/2000/svg";
const VIEW_SIZE = 640;
const MARGIN = 24;

export class ProjectionView {
  private points: ProjectionPoint[] = [];
  private hiddenLabels = new Set<string>();
  private readonly banners: HTMLElement;
  private readonly body: HTMLElement;

  constructor(
    private readonly root: HTMLElement,
    private readonly api: CaseApi,
    private readonly onSelect: (scanId: string) => void,
  ) {
    this.root.classList.add("projection-view");
    this.banners = document.createElement("div");
    this.banners.className = "banners";
    this.body = document.createElement("div");
    this.body.className = "projection-body";
    this.root.replaceChildren(this.banners, this.body);
  }

  async load(): Promise<void> {
    try {
      this.points = await this.api.projection();
    } catch (err) {
      if (err instanceof ServiceError && err.status === 404) {
        this.renderEmptyState();
        return;
      }
      if (err instanceof ServiceError) {
        showBanner(this.banners, err.status, err.message);
      } else {
        showBanner(this.banners, 0, String(err));
      }
      return;
    }
    this.render();
  }

  toggleLabel(label: string): void {
    if (this.hiddenLabels.has(label)) {
      this.hiddenLabels.delete(label);
    } else {
      this.hiddenLabels.add(label);
    }
    this.applyVisibility();
  }

  private renderEmptyState(): void {
    const empty = document.createElement("p");
    empty.className = "empty-state";
    empty.textContent =
      "No projection has been computed yet. Run the `project` pipeline stage, then reload.";
    this.body.replaceChildren(empty);
  }

  private labels(): string[] {
    return [...new Set(this.points.map((p) => p.label))].sort();
  }

  private render(): void {
    if (this.points.length === 0) {
      this.renderEmptyState();
      return;
    }
    const xs = this.points.map((p) => p.x);
    const ys = this.points.map((p) => p.y);
    const xMin = Math.min(...xs);
    const xMax = Math.max(...xs);
    const yMin = Math.min(...ys);
    const yMax = Math.max(...ys);
    const xSpan = xMax - xMin || 1;
    const ySpan = yMax - yMin || 1;
    const scale = (VIEW_SIZE - 2 * MARGIN);

    const svg = document.createElementNS(SVG_NS, "svg");
    svg.setAttribute("viewBox", `0 0 ${VIEW_SIZE} ${VIEW_SIZE}`);
    svg.setAttribute("class", "projection-svg");

    for (const point of this.points) {
      const circle = document.createElementNS(SVG_NS, "circle");
      circle.setAttribute("cx", String(MARGIN + ((point.x - xMin) / xSpan) * scale));
      circle.setAttribute("cy", String(MARGIN + ((point.y - yMin) / ySpan) * scale));
      circle.setAttribute("r", "4");
      circle.setAttribute("class", `point point-${point.label}`);
      circle.setAttribute("data-scan-id", point.scan_id);
      circle.setAttribute("data-label", point.label);
      const title = document.createElementNS(SVG_NS, "title");
      title.textContent = `${point.scan_id} (${point.label})`;
      circle.appendChild(title);
      circle.addEventListener("click", () => this.onSelect(point.scan_id));
      svg.appendChild(circle);
    }

    const legend = document.createElement("div");
    legend.className = "legend";
    for (const label of this.labels()) {
      const item = document.createElement("button");
      item.type = "button";
      item.className = `legend-item legend-${label}`;
      item.dataset.label = label;
      item.textContent = label;
      item.setAttribute("aria-pressed", "true");
      item.addEventListener("click", () => {
        this.toggleLabel(label);
        item.setAttribute("aria-pressed", this.hiddenLabels.has(label) ? "false" : "true");
      });
      legend.appendChild(item);
    }

    this.body.replaceChildren(legend, svg);
    this.applyVisibility();
  }

  private applyVisibility(): void {
    this.body.querySelectorAll<SVGCircleElement>("circle.point").forEach((circle) => {
      const label = circle.getAttribute("data-label") ?? "";
      circle.style.display = this.hiddenLabels.has(label) ? "none" : "";
    });
  }
}
