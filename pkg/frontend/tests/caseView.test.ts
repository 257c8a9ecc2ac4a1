import { beforeEach, describe, expect, it } from "vitest";

import { ServiceError } from "../src/api.js";
import { CaseView } from "../src/caseView.js";
import { MockApi, flush } from "./mockApi.js";

let root: HTMLElement;
let api: MockApi;
let view: CaseView;

beforeEach(() => {
  document.body.innerHTML = "";
  root = document.createElement("div");
  document.body.appendChild(root);
  api = new MockApi();
  view = new CaseView(root, api, 4);
});

function cardIds(): string[] {
  return [...root.querySelectorAll<HTMLElement>(".neighbor-card")].map(
    (el) => el.dataset.scanId ?? "",
  );
}

function cardDistances(): string[] {
  return [...root.querySelectorAll(".neighbor-distance")].map((el) => el.textContent ?? "");
}

describe("case view gallery", () => {
  it("renders neighbors in the service's ascending-distance order", async () => {
    await view.showScan("test_scan");
    expect(cardIds()).toEqual(["train_a", "train_b", "train_c", "train_d"]);
    expect(cardDistances()).toEqual([
      "distance 0.51",
      "distance 0.55",
      "distance 0.9",
      "distance 1.2",
    ]);
  });

  it("renders response order verbatim even if the mock is unsorted", async () => {
    api.neighborResponse.neighbors = [
      { scan_id: "n2", label: "negative", distance: 2.0, image_url: "/scans/n2/image" },
      { scan_id: "n1", label: "positive", distance: 1.0, image_url: "/scans/n1/image" },
    ];
    await view.showScan("q");
    // The gallery must mirror the response exactly, never re-sort.
    expect(cardIds()).toEqual(["n2", "n1"]);
  });

  it("shows the query's label badge from metadata", async () => {
    await view.showScan("pos_scan");
    const badge = root.querySelector(".case-header .label-badge");
    expect(badge?.textContent).toBe("positive");
  });
});

describe("k handling", () => {
  it("re-queries with the new k without a reload", async () => {
    await view.showScan("q");
    expect(api.similarCalls).toEqual([{ scanId: "q", k: 4 }]);
    await view.setK(2);
    expect(api.similarCalls).toEqual([
      { scanId: "q", k: 4 },
      { scanId: "q", k: 2 },
    ]);
    expect(cardIds()).toHaveLength(2);
  });

  it("k = 0 is rejected client-side with no request", async () => {
    await view.showScan("q");
    const before = api.similarCalls.length;
    await view.setK(0);
    expect(api.similarCalls).toHaveLength(before);
    expect(root.querySelector(".k-validation")?.textContent).toContain("between 1 and 20");
  });

  it("k above the bound is rejected client-side", async () => {
    await view.showScan("q");
    const before = api.similarCalls.length;
    await view.setK(21);
    expect(api.similarCalls).toHaveLength(before);
    expect(root.querySelector(".k-validation")).not.toBeNull();
  });

  it("a valid k clears the validation note", async () => {
    await view.showScan("q");
    await view.setK(0);
    expect(root.querySelector(".k-validation")).not.toBeNull();
    await view.setK(3);
    expect(root.querySelector(".k-validation")).toBeNull();
  });
});

describe("neighbor pivoting", () => {
  it("clicking a card issues a new query with that card's scan id", async () => {
    await view.showScan("q");
    const second = root.querySelectorAll<HTMLButtonElement>(".neighbor-card")[1];
    second.click();
    await flush();
    expect(api.similarCalls.at(-1)).toEqual({ scanId: "train_b", k: 4 });
    expect(root.querySelector(".case-title")?.textContent).toBe("Case train_b");
  });
});

describe("upload flow", () => {
  it("classifies then shows the verbatim score with a threshold marker", async () => {
    const file = new File([new Uint8Array([1, 2, 3])], "scan.png", { type: "image/png" });
    await view.showUpload(file);
    expect(api.classifyCalls).toEqual(["scan.png"]);
    // Score is shown exactly as the service returned it.
    expect(root.querySelector(".score-value")?.textContent).toBe("score 0.123456789");
    expect(root.querySelector(".score-threshold")).not.toBeNull();
    expect(api.similarCalls.at(-1)).toEqual({ scanId: "upload-0001", k: 4 });
    expect(root.querySelector(".label-badge")?.textContent).toBe("negative");
  });
});

describe("stale responses", () => {
  it("discards a slow response that a newer query superseded", async () => {
    api.pendingSimilar = [];
    const first = view.showScan("slow_scan");
    await flush();
    const second = view.showScan("fast_scan");
    await flush();
    expect(api.pendingSimilar).toHaveLength(2);

    // Resolve the newer query first, then the stale one.
    api.pendingSimilar[1].resolve({
      query_id: "fast_scan",
      k: 1,
      neighbors: [
        { scan_id: "fresh", label: "negative", distance: 0.1, image_url: "/scans/fresh/image" },
      ],
    });
    await second;
    api.pendingSimilar[0].resolve({
      query_id: "slow_scan",
      k: 1,
      neighbors: [
        { scan_id: "stale", label: "positive", distance: 9.9, image_url: "/scans/stale/image" },
      ],
    });
    await first;
    expect(cardIds()).toEqual(["fresh"]);
    expect(root.querySelector(".case-title")?.textContent).toBe("Case fast_scan");
  });
});

describe("error banners", () => {
  it("surfaces service errors as dismissible banners with the status code", async () => {
    api.similarError = new ServiceError(404, "unknown scan nope");
    await view.showScan("nope");
    const banner = root.querySelector(".banner");
    expect(banner?.textContent).toContain("Error 404");
    expect(banner?.textContent).toContain("unknown scan nope");
    (banner?.querySelector(".banner-dismiss") as HTMLButtonElement).click();
    expect(root.querySelector(".banner")).toBeNull();
  });
});
