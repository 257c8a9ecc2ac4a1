/** Page wiring: query controls, the case view, and the projection map. */

import { ApiClient, CaseApi } from "./api.js";
import { CaseView, MAX_K, MIN_K } from "./caseView.js";
import { ProjectionView } from "./projectionView.js";

export function initApp(root: HTMLElement, api: CaseApi): {
  caseView: CaseView;
  projectionView: ProjectionView;
} {
  root.replaceChildren();

  const controls = document.createElement("form");
  controls.className = "controls";
  controls.addEventListener("submit", (e) => e.preventDefault());

  const scanInput = document.createElement("input");
  scanInput.type = "text";
  scanInput.placeholder = "scan id";
  scanInput.className = "scan-input";

  const openButton = document.createElement("button");
  openButton.type = "button";
  openButton.className = "open-case";
  openButton.textContent = "Open case";

  const fileInput = document.createElement("input");
  fileInput.type = "file";
  fileInput.accept = ".png,.dcm,image/png";
  fileInput.className = "upload-input";

  const kInput = document.createElement("input");
  kInput.type = "number";
  kInput.min = String(MIN_K);
  kInput.max = String(MAX_K);
  kInput.value = "4";
  kInput.className = "k-input";

  const kLabel = document.createElement("label");
  kLabel.textContent = "neighbors ";
  kLabel.appendChild(kInput);

  controls.append(scanInput, openButton, fileInput, kLabel);

  const caseRoot = document.createElement("section");
  const projectionRoot = document.createElement("section");
  root.append(controls, caseRoot, projectionRoot);

  const caseView = new CaseView(caseRoot, api, 4);
  const projectionView = new ProjectionView(projectionRoot, api, (scanId) => {
    void caseView.showScan(scanId);
  });

  openButton.addEventListener("click", () => {
    const scanId = scanInput.value.trim();
    if (scanId) void caseView.showScan(scanId);
  });
  fileInput.addEventListener("change", () => {
    const file = fileInput.files && fileInput.files[0];
    if (file) void caseView.showUpload(file);
  });
  kInput.addEventListener("change", () => {
    void caseView.setK(Number(kInput.value));
  });

  void projectionView.load();
  return { caseView, projectionView };
}

declare global {
  interface Window {
    __cxrCaseBrowser?: ReturnType<typeof initApp>;
  }
}

if (typeof document !== "undefined") {
  const mount = document.getElementById("app");
  if (mount) {
    window.__cxrCaseBrowser = initApp(mount, new ApiClient(""));
  }
}
