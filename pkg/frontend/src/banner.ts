/** Dismissible error banners carrying the service status code. */

export function showBanner(container: HTMLElement, status: number, message: string): HTMLElement {
  const banner = document.createElement("div");
  banner.className = "banner banner-error";
  banner.setAttribute("role", "alert");

  const text = document.createElement("span");
  text.className = "banner-text";
  text.textContent = `Error ${status}: ${message}`;
  banner.appendChild(text);

  const dismiss = document.createElement("button");
  dismiss.className = "banner-dismiss";
  dismiss.type = "button";
  dismiss.textContent = "×";
  dismiss.setAttribute("aria-label", "dismiss");
  dismiss.addEventListener("click", () => banner.remove());
  banner.appendChild(dismiss);

  container.appendChild(banner);
  return banner;
}
