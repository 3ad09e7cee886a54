// Entry point: ?mode=session joins a live design session, ?mode=review
// browses published solutions. Server addresses default to the host that
// served this page.

import "./style.css";
import { ReviewUi, SessionUi } from "./ui";

const params = new URLSearchParams(window.location.search);
const mode = params.get("mode") ?? "session";
const httpBase = params.get("api") ?? `${window.location.protocol}//${window.location.host}`;
const wsBase = params.get("ws") ?? httpBase.replace(/^http/, "ws");

const canvas = document.getElementById("globe") as HTMLCanvasElement;

if (mode === "review") {
  document.body.classList.add("review-mode");
  new ReviewUi(httpBase, canvas);
} else {
  const session = params.get("session") ?? "design-1";
  const name = params.get("name") ?? window.prompt("Display name?") ?? "guest";
  document.getElementById("session-label")!.textContent = session;
  new SessionUi(wsBase, session, name, canvas);
}
