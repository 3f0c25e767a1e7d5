// Entry point: ask for the rater's name, then run the session loop
// against the service that served this page.

import { ApiClient, ApiError } from "./api.js";
import { runSession } from "./session.js";
import { createView } from "./ui.js";

function start(): void {
  const app = document.getElementById("app")!;
  app.innerHTML = `
    <form id="join">
      <label>Your name <input id="name" autocomplete="off" maxlength="80" required></label>
      <button type="submit">Start rating</button>
    </form>
  `;
  const form = app.querySelector<HTMLFormElement>("#join")!;
  form.addEventListener("submit", async (ev) => {
    ev.preventDefault();
    const name = app.querySelector<HTMLInputElement>("#name")!.value.trim();
    if (!name) return;
    try {
      await runSession(new ApiClient(""), name, createView(app));
    } catch (err) {
      app.textContent =
        err instanceof ApiError
          ? `The study is not accepting scores: ${err.message}`
          : `Something went wrong: ${String(err)}`;
    }
  });
}

start();
