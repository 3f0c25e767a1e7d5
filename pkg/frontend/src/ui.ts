// DOM view for the rating flow. Images render at their native pixel
// size (no CSS scaling) so the browser does not resample the stimuli,
// and nothing derived from the task id ever reaches the screen.

import { RatingTask } from "./api.js";
import { SessionView, SLIDER_DEFAULT, UiSessionState, clampScore } from "./session.js";

const STEP = 0.1;

export function createView(root: HTMLElement): SessionView {
  root.innerHTML = `
    <div id="status-bar">
      <span id="remaining"></span>
      <span id="last-status"></span>
    </div>
    <div id="pair">
      <figure>
        <img id="ref-img" alt="reference image">
        <figcaption>Reference (10)</figcaption>
      </figure>
      <figure>
        <img id="test-img" alt="image under test">
        <figcaption>&nbsp;</figcaption>
      </figure>
    </div>
    <div id="controls">
      <input id="score" type="range" min="0" max="10" step="${STEP}" value="${SLIDER_DEFAULT}">
      <output id="score-value"></output>
      <button id="submit">Submit score</button>
    </div>
    <div id="done" hidden></div>
  `;
  const refImg = root.querySelector<HTMLImageElement>("#ref-img")!;
  const testImg = root.querySelector<HTMLImageElement>("#test-img")!;
  const slider = root.querySelector<HTMLInputElement>("#score")!;
  const readout = root.querySelector<HTMLOutputElement>("#score-value")!;
  const submit = root.querySelector<HTMLButtonElement>("#submit")!;
  const remaining = root.querySelector<HTMLElement>("#remaining")!;
  const lastStatus = root.querySelector<HTMLElement>("#last-status")!;
  const done = root.querySelector<HTMLElement>("#done")!;

  const showValue = () => {
    readout.textContent = Number(slider.value).toFixed(1);
  };
  slider.addEventListener("input", showValue);

  const nudge = (delta: number) => {
    slider.value = clampScore(Number(slider.value) + delta).toFixed(1);
    showValue();
  };

  return {
    presentTask(task: RatingTask, state: UiSessionState): Promise<number> {
      refImg.src = task.refUrl;
      testImg.src = task.testUrl;
      slider.value = SLIDER_DEFAULT.toFixed(1);
      showValue();
      remaining.textContent = `${task.remaining} to go`;
      lastStatus.textContent = state.lastStatus;
      submit.disabled = false;
      slider.focus();

      return new Promise((resolve) => {
        const finish = () => {
          submit.disabled = true;
          submit.removeEventListener("click", finish);
          document.removeEventListener("keydown", onKey);
          // the submitted score is the displayed value, verbatim
          resolve(Number(slider.value));
        };
        const onKey = (ev: KeyboardEvent) => {
          if (ev.key === "Enter") {
            ev.preventDefault();
            finish();
          } else if (ev.key === "ArrowRight" && document.activeElement !== slider) {
            nudge(STEP);
          } else if (ev.key === "ArrowLeft" && document.activeElement !== slider) {
            nudge(-STEP);
          }
        };
        submit.addEventListener("click", finish);
        document.addEventListener("keydown", onKey);
      });
    },

    showDone(state: UiSessionState): void {
      root.querySelector<HTMLElement>("#pair")!.hidden = true;
      root.querySelector<HTMLElement>("#controls")!.hidden = true;
      remaining.textContent = "";
      lastStatus.textContent = "";
      done.hidden = false;
      done.textContent =
        `Session ${state.sessionId} complete. ` +
        `${state.submitted} score${state.submitted === 1 ? "" : "s"} recorded. Thank you.`;
    },
  };
}
