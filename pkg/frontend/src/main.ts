import { App } from "./app.js";

const STORAGE_KEY = "levelflow.base";

function resolveBase(): string {
  const param = new URLSearchParams(location.search).get("api");
  if (param) {
    localStorage.setItem(STORAGE_KEY, param);
    return param;
  }
  return localStorage.getItem(STORAGE_KEY) ?? "http://127.0.0.1:8000";
}

const root = document.getElementById("app");
if (root) {
  const app = new App(root, resolveBase(), {
    onBaseChange(base) {
      localStorage.setItem(STORAGE_KEY, base);
      location.reload();
    },
  });
  void app.boot();
}
