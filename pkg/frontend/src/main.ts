import { ChatApi } from "./api.js";
import { ChatController, resolveUserId } from "./controller.js";
import { ChatView } from "./view.js";

const api = new ChatApi("");
const controller = new ChatController(api, resolveUserId(window.localStorage));
const root = document.getElementById("app");
if (!root) {
  throw new Error("missing #app element");
}
new ChatView(root, controller);
void controller.init();
