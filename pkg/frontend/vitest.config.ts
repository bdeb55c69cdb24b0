import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "jsdom",
    include: ["tests/**/*.test.ts"],
    // refines against a live model can take a while on a loaded machine
    testTimeout: 180_000,
    hookTimeout: 60_000,
  },
});
