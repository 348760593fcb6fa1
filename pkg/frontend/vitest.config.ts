import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "jsdom",
    include: ["tests/**/*.test.ts"],
    // The e2e test trains nothing but does spawn a model server; give the
    // first health poll room on a cold CPU.
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
