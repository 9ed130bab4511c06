import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    environment: "node",
    // the round-trip suite boots the Python service once; everything else is fast
    fileParallelism: false,
  },
});
