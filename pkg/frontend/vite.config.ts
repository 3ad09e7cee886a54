import { defineConfig } from "vitest/config";

// Build straight into the server's static asset directory; the app is then
// reachable at /assets/ui/ on the collaboration server itself.
export default defineConfig({
  base: "./",
  build: {
    outDir: "../assets/ui",
    emptyOutDir: true,
  },
  test: {
    environment: "node",
    testTimeout: 30000,
    hookTimeout: 30000,
  },
});
