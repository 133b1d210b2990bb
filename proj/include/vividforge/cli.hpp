#pragma once

namespace vividforge {

// Entry point behind the vividforge binary: parses `synth | train | infer |
// eval`, layers config (defaults -> --config file -> flags), dispatches, and
// maps failures to exit codes (0 ok, 2 usage, 3 data, 4 numerical).
int run_cli(int argc, const char* const* argv);

}  // namespace vividforge
