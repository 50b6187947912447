#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "trajlab/transcript.hpp"

namespace trajlab {

struct ExecLimits {
  double wall_timeout = 30.0;  // seconds
  std::size_t max_output_bytes = std::size_t{1} << 20;  // per stream
  /// Address-space cap applied with setrlimit; 0 leaves it unset.
  std::size_t max_memory_bytes = 0;
  /// Parent of the per-run directories; empty means the system temp dir.
  std::filesystem::path work_root;
  /// Keep the run directory (and the artifacts in it) after execution.
  bool keep_workdir = false;
  /// Interpreter binary; empty falls back to $TRAJLAB_PYTHON, then python3.
  std::string interpreter;

  void validate() const;
};

struct ExecResult {
  bool exit_ok = false;
  bool timed_out = false;
  std::optional<int> exit_code;
  std::optional<int> term_signal;
  std::string stdout_text;
  bool stdout_truncated = false;
  std::string stderr_text;
  bool stderr_truncated = false;
  double wall_time = 0.0;
  /// Working directory the code ran in.
  std::filesystem::path workdir;
  /// Regular files under workdir after the run, sorted.
  std::vector<std::filesystem::path> artifacts;
};

/// Interpreter the sandbox would use for these limits, resolved against PATH.
/// Throws HostError if it cannot be found.
std::filesystem::path resolve_interpreter(const ExecLimits& limits);

/// Runs source as a standalone script in a fresh directory, in its own
/// process group with MPLBACKEND=Agg. Code failures are reported in the
/// result; HostError is thrown only when the child cannot be started.
ExecResult execute(const std::string& source, const ExecLimits& limits);
ExecResult execute(const CodeBlock& code, const ExecLimits& limits);

/// Runs every source on a pool of at most pool_size workers. Results are in
/// input order.
std::vector<ExecResult> execute_all(const std::vector<std::string>& sources, const ExecLimits& limits,
                                    std::size_t pool_size);

enum class ExecMode {
  per_block,   // each block runs alone
  cumulative,  // block k runs after blocks 1..k-1 in the same script
};

struct StepExec {
  int step = 0;
  ExecResult result;
};

std::vector<StepExec> execute_transcript(const Transcript& t, const ExecLimits& limits,
                                         std::size_t pool_size = 1,
                                         ExecMode mode = ExecMode::per_block);

/// 1 iff every block ran cleanly; absent when there were no blocks.
std::optional<bool> code_acc(const std::vector<StepExec>& runs);

/// First failing step's stderr tail, for regeneration feedback.
std::string failure_summary(const std::vector<StepExec>& runs, std::size_t max_bytes = 2000);

}  // namespace trajlab
