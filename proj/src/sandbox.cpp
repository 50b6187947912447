#include "trajlab/sandbox.hpp"

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/resource.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fmt/format.h>

#include "trajlab/error.hpp"

extern char** environ;

namespace fs = std::filesystem;

namespace trajlab {

void ExecLimits::validate() const {
  if (!(wall_timeout > 0) || !std::isfinite(wall_timeout))
    throw InvalidArgument("wall_timeout must be positive");
}

namespace {

bool executable(const fs::path& p) {
  struct stat st{};
  return ::stat(p.c_str(), &st) == 0 && S_ISREG(st.st_mode) && ::access(p.c_str(), X_OK) == 0;
}

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  ~Fd() { reset(); }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}

  int get() const { return fd_; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

std::pair<Fd, Fd> make_pipe() {
  int fds[2];
  if (::pipe2(fds, O_CLOEXEC) != 0) throw HostError(fmt::format("pipe: {}", std::strerror(errno)));
  return {Fd(fds[0]), Fd(fds[1])};
}

struct Capture {
  std::string text;
  bool truncated = false;
  bool open = true;
};

// Returns false on EOF.
bool drain(int fd, Capture& cap, std::size_t limit) {
  char buf[8192];
  for (;;) {
    ssize_t n = ::read(fd, buf, sizeof buf);
    if (n > 0) {
      std::size_t room = limit > cap.text.size() ? limit - cap.text.size() : 0;
      std::size_t take = std::min(room, static_cast<std::size_t>(n));
      cap.text.append(buf, take);
      if (take < static_cast<std::size_t>(n)) cap.truncated = true;
      continue;
    }
    if (n == 0) return false;
    if (errno == EINTR) continue;
    return errno == EAGAIN || errno == EWOULDBLOCK;
  }
}

std::vector<std::string> child_environment() {
  std::vector<std::string> env;
  for (char** e = environ; e && *e; ++e) {
    std::string_view kv(*e);
    if (kv.rfind("MPLBACKEND=", 0) == 0 || kv.rfind("PYTHONDONTWRITEBYTECODE=", 0) == 0 ||
        kv.rfind("PYTHONUNBUFFERED=", 0) == 0)
      continue;
    env.emplace_back(kv);
  }
  env.emplace_back("MPLBACKEND=Agg");
  env.emplace_back("PYTHONDONTWRITEBYTECODE=1");
  env.emplace_back("PYTHONUNBUFFERED=1");
  return env;
}

fs::path make_run_dir(const ExecLimits& limits) {
  fs::path root = limits.work_root.empty() ? fs::temp_directory_path() : limits.work_root;
  std::error_code ec;
  fs::create_directories(root, ec);
  std::string templ = (root / "trajlab-run-XXXXXX").string();
  if (::mkdtemp(templ.data()) == nullptr)
    throw HostError(fmt::format("cannot create run directory under {}: {}", root.string(), std::strerror(errno)));
  return fs::path(templ);
}

std::vector<fs::path> list_artifacts(const fs::path& dir) {
  std::vector<fs::path> out;
  std::error_code ec;
  for (auto it = fs::recursive_directory_iterator(dir, fs::directory_options::skip_permission_denied, ec);
       !ec && it != fs::recursive_directory_iterator(); it.increment(ec)) {
    std::error_code ec2;
    if (it->is_regular_file(ec2)) out.push_back(it->path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

fs::path resolve_interpreter(const ExecLimits& limits) {
  std::string name = limits.interpreter;
  if (name.empty()) {
    const char* env = std::getenv("TRAJLAB_PYTHON");
    name = env && *env ? env : "python3";
  }
  if (name.find('/') != std::string::npos) {
    if (!executable(name)) throw HostError(fmt::format("interpreter not executable: {}", name));
    return name;
  }
  const char* path = std::getenv("PATH");
  std::string_view dirs = path ? path : "/usr/local/bin:/usr/bin:/bin";
  while (true) {
    auto colon = dirs.find(':');
    std::string_view dir = dirs.substr(0, colon);
    fs::path candidate = fs::path(dir.empty() ? "." : std::string(dir)) / name;
    if (executable(candidate)) return candidate;
    if (colon == std::string_view::npos) break;
    dirs.remove_prefix(colon + 1);
  }
  throw HostError(fmt::format("interpreter not found on PATH: {}", name));
}

ExecResult execute(const std::string& source, const ExecLimits& limits) {
  limits.validate();
  const fs::path interpreter = resolve_interpreter(limits);
  const fs::path run_dir = make_run_dir(limits);
  const fs::path work = run_dir / "work";
  const fs::path script = run_dir / "script.py";
  {
    std::error_code ec;
    fs::create_directory(work, ec);
    std::ofstream out(script, std::ios::binary);
    out << source;
    if (ec || !out) {
      fs::remove_all(run_dir, ec);
      throw HostError(fmt::format("cannot prepare run directory {}", run_dir.string()));
    }
  }

  // Everything the child touches is prepared before fork.
  std::vector<std::string> env = child_environment();
  std::vector<char*> envp;
  for (auto& e : env) envp.push_back(e.data());
  envp.push_back(nullptr);
  std::string interp_s = interpreter.string(), script_s = script.string(), work_s = work.string();
  std::vector<char*> argv = {interp_s.data(), script_s.data(), nullptr};
  const rlim_t mem = static_cast<rlim_t>(limits.max_memory_bytes);

  auto [out_r, out_w] = make_pipe();
  auto [err_r, err_w] = make_pipe();
  auto [fail_r, fail_w] = make_pipe();

  const auto t0 = std::chrono::steady_clock::now();
  pid_t pid = ::fork();
  if (pid < 0) {
    std::error_code ec;
    fs::remove_all(run_dir, ec);
    throw HostError(fmt::format("fork: {}", std::strerror(errno)));
  }
  if (pid == 0) {
    ::setpgid(0, 0);
    int devnull = ::open("/dev/null", O_RDONLY | O_CLOEXEC);
    if (devnull >= 0) ::dup2(devnull, 0);
    ::dup2(out_w.get(), 1);
    ::dup2(err_w.get(), 2);
    if (mem > 0) {
      struct rlimit rl{mem, mem};
      ::setrlimit(RLIMIT_AS, &rl);
    }
    int err = 0;
    if (::chdir(work_s.c_str()) != 0) {
      err = errno;
    } else {
      ::execve(argv[0], argv.data(), envp.data());
      err = errno;
    }
    ssize_t ignored = ::write(fail_w.get(), &err, sizeof err);
    (void)ignored;
    ::_exit(127);
  }
  ::setpgid(pid, pid);
  out_w.reset();
  err_w.reset();
  fail_w.reset();

  ExecResult result;
  result.workdir = work;
  Capture cap[2];
  ::fcntl(out_r.get(), F_SETFL, O_NONBLOCK);
  ::fcntl(err_r.get(), F_SETFL, O_NONBLOCK);
  const int fds[2] = {out_r.get(), err_r.get()};
  const auto deadline = t0 + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                 std::chrono::duration<double>(limits.wall_timeout));

  int status = 0;
  bool reaped = false;
  bool group_killed = false;
  while (cap[0].open || cap[1].open || !reaped) {
    if (!reaped) {
      pid_t w = ::waitpid(pid, &status, WNOHANG);
      if (w == pid) {
        reaped = true;
        // stray background processes must not hold the pipes open
        ::killpg(pid, SIGKILL);
        group_killed = true;
      }
    }
    auto now = std::chrono::steady_clock::now();
    if (!reaped && now >= deadline) {
      result.timed_out = true;
      ::killpg(pid, SIGKILL);
      ::kill(pid, SIGKILL);
      group_killed = true;
      ::waitpid(pid, &status, 0);
      reaped = true;
    }
    if (!cap[0].open && !cap[1].open) {
      if (!reaped) std::this_thread::sleep_for(std::chrono::milliseconds(5));
      continue;
    }
    pollfd pfds[2];
    int n = 0;
    int which[2];
    for (int i = 0; i < 2; ++i) {
      if (cap[i].open) {
        pfds[n] = {fds[i], POLLIN, 0};
        which[n++] = i;
      }
    }
    int wait_ms = 50;
    if (!reaped) {
      auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count() + 1;
      wait_ms = static_cast<int>(std::clamp<long long>(left, 1, 50));
    }
    int rc = ::poll(pfds, static_cast<nfds_t>(n), wait_ms);
    if (rc < 0 && errno != EINTR) break;
    for (int k = 0; k < n && rc > 0; ++k) {
      if (pfds[k].revents & (POLLIN | POLLHUP | POLLERR)) {
        int i = which[k];
        if (!drain(fds[i], cap[i], limits.max_output_bytes)) cap[i].open = false;
      }
    }
    // after the group is gone, pipes drain quickly; don't spin past grace
    if (group_killed && reaped && std::chrono::steady_clock::now() > deadline + std::chrono::milliseconds(500))
      break;
  }
  result.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  int exec_errno = 0;
  if (::read(fail_r.get(), &exec_errno, sizeof exec_errno) == static_cast<ssize_t>(sizeof exec_errno)) {
    std::error_code ec;
    fs::remove_all(run_dir, ec);
    throw HostError(fmt::format("cannot start {}: {}", interp_s, std::strerror(exec_errno)));
  }

  if (WIFEXITED(status)) result.exit_code = WEXITSTATUS(status);
  if (WIFSIGNALED(status)) result.term_signal = WTERMSIG(status);
  result.exit_ok = !result.timed_out && result.exit_code && *result.exit_code == 0;
  result.stdout_text = std::move(cap[0].text);
  result.stdout_truncated = cap[0].truncated;
  result.stderr_text = std::move(cap[1].text);
  result.stderr_truncated = cap[1].truncated;
  result.artifacts = list_artifacts(work);
  if (!limits.keep_workdir) {
    std::error_code ec;
    fs::remove_all(run_dir, ec);
  }
  return result;
}

ExecResult execute(const CodeBlock& code, const ExecLimits& limits) { return execute(code.source, limits); }

std::vector<ExecResult> execute_all(const std::vector<std::string>& sources, const ExecLimits& limits,
                                    std::size_t pool_size) {
  std::vector<ExecResult> results(sources.size());
  if (sources.empty()) return results;
  pool_size = std::clamp<std::size_t>(pool_size, 1, sources.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i; !failed && (i = next++) < sources.size();) {
      try {
        results[i] = execute(sources[i], limits);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        failed = true;
      }
    }
  };
  if (pool_size == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < pool_size; ++t) threads.emplace_back(worker);
    for (auto& th : threads) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

std::vector<StepExec> execute_transcript(const Transcript& t, const ExecLimits& limits, std::size_t pool_size,
                                         ExecMode mode) {
  std::vector<int> steps;
  std::vector<std::string> sources;
  std::string prefix;
  for (const auto& step : t.steps) {
    if (!step.code) continue;
    steps.push_back(step.index);
    if (mode == ExecMode::cumulative) {
      if (!prefix.empty() && prefix.back() != '\n') prefix += '\n';
      prefix += step.code->source;
      sources.push_back(prefix);
    } else {
      sources.push_back(step.code->source);
    }
  }
  auto results = execute_all(sources, limits, pool_size);
  std::vector<StepExec> out;
  for (std::size_t i = 0; i < results.size(); ++i) out.push_back({steps[i], std::move(results[i])});
  return out;
}

std::optional<bool> code_acc(const std::vector<StepExec>& runs) {
  if (runs.empty()) return std::nullopt;
  return std::all_of(runs.begin(), runs.end(), [](const StepExec& r) { return r.result.exit_ok; });
}

std::string failure_summary(const std::vector<StepExec>& runs, std::size_t max_bytes) {
  for (const auto& r : runs) {
    if (r.result.exit_ok) continue;
    std::string head = r.result.timed_out ? fmt::format("Step {} code timed out.", r.step)
                                          : fmt::format("Step {} code failed.", r.step);
    const std::string& err = r.result.stderr_text;
    std::string tail = err.size() > max_bytes ? err.substr(err.size() - max_bytes) : err;
    return tail.empty() ? head : head + "\n" + tail;
  }
  return {};
}

}  // namespace trajlab
