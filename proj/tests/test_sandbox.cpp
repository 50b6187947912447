#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <set>
#include <thread>

#include "test_util.hpp"
#include "trajlab/error.hpp"
#include "trajlab/sandbox.hpp"

using namespace trajlab;
namespace fs = std::filesystem;

namespace {

ExecLimits quick(double timeout = 10.0) {
  ExecLimits l;
  l.wall_timeout = timeout;
  return l;
}

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Transcript with_blocks(const std::vector<std::optional<std::string>>& blocks) {
  Transcript t;
  t.sample_id = "s";
  int k = 1;
  for (const auto& b : blocks) {
    Step s;
    s.index = k;
    s.text = "step";
    if (b) s.code = CodeBlock::make(k, *b);
    t.steps.push_back(s);
    ++k;
  }
  return t;
}

}  // namespace

TEST_CASE("print program") {
  auto r = execute("print(42)\n", quick());
  CHECK(r.exit_ok);
  CHECK_FALSE(r.timed_out);
  CHECK(r.exit_code == 0);
  CHECK(r.stdout_text == "42\n");
  CHECK(r.stderr_text.empty());
  CHECK(r.artifacts.empty());
  CHECK_FALSE(fs::exists(r.workdir));
}

TEST_CASE("infinite loop times out") {
  auto t0 = std::chrono::steady_clock::now();
  auto r = execute("while True:\n    pass\n", quick(1.0));
  double elapsed = since(t0);
  CHECK(r.timed_out);
  CHECK_FALSE(r.exit_ok);
  CHECK(r.wall_time <= 2.0);
  CHECK(elapsed <= 2.0);
  CHECK(r.wall_time >= 1.0);
}

TEST_CASE("timeout kills the whole process group") {
  testutil::TempDir dir;
  auto marker = dir / "late.txt";
  // the grandchild would write the marker after the timeout if it survived
  std::string code = "import subprocess, sys, time\n"
                     "subprocess.Popen([sys.executable, '-c', \"import time; time.sleep(2.5); open(r'" +
                     marker.string() + "', 'w').write('x')\"])\n"
                     "time.sleep(60)\n";
  auto t0 = std::chrono::steady_clock::now();
  auto r = execute(code, quick(1.0));
  CHECK(r.timed_out);
  CHECK(since(t0) <= 2.0);
  std::this_thread::sleep_for(std::chrono::seconds(2));
  CHECK_FALSE(fs::exists(marker));
}

TEST_CASE("background process does not hold the harness") {
  auto t0 = std::chrono::steady_clock::now();
  auto r = execute("import subprocess\nsubprocess.Popen(['sleep', '30'])\nprint('done')\n", quick(20.0));
  CHECK(r.exit_ok);
  CHECK(r.stdout_text == "done\n");
  CHECK(since(t0) < 5.0);
}

TEST_CASE("exception is a failed run, not a host error") {
  auto r = execute("x = 1 / 0\n", quick());
  CHECK_FALSE(r.exit_ok);
  CHECK_FALSE(r.timed_out);
  CHECK(r.exit_code == 1);
  CHECK(r.stderr_text.find("ZeroDivisionError") != std::string::npos);

  auto syntax = execute("def f(:\n", quick());
  CHECK_FALSE(syntax.exit_ok);
  CHECK(syntax.stderr_text.find("SyntaxError") != std::string::npos);

  // stdin is closed, so input() fails instead of blocking
  auto in = execute("input()\n", quick(5.0));
  CHECK_FALSE(in.exit_ok);
  CHECK_FALSE(in.timed_out);
}

TEST_CASE("artifacts are enumerated") {
  ExecLimits l = quick();
  l.keep_workdir = true;
  testutil::TempDir root;
  l.work_root = root.path();
  auto r = execute(
      "import os\n"
      "open('figure.png', 'wb').write(b'\\x89PNG\\r\\n')\n"
      "os.makedirs('sub', exist_ok=True)\n"
      "open('sub/data.txt', 'w').write('1')\n",
      l);
  CHECK(r.exit_ok);
  REQUIRE(r.artifacts.size() == 2);
  CHECK(r.artifacts[0] == r.workdir / "figure.png");
  CHECK(r.artifacts[1] == r.workdir / "sub" / "data.txt");
  CHECK(fs::exists(r.artifacts[0]));
  // the script itself is outside the working directory
  CHECK(r.workdir.parent_path().parent_path() == root.path());
}

TEST_CASE("headless plotting environment") {
  auto r = execute("import os\nprint(os.environ.get('MPLBACKEND'))\n", quick());
  CHECK(r.stdout_text == "Agg\n");
}

TEST_CASE("output is truncated per stream") {
  ExecLimits l = quick();
  l.max_output_bytes = 1000;
  auto r = execute("import sys\nsys.stdout.write('a' * 300000)\nsys.stderr.write('b' * 10)\n", l);
  CHECK(r.exit_ok);
  CHECK(r.stdout_text.size() == 1000);
  CHECK(r.stdout_truncated);
  CHECK(r.stderr_text == "bbbbbbbbbb");
  CHECK_FALSE(r.stderr_truncated);
}

TEST_CASE("interpreter resolution") {
  ExecLimits l = quick();
  l.interpreter = "definitely-not-a-python-xyz";
  CHECK_THROWS_AS(execute("print(1)", l), HostError);
  l.interpreter = "/nonexistent/python";
  CHECK_THROWS_AS(execute("print(1)", l), HostError);

  l.interpreter = "";
  const char* old = std::getenv("TRAJLAB_PYTHON");
  std::string saved = old ? old : "";
  ::setenv("TRAJLAB_PYTHON", "no-such-interp-abc", 1);
  CHECK_THROWS_AS(resolve_interpreter(l), HostError);
  ::setenv("TRAJLAB_PYTHON", "python3", 1);
  CHECK(resolve_interpreter(l).filename() == "python3");
  if (old) {
    ::setenv("TRAJLAB_PYTHON", saved.c_str(), 1);
  } else {
    ::unsetenv("TRAJLAB_PYTHON");
  }

  ExecLimits bad;
  bad.wall_timeout = 0;
  CHECK_THROWS_AS(execute("print(1)", bad), InvalidArgument);
}

TEST_CASE("16 concurrent executions are isolated") {
  ExecLimits l = quick(3.0);
  l.keep_workdir = true;
  testutil::TempDir root;
  l.work_root = root.path();
  std::vector<std::string> sources;
  for (int i = 0; i < 16; ++i) {
    if (i % 4 == 3) {
      sources.push_back("open('out.txt', 'w').write('loop')\nwhile True:\n    pass\n");
    } else {
      sources.push_back("import time\nopen('out.txt', 'w').write('" + std::to_string(i) +
                        "')\ntime.sleep(0.2)\nprint(" + std::to_string(i) + ")\n");
    }
  }
  auto t0 = std::chrono::steady_clock::now();
  auto results = execute_all(sources, l, 16);
  double elapsed = since(t0);
  CHECK(elapsed <= l.wall_timeout + 1.0);

  std::set<fs::path> dirs, files;
  for (int i = 0; i < 16; ++i) {
    const auto& r = results[i];
    dirs.insert(r.workdir);
    for (const auto& a : r.artifacts) CHECK(files.insert(a).second);
    REQUIRE(r.artifacts.size() == 1);
    if (i % 4 == 3) {
      CHECK(r.timed_out);
      CHECK(testutil::slurp(r.artifacts[0]) == "loop");
    } else {
      CHECK(r.exit_ok);
      CHECK(r.stdout_text == std::to_string(i) + "\n");
      CHECK(testutil::slurp(r.artifacts[0]) == std::to_string(i));
    }
    CHECK(r.wall_time <= l.wall_timeout + 1.0);
  }
  CHECK(dirs.size() == 16);
}

TEST_CASE("execute_transcript and code_acc") {
  auto ok = execute_transcript(with_blocks({"print(1)", std::nullopt, "print(2)", "print(3)"}), quick(), 2);
  REQUIRE(ok.size() == 3);
  CHECK(ok[0].step == 1);
  CHECK(ok[1].step == 3);
  CHECK(ok[2].step == 4);
  CHECK(code_acc(ok) == true);
  CHECK(failure_summary(ok).empty());

  auto bad = execute_transcript(with_blocks({"print(1)", "raise ValueError('boom')", "print(3)"}), quick());
  CHECK(code_acc(bad) == false);
  CHECK(failure_summary(bad).find("Step 2 code failed.") == 0);
  CHECK(failure_summary(bad).find("boom") != std::string::npos);

  CHECK_FALSE(code_acc(execute_transcript(with_blocks({std::nullopt, std::nullopt}), quick())).has_value());

  // per-block runs are standalone; cumulative runs see earlier blocks
  auto t = with_blocks({"x = 20", "print(x + 1)"});
  CHECK(code_acc(execute_transcript(t, quick())) == false);
  auto cum = execute_transcript(t, quick(), 1, ExecMode::cumulative);
  CHECK(code_acc(cum) == true);
  CHECK(cum[1].result.stdout_text == "21\n");
}

TEST_CASE("classification is deterministic") {
  for (int i = 0; i < 3; ++i) {
    CHECK(execute("import math\nprint(math.sqrt(2))\n", quick()).exit_ok);
    CHECK_FALSE(execute("assert 1 == 2\n", quick()).exit_ok);
  }
}
