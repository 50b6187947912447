#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <regex>
#include <semaphore>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "trajlab/error.hpp"
#include "trajlab/pipeline.hpp"

namespace trajlab {

namespace {

struct Target {
  std::string origin;  // scheme://host[:port]
  std::string path;    // .../chat/completions
};

Target split_url(const std::string& base_url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(base_url, m, re)) throw EndpointError("bad base_url " + base_url);
  std::string prefix = m[2].matched ? m[2].str() : "";
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {m[1].str(), prefix + "/chat/completions"};
}

bool retryable(int status) { return status == 408 || status == 429 || status >= 500; }

}  // namespace

struct HttpLlmClient::Impl {
  std::vector<LlmEndpoint> endpoints;
  std::counting_semaphore<1 << 20> slots;

  Impl(std::vector<LlmEndpoint> eps, std::size_t max_in_flight)
      : endpoints(std::move(eps)), slots(static_cast<std::ptrdiff_t>(max_in_flight)) {}

  const LlmEndpoint& endpoint(Role role) const {
    for (const auto& e : endpoints)
      if (e.role == role) return e;
    for (const auto& e : endpoints)
      if (e.role == Role::generator) return e;
    return endpoints.front();
  }
};

HttpLlmClient::HttpLlmClient(std::vector<LlmEndpoint> endpoints, std::size_t max_in_flight) {
  if (endpoints.empty()) throw InvalidArgument("no LLM endpoints configured");
  if (max_in_flight == 0) throw InvalidArgument("max_in_flight must be >= 1");
  for (const auto& e : endpoints) e.validate();
  impl_ = std::make_unique<Impl>(std::move(endpoints), max_in_flight);
}

HttpLlmClient::~HttpLlmClient() = default;

std::string HttpLlmClient::complete(const LlmRequest& request) {
  const LlmEndpoint& ep = impl_->endpoint(request.role);
  const Target target = split_url(ep.base_url);

  nlohmann::json body;
  body["model"] = ep.model;
  body["temperature"] = ep.temperature;
  if (ep.seed) body["seed"] = *ep.seed;
  body["messages"] = nlohmann::json::array();
  for (const auto& m : request.messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});
  const std::string payload = body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);

  httplib::Headers headers;
  if (!ep.api_key_env.empty()) {
    const char* key = std::getenv(ep.api_key_env.c_str());
    if (!key || !*key) throw EndpointError(fmt::format("environment variable {} is not set", ep.api_key_env));
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }

  const auto secs = static_cast<time_t>(ep.timeout);
  const auto usecs = static_cast<time_t>((ep.timeout - static_cast<double>(secs)) * 1e6);
  std::string last_error;
  for (int attempt = 0; attempt <= ep.max_retries; ++attempt) {
    double wait = 0.0;
    if (attempt > 0) wait = ep.backoff.delay(attempt);
    httplib::Result res{nullptr, httplib::Error::Unknown};
    {
      impl_->slots.acquire();
      struct Release {
        std::counting_semaphore<1 << 20>& s;
        ~Release() { s.release(); }
      } release{impl_->slots};
      httplib::Client cli(target.origin);
      cli.set_connection_timeout(secs, usecs);
      cli.set_read_timeout(secs, usecs);
      cli.set_write_timeout(secs, usecs);
      res = cli.Post(target.path, headers, payload, "application/json");
    }
    if (!res) {
      last_error = "transport: " + httplib::to_string(res.error());
    } else if (res->status == 200) {
      try {
        auto j = nlohmann::json::parse(res->body);
        const auto& content = j.at("choices").at(0).at("message").at("content");
        if (!content.is_string()) throw EndpointError("response content is not text");
        return content.get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw EndpointError(fmt::format("{} returned an unreadable completion: {}", ep.base_url, e.what()));
      }
    } else if (!retryable(res->status)) {
      throw EndpointError(fmt::format("{} answered HTTP {}: {}", ep.base_url, res->status, res->body.substr(0, 300)));
    } else {
      last_error = fmt::format("HTTP {}", res->status);
      if (res->has_header("Retry-After")) {
        char* end = nullptr;
        std::string ra = res->get_header_value("Retry-After");
        double v = std::strtod(ra.c_str(), &end);
        if (end != ra.c_str() && v >= 0) wait = std::min(v, ep.backoff.max);
      }
    }
    if (attempt < ep.max_retries) {
      double d = std::max(wait, ep.backoff.delay(attempt + 1));
      std::this_thread::sleep_for(std::chrono::duration<double>(d));
    }
  }
  throw EndpointError(fmt::format("{} ({}) failed after {} attempts: {}", ep.base_url, to_string(ep.role),
                                  ep.max_retries + 1, last_error));
}

}  // namespace trajlab
