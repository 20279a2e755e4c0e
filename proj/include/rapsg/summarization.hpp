// SPDX-License-Identifier: Apache-2.0
//
// Pseudo-sentence generation behind a pluggable backend: a wire-protocol
// client for an external summarization service, and a deterministic
// extractive fallback for offline runs.
#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <unordered_set>
#include <variant>
#include <vector>

#include "httplib.h"
#include "rapsg/embedding_store.hpp"
#include "rapsg/error.hpp"
#include "rapsg/grouping.hpp"
#include "rapsg/jsonl.hpp"
#include "rapsg/parallel.hpp"
#include "rapsg/text.hpp"

namespace rapsg {

inline constexpr std::size_t kDefaultMaxTokens = 20;

enum class RequestKind { kSummarize, kRefine };

struct SummarizationRequest {
  RequestKind kind = RequestKind::kSummarize;
  std::vector<std::string> descriptions;
  std::optional<std::string> prediction;
  std::uint64_t seed = 0;
  std::size_t max_tokens = kDefaultMaxTokens;
  std::string request_id;

  void validate() const {
    if (descriptions.empty()) throw UsageError("request " + request_id + ": no descriptions");
    if (max_tokens == 0) throw UsageError("request " + request_id + ": max_tokens must be >= 1");
    if (kind == RequestKind::kRefine && !prediction) {
      throw UsageError("request " + request_id + ": refine requires a prediction");
    }
    if (kind == RequestKind::kSummarize && prediction) {
      throw UsageError("request " + request_id + ": summarize must not carry a prediction");
    }
  }
};

/// Token-level merge used by the offline fallback. A description contributes
/// the tokens that did not appear in the seed or in any earlier description;
/// repeats inside a single description are kept as written.
inline std::string extractive_merge(const std::vector<std::string>& seed_tokens,
                                    const std::vector<std::string>& descriptions,
                                    std::size_t max_tokens) {
  std::vector<std::string> out(seed_tokens.begin(), seed_tokens.end());
  std::unordered_set<std::string> seen(seed_tokens.begin(), seed_tokens.end());
  for (const auto& d : descriptions) {
    if (out.size() >= max_tokens) break;
    const auto tokens = tokenize(d);
    for (const auto& t : tokens) {
      if (!seen.contains(t)) out.push_back(t);
    }
    seen.insert(tokens.begin(), tokens.end());
  }
  if (out.size() > max_tokens) out.resize(max_tokens);
  return join_tokens(out);
}

inline std::string extractive_summarize(const std::vector<std::string>& descriptions,
                                        std::size_t max_tokens = kDefaultMaxTokens) {
  return extractive_merge({}, descriptions, max_tokens);
}

inline std::string extractive_refine(const std::string& prediction,
                                     const std::vector<std::string>& descriptions,
                                     std::size_t max_tokens = kDefaultMaxTokens) {
  return extractive_merge(tokenize(prediction), descriptions, max_tokens);
}

class SummarizerBackend {
 public:
  virtual ~SummarizerBackend() = default;
  virtual std::string name() const = 0;
  /// Must be safe to call concurrently.
  virtual std::string complete(const SummarizationRequest& request) = 0;
};

class ExtractiveSummarizer final : public SummarizerBackend {
 public:
  std::string name() const override { return "extractive"; }

  std::string complete(const SummarizationRequest& request) override {
    request.validate();
    std::string out = request.kind == RequestKind::kRefine
                          ? extractive_refine(*request.prediction, request.descriptions, request.max_tokens)
                          : extractive_summarize(request.descriptions, request.max_tokens);
    if (out.empty()) throw BackendError(request.request_id, "descriptions contain no tokens");
    return out;
  }
};

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{250};
  std::chrono::milliseconds timeout{30000};
};

struct HealthStatus {
  std::string status;
  std::string mode;
};

/// Client for the summarization service:
///   POST /v1/summarize {descriptions, seed, max_tokens}             -> {summary}
///   POST /v1/refine    {prediction, descriptions, seed, max_tokens} -> {summary}
///   GET  /v1/health                                                 -> {status, mode}
/// Errors come back as {error:{code,message}} with a 4xx/5xx status.
/// Transport failures, 5xx and 429 are retried with exponential backoff;
/// other 4xx responses fail immediately.
class HttpSummarizer final : public SummarizerBackend {
 public:
  explicit HttpSummarizer(std::string base_url, RetryPolicy policy = {})
      : base_url_(std::move(base_url)), policy_(policy) {
    while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
    if (base_url_.rfind("http://", 0) != 0) {
      throw UsageError("summarizer url must start with http:// (got '" + base_url_ + "')");
    }
    if (policy_.attempts < 1) throw UsageError("retry policy: attempts must be >= 1");
  }

  std::string name() const override { return "service"; }
  const std::string& url() const noexcept { return base_url_; }

  std::string complete(const SummarizationRequest& request) override {
    request.validate();
    Json body;
    const char* path = "/v1/summarize";
    if (request.kind == RequestKind::kRefine) {
      path = "/v1/refine";
      body["prediction"] = *request.prediction;
    }
    body["descriptions"] = request.descriptions;
    body["seed"] = request.seed;
    body["max_tokens"] = request.max_tokens;
    const Json reply = post_with_retry(path, body.dump(), request.request_id);
    auto it = reply.find("summary");
    if (it == reply.end() || !it->is_string()) {
      throw BackendError(request.request_id, "response lacks a string 'summary'");
    }
    auto summary = it->get<std::string>();
    if (summary.empty()) throw BackendError(request.request_id, "empty summary");
    return summary;
  }

  HealthStatus health() const {
    auto cli = client();
    auto res = cli.Get(base_path() + "/v1/health");
    if (!res) throw BackendError("health", "transport error: " + httplib::to_string(res.error()));
    if (res->status != 200) {
      throw BackendError("health", "status " + std::to_string(res->status));
    }
    try {
      const auto j = Json::parse(res->body);
      return {j.at("status").get<std::string>(), j.at("mode").get<std::string>()};
    } catch (const Json::exception& e) {
      throw BackendError("health", std::string("malformed health body: ") + e.what());
    }
  }

 private:
  // "http://host:port/prefix" -> client on host:port, requests under /prefix.
  std::string host_part() const {
    const auto slash = base_url_.find('/', 7);
    return slash == std::string::npos ? base_url_ : base_url_.substr(0, slash);
  }
  std::string base_path() const {
    const auto slash = base_url_.find('/', 7);
    return slash == std::string::npos ? std::string() : base_url_.substr(slash);
  }

  httplib::Client client() const {
    httplib::Client cli(host_part());
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(policy_.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(policy_.timeout - secs);
    cli.set_connection_timeout(secs.count(), usecs.count());
    cli.set_read_timeout(secs.count(), usecs.count());
    cli.set_write_timeout(secs.count(), usecs.count());
    return cli;
  }

  static std::string describe_error(const httplib::Response& res) {
    try {
      const auto j = Json::parse(res.body);
      const auto& err = j.at("error");
      return "status " + std::to_string(res.status) + " " + err.at("code").dump() + ": " +
             err.at("message").get<std::string>();
    } catch (const Json::exception&) {
      return "status " + std::to_string(res.status);
    }
  }

  Json post_with_retry(const char* path, const std::string& body, const std::string& request_id) {
    auto backoff = policy_.initial_backoff;
    std::string last_error;
    for (int attempt = 1; attempt <= policy_.attempts; ++attempt) {
      if (attempt > 1) {
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
      auto cli = client();
      auto res = cli.Post(base_path() + path, body, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 200) {
        try {
          return Json::parse(res->body);
        } catch (const Json::parse_error& e) {
          throw BackendError(request_id, std::string("malformed response body: ") + e.what());
        }
      }
      last_error = describe_error(*res);
      const bool retryable = res->status >= 500 || res->status == 429;
      if (!retryable) throw BackendError(request_id, last_error);
    }
    throw BackendError(request_id, "gave up after " + std::to_string(policy_.attempts) +
                                       " attempts: " + last_error);
  }

  std::string base_url_;
  RetryPolicy policy_;
};

inline std::string summarize_group(const SummarizationRequest& request, SummarizerBackend& backend) {
  if (request.kind != RequestKind::kSummarize) throw UsageError("summarize_group: wrong request kind");
  request.validate();
  return backend.complete(request);
}

inline std::string refine(const SummarizationRequest& request, SummarizerBackend& backend) {
  if (request.kind != RequestKind::kRefine) throw UsageError("refine: wrong request kind");
  request.validate();
  return backend.complete(request);
}

using RequestOutcome = std::variant<std::string, BackendError>;

/// Issues requests with at most `in_flight` outstanding; outcomes come back
/// in input order. Backend failures are captured per request.
inline std::vector<RequestOutcome> complete_all(SummarizerBackend& backend,
                                                const std::vector<SummarizationRequest>& requests,
                                                std::size_t in_flight = 4) {
  std::vector<std::optional<RequestOutcome>> slots(requests.size());
  parallel_for(requests.size(), in_flight, [&](std::size_t i) {
    try {
      slots[i].emplace(backend.complete(requests[i]));
    } catch (const BackendError& e) {
      slots[i].emplace(e);
    }
  });
  std::vector<RequestOutcome> out;
  out.reserve(slots.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

// ---------------------------------------------------------------------------
// Candidate sets

struct Candidate {
  std::string text;
  std::string source;  // "head", "tail" or "refine"
  std::size_t group = 0;  // head 0, tail groups 1..n, refine n+1
  std::string backend;
  std::uint64_t seed = 0;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct PseudoSentenceSet {
  std::string image_id;
  std::vector<Candidate> candidates;
};

/// Per-request seed: stable in (run seed, image id, candidate slot).
inline std::uint64_t request_seed(std::uint64_t run_seed, const std::string& image_id, std::size_t slot) {
  // splitmix64 finalizer over the combined key.
  std::uint64_t z = fnv1a64(image_id) ^ run_seed;
  z += (static_cast<std::uint64_t>(slot) + 1) * 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  z ^= z >> 31;
  // Keep within the signed 63-bit range so JSON consumers can hold it.
  return z & 0x7fffffffffffffffULL;
}

/// Catalog texts for `ids` with exact duplicate texts dropped (first kept).
inline std::vector<std::string> group_texts(const std::vector<std::string>& ids,
                                            const DescriptionCatalog& catalog) {
  std::vector<std::string> texts;
  std::unordered_set<std::string> seen;
  for (const auto& id : ids) {
    const auto& t = catalog.text(id);
    if (seen.insert(t).second) texts.push_back(t);
  }
  return texts;
}

inline SummarizationRequest make_summarize_request(const std::string& image_id, std::size_t slot,
                                                   std::vector<std::string> texts,
                                                   std::uint64_t run_seed, std::size_t max_tokens) {
  SummarizationRequest r;
  r.kind = RequestKind::kSummarize;
  r.descriptions = std::move(texts);
  r.seed = request_seed(run_seed, image_id, slot);
  r.max_tokens = max_tokens;
  r.request_id = image_id + "#c" + std::to_string(slot + 1);
  return r;
}

inline SummarizationRequest make_refine_request(const std::string& image_id, std::size_t slot,
                                                std::string prediction, std::vector<std::string> texts,
                                                std::uint64_t run_seed, std::size_t max_tokens) {
  SummarizationRequest r;
  r.kind = RequestKind::kRefine;
  r.descriptions = std::move(texts);
  r.prediction = std::move(prediction);
  r.seed = request_seed(run_seed, image_id, slot);
  r.max_tokens = max_tokens;
  r.request_id = image_id + "#c" + std::to_string(slot + 1);
  return r;
}

inline Json candidate_to_json(const Candidate& c) {
  return Json{{"text", c.text}, {"source", c.source}, {"group", c.group},
              {"backend", c.backend}, {"seed", c.seed}};
}

inline Candidate candidate_from_json(const Json& j) {
  const std::string where = "candidate";
  return Candidate{field<std::string>(j, "text", where), field<std::string>(j, "source", where),
                   field<std::size_t>(j, "group", where), field<std::string>(j, "backend", where),
                   field<std::uint64_t>(j, "seed", where)};
}

inline Json candidates_to_json(const PseudoSentenceSet& set) {
  Json arr = Json::array();
  for (const auto& c : set.candidates) arr.push_back(candidate_to_json(c));
  return Json{{"image_id", set.image_id}, {"candidates", std::move(arr)}};
}

inline PseudoSentenceSet candidates_from_json(const Json& row) {
  const std::string where = "candidates record";
  PseudoSentenceSet set{field<std::string>(row, "image_id", where), {}};
  for (const auto& c : field<Json>(row, "candidates", where)) set.candidates.push_back(candidate_from_json(c));
  return set;
}

}  // namespace rapsg
