// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <atomic>
#include <mutex>
#include <random>
#include <thread>

#include "rapsg/summarization.hpp"
#include "test_util.hpp"

namespace rapsg {
namespace {

SummarizationRequest summarize_req(std::vector<std::string> d, std::size_t max_tokens = kDefaultMaxTokens) {
  SummarizationRequest r;
  r.descriptions = std::move(d);
  r.max_tokens = max_tokens;
  r.request_id = "t";
  return r;
}

SummarizationRequest refine_req(std::string p, std::vector<std::string> d) {
  SummarizationRequest r;
  r.kind = RequestKind::kRefine;
  r.prediction = std::move(p);
  r.descriptions = std::move(d);
  r.request_id = "t";
  return r;
}

TEST(ExtractiveFallback, SingleDescriptionIsIdentity) {
  ExtractiveSummarizer fb;
  EXPECT_EQ(summarize_group(summarize_req({"a red bus"}), fb), "a red bus");
}

TEST(ExtractiveFallback, SkateboardGolden) {
  ExtractiveSummarizer fb;
  EXPECT_EQ(summarize_group(summarize_req({"a man rides a skateboard", "a skateboard trick", "man in the air"}), fb),
            "a man rides a skateboard trick in the air");
}

TEST(ExtractiveFallback, NormalizesAndTruncates) {
  EXPECT_EQ(extractive_summarize({"A Dog, running!", "the DOG sleeps"}), "a dog running the sleeps");
  EXPECT_EQ(extractive_summarize({"one two three four five"}, 3), "one two three");
  EXPECT_EQ(extractive_summarize({"one two", "three four", "five"}, 3), "one two three");
}

TEST(ExtractiveFallback, RefineGoldens) {
  ExtractiveSummarizer fb;
  EXPECT_EQ(refine(refine_req("a dog runs", {"a dog", "dog runs"}), fb), "a dog runs");
  EXPECT_EQ(refine(refine_req("a dog runs", {"brown dog on grass"}), fb), "a dog runs brown on grass");
}

TEST(ExtractiveFallback, RefineWithoutPredictionIsPreconditionError) {
  ExtractiveSummarizer fb;
  auto r = refine_req("x", {"a"});
  r.prediction.reset();
  EXPECT_THROW(refine(r, fb), UsageError);
  EXPECT_THROW(summarize_group(summarize_req({}), fb), UsageError);
  EXPECT_THROW(refine(summarize_req({"a"}), fb), UsageError);
}

TEST(ExtractiveFallback, EmptyOutputIsBackendError) {
  ExtractiveSummarizer fb;
  EXPECT_THROW(fb.complete(summarize_req({"!!!", "..."})), BackendError);
}

TEST(ExtractiveFallback, DeterministicAcrossSeedsAndCalls) {
  std::mt19937_64 rng(9);
  ExtractiveSummarizer fb;
  for (int i = 0; i < 100; ++i) {
    std::vector<std::string> d;
    for (int j = 0; j < 4; ++j) d.push_back(testing::random_sentence(rng, 1, 8));
    auto r = summarize_req(d);
    const auto a = fb.complete(r);
    r.seed = rng();
    EXPECT_EQ(fb.complete(r), a);
    // Output never exceeds max_tokens and never repeats a token introduced
    // by an earlier description.
    EXPECT_LE(tokenize(a).size(), kDefaultMaxTokens);
  }
}

TEST(GroupTexts, DropsExactDuplicatesKeepingFirst) {
  const DescriptionCatalog cat({{"d1", "a dog", std::nullopt}, {"d2", "a cat", std::nullopt}, {"d3", "a dog", std::nullopt}});
  EXPECT_EQ(group_texts({"d3", "d2", "d1"}, cat), (std::vector<std::string>{"a dog", "a cat"}));
}

TEST(RequestSeed, StableAndDistinct) {
  EXPECT_EQ(request_seed(7, "img1", 0), request_seed(7, "img1", 0));
  EXPECT_NE(request_seed(7, "img1", 0), request_seed(7, "img1", 1));
  EXPECT_NE(request_seed(7, "img1", 0), request_seed(8, "img1", 0));
  EXPECT_NE(request_seed(7, "img1", 0), request_seed(7, "img2", 0));
}

// ---------------------------------------------------------------------------
// Wire protocol contract, exercised against an in-process service.

class MockService {
 public:
  MockService() {
    server_.Post("/v1/summarize", [this](const httplib::Request& req, httplib::Response& res) {
      handle(req, res, false);
    });
    server_.Post("/v1/refine", [this](const httplib::Request& req, httplib::Response& res) {
      handle(req, res, true);
    });
    server_.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"status":"ok","mode":"echo"})", "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockService() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  std::atomic<int> fail_next{0};     // respond 503 to this many requests
  std::atomic<int> status_override{0};
  std::atomic<bool> empty_summary{false};
  std::atomic<bool> garbage_body{false};
  std::atomic<int> calls{0};
  std::mutex mu;
  std::vector<Json> bodies;

 private:
  void handle(const httplib::Request& req, httplib::Response& res, bool is_refine) {
    ++calls;
    Json body;
    try {
      body = Json::parse(req.body);
    } catch (...) {
      error(res, 400, "bad_request", "malformed body");
      return;
    }
    {
      std::lock_guard lock(mu);
      bodies.push_back(body);
    }
    if (fail_next > 0) {
      --fail_next;
      error(res, 503, "unavailable", "warming up");
      return;
    }
    if (status_override != 0) {
      error(res, status_override, "rejected", "forced failure");
      return;
    }
    if (garbage_body) {
      res.set_content("not json", "application/json");
      return;
    }
    const bool shape_ok = body.contains("descriptions") && body.contains("seed") && body.contains("max_tokens") &&
                          body["descriptions"].is_array() && (!is_refine || body.contains("prediction"));
    if (!shape_ok) {
      error(res, 400, "bad_request", "missing fields");
      return;
    }
    const auto descs = body["descriptions"].get<std::vector<std::string>>();
    const auto max_tokens = body["max_tokens"].get<std::size_t>();
    std::string summary = is_refine ? extractive_refine(body["prediction"].get<std::string>(), descs, max_tokens)
                                    : extractive_summarize(descs, max_tokens);
    if (empty_summary) summary.clear();
    res.set_content(Json{{"summary", summary}}.dump(), "application/json");
  }

  static void error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    res.status = status;
    res.set_content(Json{{"error", {{"code", code}, {"message", message}}}}.dump(), "application/json");
  }

  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

RetryPolicy fast_retries() { return RetryPolicy{3, std::chrono::milliseconds(1), std::chrono::milliseconds(2000)}; }

TEST(HttpSummarizer, SummarizeAndRefineMatchFallbackBytes) {
  MockService svc;
  HttpSummarizer client(svc.url(), fast_retries());
  ExtractiveSummarizer fb;
  auto s = summarize_req({"a man rides a skateboard", "a skateboard trick", "man in the air"});
  s.seed = 42;
  EXPECT_EQ(client.complete(s), fb.complete(s));
  const auto r = refine_req("a dog runs", {"brown dog on grass"});
  EXPECT_EQ(client.complete(r), "a dog runs brown on grass");

  std::lock_guard lock(svc.mu);
  ASSERT_EQ(svc.bodies.size(), 2u);
  EXPECT_EQ(svc.bodies[0]["seed"], 42);
  EXPECT_EQ(svc.bodies[0]["max_tokens"], 20);
  EXPECT_FALSE(svc.bodies[0].contains("prediction"));
  EXPECT_EQ(svc.bodies[1]["prediction"], "a dog runs");
}

TEST(HttpSummarizer, Health) {
  MockService svc;
  const auto h = HttpSummarizer(svc.url() + "/", fast_retries()).health();
  EXPECT_EQ(h.status, "ok");
  EXPECT_EQ(h.mode, "echo");
}

TEST(HttpSummarizer, RetriesServerErrorsThenSucceeds) {
  MockService svc;
  svc.fail_next = 2;
  HttpSummarizer client(svc.url(), fast_retries());
  EXPECT_EQ(client.complete(summarize_req({"a red bus"})), "a red bus");
  EXPECT_EQ(svc.calls, 3);
}

TEST(HttpSummarizer, GivesUpAfterThreeAttempts) {
  MockService svc;
  svc.fail_next = 10;
  HttpSummarizer client(svc.url(), fast_retries());
  auto r = summarize_req({"a red bus"});
  r.request_id = "img7#c2";
  try {
    client.complete(r);
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.request_id(), "img7#c2");
    EXPECT_NE(std::string(e.what()).find("unavailable"), std::string::npos);
  }
  EXPECT_EQ(svc.calls, 3);
}

TEST(HttpSummarizer, BackoffDoublesFromInitialDelay) {
  MockService svc;
  svc.fail_next = 2;
  HttpSummarizer client(svc.url(), RetryPolicy{3, std::chrono::milliseconds(40), std::chrono::milliseconds(2000)});
  const auto start = std::chrono::steady_clock::now();
  client.complete(summarize_req({"a red bus"}));
  EXPECT_GE(std::chrono::steady_clock::now() - start, std::chrono::milliseconds(120));  // 40 + 80
}

TEST(HttpSummarizer, ClientErrorsAreNotRetried) {
  MockService svc;
  svc.status_override = 400;
  HttpSummarizer client(svc.url(), fast_retries());
  EXPECT_THROW(client.complete(summarize_req({"a"})), BackendError);
  EXPECT_EQ(svc.calls, 1);
}

TEST(HttpSummarizer, EmptyOrMalformedResponsesAreProtocolErrors) {
  MockService svc;
  HttpSummarizer client(svc.url(), fast_retries());
  svc.empty_summary = true;
  EXPECT_THROW(client.complete(summarize_req({"a"})), BackendError);
  svc.empty_summary = false;
  svc.garbage_body = true;
  EXPECT_THROW(client.complete(summarize_req({"a"})), BackendError);
}

TEST(HttpSummarizer, UnreachableServiceFailsAfterRetries) {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  HttpSummarizer client("http://127.0.0.1:" + std::to_string(port), fast_retries());
  EXPECT_THROW(client.complete(summarize_req({"a"})), BackendError);
  EXPECT_THROW(HttpSummarizer("ftp://x"), UsageError);
}

TEST(CompleteAll, KeepsInputOrderAndIsolatesFailures) {
  MockService svc;
  HttpSummarizer client(svc.url(), fast_retries());
  std::vector<SummarizationRequest> reqs;
  for (int i = 0; i < 12; ++i) {
    auto r = summarize_req({"item" + std::to_string(i) + " common"});
    r.request_id = "r" + std::to_string(i);
    reqs.push_back(r);
  }
  reqs[5].descriptions = {"!!!"};  // tokenizes to nothing -> empty summary -> protocol error
  const auto out = complete_all(client, reqs, 4);
  ASSERT_EQ(out.size(), reqs.size());
  for (int i = 0; i < 12; ++i) {
    if (i == 5) {
      ASSERT_TRUE(std::holds_alternative<BackendError>(out[i]));
      EXPECT_EQ(std::get<BackendError>(out[i]).request_id(), "r5");
    } else {
      ASSERT_TRUE(std::holds_alternative<std::string>(out[i]));
      EXPECT_EQ(std::get<std::string>(out[i]), "item" + std::to_string(i) + " common");
    }
  }
}

}  // namespace
}  // namespace rapsg
