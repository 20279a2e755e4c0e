// SPDX-License-Identifier: Apache-2.0
//
// End-to-end pseudo-caption generation:
//   retrieve -> group -> summarize -> refine -> filter
// Each image is processed independently; records are written in image-store
// order by a single writer, and per-image failures are contained in the
// manifest.
#pragma once

#include <atomic>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rapsg/config.hpp"
#include "rapsg/digest.hpp"
#include "rapsg/embedding_store.hpp"
#include "rapsg/fluency_filter.hpp"
#include "rapsg/grouping.hpp"
#include "rapsg/jsonl.hpp"
#include "rapsg/parallel.hpp"
#include "rapsg/retrieval.hpp"
#include "rapsg/summarization.hpp"

namespace rapsg {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kRecordsFile = "pseudo_captions.jsonl";
inline constexpr const char* kManifestFile = "manifest.json";

// ---------------------------------------------------------------------------
// Shared stage helpers (also used by the single-stage CLI commands)

inline EmbeddingStore ensure_normalized(EmbeddingStore store) {
  return store.normalized() ? std::move(store) : l2_normalize(store);
}

/// Embeds every catalog text with the hash embedder, in catalog order.
inline EmbeddingStore hash_sentence_store(const DescriptionCatalog& catalog, const HashEmbedder& embedder) {
  std::vector<std::string> ids;
  std::vector<float> data;
  ids.reserve(catalog.size());
  data.reserve(catalog.size() * embedder.dim());
  for (const auto& e : catalog.entries()) {
    ids.push_back(e.id);
    const auto v = embedder.embed(e.text);
    data.insert(data.end(), v.begin(), v.end());
  }
  return EmbeddingStore(std::move(ids), embedder.dim(), std::move(data), true);
}

/// Where the head-summary embedding comes from: a precomputed store keyed by
/// image id, or the hash embedder applied to the summary text.
struct C1Source {
  const EmbeddingStore* store = nullptr;
  const HashEmbedder* embedder = nullptr;

  std::vector<float> embed(const std::string& image_id, const std::string& c1_text) const {
    if (store != nullptr) {
      auto row = store->row(image_id);
      return {row.begin(), row.end()};
    }
    if (embedder == nullptr) throw UsageError("no c1 embedding source configured");
    return embedder->embed(c1_text);
  }
};

inline Candidate summarize_head(const std::string& image_id, const std::vector<std::string>& head,
                                const DescriptionCatalog& catalog, SummarizerBackend& backend,
                                std::uint64_t seed, std::size_t max_tokens) {
  auto req = make_summarize_request(image_id, 0, group_texts(head, catalog), seed, max_tokens);
  return Candidate{summarize_group(req, backend), "head", 0, backend.name(), req.seed};
}

/// c2..c_{n+1}, one per tail group.
inline std::vector<Candidate> summarize_tails(const GroupingPlan& plan, const DescriptionCatalog& catalog,
                                              SummarizerBackend& backend, std::uint64_t seed,
                                              std::size_t max_tokens) {
  std::vector<Candidate> out;
  for (std::size_t g = 0; g < plan.tail_groups.size(); ++g) {
    auto req = make_summarize_request(plan.image_id, g + 1, group_texts(plan.tail_groups[g], catalog), seed,
                                      max_tokens);
    out.push_back(Candidate{summarize_group(req, backend), "tail", g + 1, backend.name(), req.seed});
  }
  return out;
}

inline Candidate refine_candidate(const std::string& image_id, std::size_t slot, const std::string& prediction,
                                  const TopK& topk, const DescriptionCatalog& catalog,
                                  SummarizerBackend& backend, std::uint64_t seed, std::size_t max_tokens) {
  std::vector<std::string> ids;
  for (const auto& e : topk.entries) ids.push_back(e.id);
  auto req = make_refine_request(image_id, slot, prediction, group_texts(ids, catalog), seed, max_tokens);
  return Candidate{refine(req, backend), "refine", slot, backend.name(), req.seed};
}

inline std::vector<std::string> candidate_texts(const PseudoSentenceSet& set) {
  std::vector<std::string> texts;
  for (const auto& c : set.candidates) texts.push_back(c.text);
  return texts;
}

/// image_id -> prediction, plus the prediction corpus in file order.
struct Predictions {
  std::unordered_map<std::string, std::string> by_image;
  std::vector<std::string> corpus;

  const std::string* find(const std::string& image_id) const {
    auto it = by_image.find(image_id);
    return it == by_image.end() ? nullptr : &it->second;
  }
};

inline Predictions load_predictions(const std::filesystem::path& path) {
  Predictions p;
  std::size_t line = 0;
  for (const auto& row : read_jsonl(path)) {
    const auto where = path.string() + " entry " + std::to_string(++line);
    auto id = field<std::string>(row, "image_id", where);
    auto text = field<std::string>(row, "prediction", where);
    if (!p.by_image.emplace(id, text).second) throw InputError(where + ": duplicate image_id '" + id + "'");
    p.corpus.push_back(std::move(text));
  }
  if (p.corpus.empty()) throw InputError(path.string() + ": no predictions");
  return p;
}

inline std::unique_ptr<SummarizerBackend> make_backend(const std::string& spec, RetryPolicy policy = {}) {
  if (spec == kFallbackBackend) return std::make_unique<ExtractiveSummarizer>();
  return std::make_unique<HttpSummarizer>(spec, policy);
}

// ---------------------------------------------------------------------------
// Run

struct ImageStatus {
  std::string image_id;
  bool ok = true;
  std::string stage;
  std::string message;
};

struct RunResult {
  Json manifest;
  ExitCode exit_code = ExitCode::kOk;
  std::vector<std::string> executed;  // image ids processed by this invocation
};

namespace detail {

struct StageClock {
  std::atomic<std::int64_t> retrieve{0}, group{0}, summarize{0}, refine{0}, filter{0};

  template <typename Fn>
  static auto timed(std::atomic<std::int64_t>& slot, Fn&& fn) {
    const auto start = std::chrono::steady_clock::now();
    struct Guard {
      std::atomic<std::int64_t>& slot;
      std::chrono::steady_clock::time_point start;
      ~Guard() {
        slot += std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - start)
                    .count();
      }
    } guard{slot, start};
    return fn();
  }

  Json to_json() const {
    auto ms = [](const std::atomic<std::int64_t>& us) { return static_cast<double>(us.load()) / 1000.0; };
    return Json{{"retrieve", ms(retrieve)}, {"group", ms(group)}, {"summarize", ms(summarize)},
                {"refine", ms(refine)}, {"filter", ms(filter)}};
  }
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

}  // namespace detail

/// Everything the per-image dataflow reads. Immutable once built.
class PipelineContext {
 public:
  explicit PipelineContext(const PipelineConfig& config) : config_(config), embedder_(config.embed_dim) {
    config_.validate();
    images_ = ensure_normalized(load_store(config_.image_store));
    auto all_descriptions = ensure_normalized(load_store(config_.description_store));
    catalog_ = load_catalog(config_.catalog);
    if (!config_.exclude_ids.empty()) catalog_ = overlap_filter(catalog_, load_id_list(config_.exclude_ids));
    descriptions_ = restrict_to_catalog(all_descriptions, catalog_);
    if (descriptions_.size() == 0) throw InputError("no descriptions left after filtering the catalog");
    if (images_.dim() != descriptions_.dim()) {
      throw InputError("image store dim " + std::to_string(images_.dim()) + " != description store dim " +
                       std::to_string(descriptions_.dim()));
    }

    if (config_.sentence_embeddings == kHashEmbeddings) {
      sentences_ = hash_sentence_store(catalog_, embedder_);
    } else {
      sentences_ = ensure_normalized(load_store(config_.sentence_embeddings));
    }
    if (!config_.c1_embeddings.empty()) {
      c1_store_ = ensure_normalized(load_store(config_.c1_embeddings));
      if (c1_store_->dim() != sentences_.dim()) {
        throw InputError("c1 embedding dim " + std::to_string(c1_store_->dim()) + " != sentence embedding dim " +
                         std::to_string(sentences_.dim()));
      }
    }
    if (!config_.predictions.empty()) {
      predictions_ = load_predictions(config_.predictions);
      idf_ = build_idf(predictions_->corpus);
    }
  }

  const PipelineConfig& config() const { return config_; }
  const EmbeddingStore& images() const { return images_; }
  const EmbeddingStore& descriptions() const { return descriptions_; }
  const DescriptionCatalog& catalog() const { return catalog_; }
  const EmbeddingStore& sentences() const { return sentences_; }
  const std::optional<Predictions>& predictions() const { return predictions_; }
  const std::optional<IdfTable>& idf() const { return idf_; }

  C1Source c1_source() const {
    return c1_store_ ? C1Source{&*c1_store_, nullptr} : C1Source{nullptr, &embedder_};
  }

  /// Input files and their digests, keyed by config name.
  Json input_digests() const {
    Json out = Json::object();
    for (auto [key, path] : {std::pair{"image_store", config_.image_store},
                             std::pair{"description_store", config_.description_store},
                             std::pair{"catalog", config_.catalog},
                             std::pair{"sentence_embeddings", config_.sentence_embeddings},
                             std::pair{"c1_embeddings", config_.c1_embeddings},
                             std::pair{"predictions", config_.predictions},
                             std::pair{"exclude_ids", config_.exclude_ids}}) {
      if (path.empty() || path == kHashEmbeddings) continue;
      out[key] = Json{{"path", path}, {"sha256", sha256_file(path)}};
    }
    return out;
  }

 private:
  PipelineConfig config_;
  HashEmbedder embedder_;
  EmbeddingStore images_;
  EmbeddingStore descriptions_;
  DescriptionCatalog catalog_;
  EmbeddingStore sentences_;
  std::optional<EmbeddingStore> c1_store_;
  std::optional<Predictions> predictions_;
  std::optional<IdfTable> idf_;
};

/// Runs every stage for one image and returns its output record.
/// `stage` tracks the stage in progress for error reporting.
inline Json process_image(const PipelineContext& ctx, const std::string& image_id, SummarizerBackend& backend,
                          detail::StageClock& clock, std::string& stage) {
  const auto& cfg = ctx.config();
  using Clock = detail::StageClock;

  stage = "retrieve";
  const TopK topk = Clock::timed(clock.retrieve, [&] {
    return top_k_descriptions(image_id, ctx.images(), ctx.descriptions(), cfg.k);
  });

  stage = "group";
  const auto head = Clock::timed(clock.group, [&] {
    validate_group_shape(topk.entries.size(), cfg.m);
    return select_head(topk, cfg.m);
  });

  stage = "summarize";
  PseudoSentenceSet set{image_id, {}};
  set.candidates.push_back(Clock::timed(clock.summarize, [&] {
    return summarize_head(image_id, head, ctx.catalog(), backend, cfg.seed, cfg.max_tokens);
  }));

  stage = "group";
  const GroupingPlan plan = Clock::timed(clock.group, [&] {
    const auto c1 = ctx.c1_source().embed(image_id, set.candidates.front().text);
    return partition_remainder(topk, head, c1, ctx.sentences());
  });

  stage = "summarize";
  for (auto& c : Clock::timed(clock.summarize, [&] {
         return summarize_tails(plan, ctx.catalog(), backend, cfg.seed, cfg.max_tokens);
       })) {
    set.candidates.push_back(std::move(c));
  }

  const std::string* prediction = ctx.predictions() ? ctx.predictions()->find(image_id) : nullptr;
  if (cfg.stage2) {
    stage = "refine";
    if (prediction == nullptr) throw InputError("no captioner prediction for image '" + image_id + "'");
    set.candidates.push_back(Clock::timed(clock.refine, [&] {
      return refine_candidate(image_id, plan.n + 1, *prediction, topk, ctx.catalog(), backend, cfg.seed,
                              cfg.max_tokens);
    }));
  }

  Json record{{"image_id", image_id}};
  record["topk"] = topk_to_json(topk)["topk"];
  Json grouping = plan_to_json(plan);
  grouping.erase("image_id");
  record["grouping"] = std::move(grouping);
  record["candidates"] = candidates_to_json(set)["candidates"];

  if (prediction != nullptr) {
    stage = "filter";
    const auto result = Clock::timed(clock.filter, [&] {
      return select_best(image_id, candidate_texts(set), *prediction, *ctx.idf(), cfg.cider_options());
    });
    Json filter = filter_to_json(result);
    filter.erase("image_id");
    record["filter"] = std::move(filter);
  }
  return record;
}

namespace detail {

struct ImageOutcome {
  std::optional<std::string> line;  // serialized record when ok
  ImageStatus status;
};

inline std::vector<ImageOutcome> execute(const PipelineContext& ctx, const std::vector<std::string>& image_ids,
                                         SummarizerBackend& backend, StageClock& clock) {
  std::vector<ImageOutcome> out(image_ids.size());
  const bool fail_fast = ctx.config().fail_fast;
  parallel_for(image_ids.size(), ctx.config().concurrency, [&](std::size_t i) {
    auto& slot = out[i];
    slot.status.image_id = image_ids[i];
    std::string stage;
    try {
      slot.line = dump_line(process_image(ctx, image_ids[i], backend, clock, stage));
    } catch (const Error& e) {
      if (fail_fast) throw;
      slot.status = ImageStatus{image_ids[i], false, stage, e.what()};
    }
  });
  return out;
}

inline Json status_to_json(const ImageStatus& s) {
  if (s.ok) return Json{{"image_id", s.image_id}, {"status", "ok"}};
  return Json{{"image_id", s.image_id}, {"status", "error"}, {"stage", s.stage}, {"message", s.message}};
}

inline Json build_manifest(const PipelineContext& ctx, const std::vector<ImageStatus>& statuses,
                           const std::string& records_digest, Json timing) {
  std::size_t ok = 0;
  Json images = Json::array();
  for (const auto& s : statuses) {
    ok += s.ok ? 1 : 0;
    images.push_back(status_to_json(s));
  }
  return Json{{"tool", "rapsg"},
              {"version", kToolVersion},
              {"created", utc_timestamp()},
              {"config", ctx.config().snapshot()},
              {"config_digest", ctx.config().content_digest()},
              {"inputs", ctx.input_digests()},
              {"outputs", Json{{"records", Json{{"path", kRecordsFile}, {"sha256", records_digest}}}}},
              {"timing_ms", std::move(timing)},
              {"images", std::move(images)},
              {"summary", Json{{"total", statuses.size()}, {"ok", ok}, {"error", statuses.size() - ok}}}};
}

inline void write_outputs(const std::filesystem::path& dir, const std::string& records, const Json& manifest) {
  write_file_atomic(dir / kRecordsFile, records);
  write_file_atomic(dir / kManifestFile, manifest.dump(2) + "\n");
}

inline ExitCode exit_for(const std::vector<ImageStatus>& statuses) {
  for (const auto& s : statuses) {
    if (!s.ok) return ExitCode::kPartial;
  }
  return ExitCode::kOk;
}

}  // namespace detail

/// Full run. Writes <output_dir>/pseudo_captions.jsonl and manifest.json.
/// `backend` overrides the configured one when given.
inline RunResult run_pipeline(const PipelineConfig& config, SummarizerBackend* backend = nullptr) {
  PipelineContext ctx(config);
  std::unique_ptr<SummarizerBackend> owned;
  if (backend == nullptr) {
    owned = make_backend(config.backend);
    backend = owned.get();
  }
  std::filesystem::create_directories(config.output_dir);

  detail::StageClock clock;
  const auto& ids = ctx.images().ids();
  auto outcomes = detail::execute(ctx, ids, *backend, clock);

  std::string records;
  std::vector<ImageStatus> statuses;
  for (auto& o : outcomes) {
    if (o.line) records += *o.line + "\n";
    statuses.push_back(o.status);
  }
  RunResult result;
  result.manifest = detail::build_manifest(ctx, statuses, sha256_hex(records), clock.to_json());
  result.exit_code = detail::exit_for(statuses);
  result.executed = ids;
  detail::write_outputs(config.output_dir, records, result.manifest);
  return result;
}

/// Re-executes only images recorded as failed (or absent) in a prior
/// manifest. Refuses when the configuration, any input, or the existing
/// records file no longer matches what the manifest recorded.
inline RunResult resume(const std::filesystem::path& manifest_path, const PipelineConfig& config,
                        SummarizerBackend* backend = nullptr) {
  const Json prior = Json::parse(read_file(manifest_path));
  if (prior.value("config_digest", std::string()) != config.content_digest()) {
    throw UsageError("resume: configuration differs from the one recorded in " + manifest_path.string());
  }
  PipelineContext ctx(config);
  if (ctx.input_digests() != prior.at("inputs")) {
    throw UsageError("resume: input files changed since the recorded run");
  }
  const std::filesystem::path dir = config.output_dir;
  const std::string old_records = read_file(dir / kRecordsFile);
  if (sha256_hex(old_records) != prior.at("outputs").at("records").at("sha256").get<std::string>()) {
    throw UsageError("resume: " + (dir / kRecordsFile).string() + " does not match the manifest digest");
  }

  std::unordered_map<std::string, std::string> kept;  // image id -> record line
  {
    std::istringstream in(old_records);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      kept.emplace(Json::parse(line).at("image_id").get<std::string>(), line);
    }
  }
  std::unordered_map<std::string, Json> prior_status;
  for (const auto& s : prior.at("images")) prior_status.emplace(s.at("image_id").get<std::string>(), s);

  std::vector<std::string> todo;
  for (const auto& id : ctx.images().ids()) {
    auto it = prior_status.find(id);
    const bool ok = it != prior_status.end() && it->second.at("status") == "ok" && kept.contains(id);
    if (!ok) todo.push_back(id);
  }

  RunResult result;
  result.executed = todo;
  if (todo.empty()) {
    result.manifest = prior;
    result.manifest["created"] = detail::utc_timestamp();
    result.exit_code = ExitCode::kOk;
    write_file_atomic(manifest_path, result.manifest.dump(2) + "\n");
    return result;
  }

  std::unique_ptr<SummarizerBackend> owned;
  if (backend == nullptr) {
    owned = make_backend(config.backend);
    backend = owned.get();
  }
  detail::StageClock clock;
  auto outcomes = detail::execute(ctx, todo, *backend, clock);
  std::unordered_map<std::string, detail::ImageOutcome*> fresh;
  for (auto& o : outcomes) fresh.emplace(o.status.image_id, &o);

  std::string records;
  std::vector<ImageStatus> statuses;
  for (const auto& id : ctx.images().ids()) {
    if (auto it = fresh.find(id); it != fresh.end()) {
      if (it->second->line) records += *it->second->line + "\n";
      statuses.push_back(it->second->status);
    } else {
      records += kept.at(id) + "\n";
      statuses.push_back(ImageStatus{id, true, {}, {}});
    }
  }
  result.manifest = detail::build_manifest(ctx, statuses, sha256_hex(records), clock.to_json());
  result.manifest["resumed_from"] = prior.value("created", std::string());
  result.manifest["reexecuted"] = todo;
  result.exit_code = detail::exit_for(statuses);
  write_file_atomic(dir / kRecordsFile, records);
  write_file_atomic(manifest_path, result.manifest.dump(2) + "\n");
  return result;
}

}  // namespace rapsg
