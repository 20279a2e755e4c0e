// SPDX-License-Identifier: Apache-2.0
//
// `rapsg` command-line front end. Subcommands:
//   retrieve, group, summarize, refine, filter, guidance, score, run, resume
#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rapsg/clip_guidance.hpp"
#include "rapsg/config.hpp"
#include "rapsg/embedding_store.hpp"
#include "rapsg/fluency_filter.hpp"
#include "rapsg/grouping.hpp"
#include "rapsg/jsonl.hpp"
#include "rapsg/metrics.hpp"
#include "rapsg/pipeline.hpp"
#include "rapsg/retrieval.hpp"
#include "rapsg/summarization.hpp"

namespace rapsg::cli {

namespace fs = std::filesystem;

struct BackendFlags {
  std::string backend = kFallbackBackend;
  std::uint64_t seed = 0;
  std::size_t max_tokens = kDefaultMaxTokens;

  void add(CLI::App* app) {
    app->add_option("--backend", backend, "'fallback' or summarizer service URL (env RAPSG_BACKEND_URL)");
    app->add_option("--seed", seed, "run seed forwarded to the summarizer");
    app->add_option("--max-tokens", max_tokens, "maximum tokens per generated sentence");
  }

  std::unique_ptr<SummarizerBackend> make() const {
    std::string spec = backend;
    if (const char* url = std::getenv(kBackendEnvVar); url != nullptr && *url != '\0') spec = url;
    return make_backend(spec);
  }
};

inline std::map<std::string, TopK> load_topk(const fs::path& path) {
  std::map<std::string, TopK> out;
  for (const auto& row : read_jsonl(path)) {
    auto t = topk_from_json(row);
    out.emplace(t.image_id, std::move(t));
  }
  return out;
}

inline int cmd_retrieve(const fs::path& images_path, const fs::path& desc_path, const fs::path& catalog_path,
                        const std::string& exclude_path, std::size_t k, std::size_t threads, const fs::path& out) {
  const auto images = ensure_normalized(load_store(images_path));
  auto catalog = load_catalog(catalog_path);
  if (!exclude_path.empty()) catalog = overlap_filter(catalog, load_id_list(exclude_path));
  const auto descriptions = restrict_to_catalog(ensure_normalized(load_store(desc_path)), catalog);
  std::vector<Json> rows;
  for (const auto& t : retrieve_all(images, descriptions, k, threads)) rows.push_back(topk_to_json(t));
  write_file_atomic(out, to_jsonl(rows));
  return 0;
}

struct GroupArgs {
  fs::path topk;
  std::size_t m = kDefaultGroupSize;
  std::string c1_embeddings;
  std::string desc_embeddings;
  std::string catalog;
  std::uint32_t embed_dim = HashEmbedder::kDefaultDim;
  BackendFlags backend;
  fs::path out;
};

inline int cmd_group(const GroupArgs& a) {
  std::optional<DescriptionCatalog> catalog;
  if (!a.catalog.empty()) catalog = load_catalog(a.catalog);
  if ((a.c1_embeddings.empty() || a.desc_embeddings.empty()) && !catalog) {
    throw UsageError("group: --catalog is required unless both --c1-embeddings and --desc-embeddings are given");
  }
  const HashEmbedder embedder(a.embed_dim);
  std::optional<EmbeddingStore> c1_store;
  if (!a.c1_embeddings.empty()) c1_store = ensure_normalized(load_store(a.c1_embeddings));
  const EmbeddingStore sentences = a.desc_embeddings.empty()
                                       ? hash_sentence_store(*catalog, embedder)
                                       : ensure_normalized(load_store(a.desc_embeddings));
  const C1Source c1_source = c1_store ? C1Source{&*c1_store, nullptr} : C1Source{nullptr, &embedder};
  auto backend = a.backend.make();

  std::vector<Json> rows;
  for (const auto& row : read_jsonl(a.topk)) {
    const auto topk = topk_from_json(row);
    validate_group_shape(topk.entries.size(), a.m);
    const auto head = select_head(topk, a.m);
    std::string c1_text;
    if (!c1_store) {
      c1_text = summarize_head(topk.image_id, head, *catalog, *backend, a.backend.seed, a.backend.max_tokens).text;
    }
    const auto c1 = c1_source.embed(topk.image_id, c1_text);
    rows.push_back(plan_to_json(partition_remainder(topk, head, c1, sentences)));
  }
  write_file_atomic(a.out, to_jsonl(rows));
  return 0;
}

inline int cmd_summarize(const fs::path& plan_path, const fs::path& catalog_path, const BackendFlags& flags,
                         const fs::path& out) {
  const auto catalog = load_catalog(catalog_path);
  auto backend = flags.make();
  std::vector<Json> rows;
  for (const auto& row : read_jsonl(plan_path)) {
    const auto plan = plan_from_json(row);
    PseudoSentenceSet set{plan.image_id, {}};
    set.candidates.push_back(
        summarize_head(plan.image_id, plan.head, catalog, *backend, flags.seed, flags.max_tokens));
    for (auto& c : summarize_tails(plan, catalog, *backend, flags.seed, flags.max_tokens)) {
      set.candidates.push_back(std::move(c));
    }
    rows.push_back(candidates_to_json(set));
  }
  write_file_atomic(out, to_jsonl(rows));
  return 0;
}

inline int cmd_refine(const fs::path& candidates_path, const fs::path& topk_path, const fs::path& catalog_path,
                      const fs::path& predictions_path, const BackendFlags& flags, const fs::path& out) {
  const auto catalog = load_catalog(catalog_path);
  const auto topks = load_topk(topk_path);
  const auto predictions = load_predictions(predictions_path);
  auto backend = flags.make();
  std::vector<Json> rows;
  for (const auto& row : read_jsonl(candidates_path)) {
    auto set = candidates_from_json(row);
    auto t = topks.find(set.image_id);
    if (t == topks.end()) throw InputError("refine: no topk record for '" + set.image_id + "'");
    const auto* prediction = predictions.find(set.image_id);
    if (prediction == nullptr) throw InputError("refine: no prediction for '" + set.image_id + "'");
    set.candidates.push_back(refine_candidate(set.image_id, set.candidates.size(), *prediction, t->second, catalog,
                                              *backend, flags.seed, flags.max_tokens));
    rows.push_back(candidates_to_json(set));
  }
  write_file_atomic(out, to_jsonl(rows));
  return 0;
}

inline int cmd_filter(const fs::path& candidates_path, const fs::path& predictions_path,
                      const CiderOptions& options, const fs::path& out) {
  const auto predictions = load_predictions(predictions_path);
  const auto idf = build_idf(predictions.corpus);
  std::vector<Json> rows;
  for (const auto& row : read_jsonl(candidates_path)) {
    const auto set = candidates_from_json(row);
    const auto* prediction = predictions.find(set.image_id);
    if (prediction == nullptr) throw InputError("filter: no prediction for '" + set.image_id + "'");
    rows.push_back(filter_to_json(select_best(set.image_id, candidate_texts(set), *prediction, idf, options)));
  }
  write_file_atomic(out, to_jsonl(rows));
  return 0;
}

/// Gradient rows are written as "q<i>:<image id>" then "k<i>:<text id>".
inline int cmd_guidance(const fs::path& images_path, const fs::path& texts_path, const fs::path& pairs_path,
                        double tau, bool symmetric, const fs::path& out) {
  const auto images = ensure_normalized(load_store(images_path));
  const auto texts = ensure_normalized(load_store(texts_path));
  std::vector<std::string> image_ids;
  std::vector<std::string> text_ids;
  std::size_t line = 0;
  for (const auto& row : read_jsonl(pairs_path)) {
    const auto where = pairs_path.string() + " entry " + std::to_string(++line);
    image_ids.push_back(field<std::string>(row, "image_id", where));
    text_ids.push_back(field<std::string>(row, "text_id", where));
  }
  auto batch = GuidanceBatch::from_rows(rows_to_matrix(images, image_ids), rows_to_matrix(texts, text_ids), tau);
  const auto result = infonce_loss(batch, symmetric);

  const std::size_t b = batch.size();
  const std::size_t d = batch.dim();
  std::vector<std::string> ids;
  std::vector<float> data;
  ids.reserve(2 * b);
  data.reserve(2 * b * d);
  for (std::size_t i = 0; i < b; ++i) {
    ids.push_back("q" + std::to_string(i) + ":" + image_ids[i]);
    for (double v : result.grad_images.row(i)) data.push_back(static_cast<float>(v));
  }
  for (std::size_t i = 0; i < b; ++i) {
    ids.push_back("k" + std::to_string(i) + ":" + text_ids[i]);
    for (double v : result.grad_texts.row(i)) data.push_back(static_cast<float>(v));
  }
  save_store(EmbeddingStore(std::move(ids), static_cast<std::uint32_t>(d), std::move(data), false), out);

  double clip_sum = 0.0;
  for (std::size_t i = 0; i < b; ++i) clip_sum += clip_s(images.row(image_ids[i]), texts.row(text_ids[i]));
  Json summary{{"loss", result.loss}, {"B", b}, {"d", d}, {"tau", tau}, {"symmetric", symmetric},
               {"clip_s_mean", clip_sum / static_cast<double>(b)}};
  auto summary_path = out;
  summary_path += ".json";
  write_file_atomic(summary_path, dump_line(summary) + "\n");
  std::cout << dump_line(summary) << "\n";
  return 0;
}

inline std::string candidate_caption(const Json& row, const std::string& where) {
  if (auto it = row.find("caption"); it != row.end()) return it->get<std::string>();
  if (auto it = row.find("selected_sentence"); it != row.end()) return it->get<std::string>();
  if (auto it = row.find("filter"); it != row.end()) return field<std::string>(*it, "selected_sentence", where);
  throw InputError(where + ": needs 'caption', 'selected_sentence' or 'filter.selected_sentence'");
}

inline int cmd_score(const fs::path& candidates_path, const fs::path& references_path, const fs::path& out) {
  std::map<std::string, std::vector<std::string>> refs;
  std::size_t line = 0;
  for (const auto& row : read_jsonl(references_path)) {
    const auto where = references_path.string() + " entry " + std::to_string(++line);
    refs[field<std::string>(row, "image_id", where)] = field<std::vector<std::string>>(row, "references", where);
  }
  std::vector<std::string> candidates;
  std::vector<std::vector<std::string>> references;
  line = 0;
  for (const auto& row : read_jsonl(candidates_path)) {
    const auto where = candidates_path.string() + " entry " + std::to_string(++line);
    const auto id = field<std::string>(row, "image_id", where);
    auto it = refs.find(id);
    if (it == refs.end()) throw InputError(where + ": no references for '" + id + "'");
    candidates.push_back(candidate_caption(row, where));
    references.push_back(it->second);
  }
  const auto s = score_corpus(candidates, references);
  Json j{{"bleu", s.bleu}, {"rouge_l", s.rouge_l}, {"sentence_count", s.sentence_count}};
  write_file_atomic(out, dump_line(j) + "\n");
  std::cout << dump_line(j) << "\n";
  return 0;
}

/// Registers one override flag per config key (both --max_tokens and
/// --max-tokens spellings).
inline void add_config_flags(CLI::App* app, std::map<std::string, std::string>& overrides) {
  const auto keys = PipelineConfig{}.snapshot();
  for (const auto& [key, _] : keys.items()) {
    std::string dashed = key;
    std::replace(dashed.begin(), dashed.end(), '_', '-');
    std::string names = "--" + key;
    if (dashed != key) names += ",--" + dashed;
    app->add_option_function<std::string>(
        names, [&overrides, key = key](const std::string& v) { overrides[key] = v; }, "override config key " + key);
  }
}

inline PipelineConfig assemble_config(const std::string& config_path, const std::map<std::string, std::string>& overrides,
                                      std::optional<PipelineConfig> base = std::nullopt) {
  PipelineConfig cfg = base.value_or(PipelineConfig{});
  if (!config_path.empty()) cfg = PipelineConfig::from_file(config_path);
  cfg.apply_environment();
  for (const auto& [key, value] : overrides) cfg.set(key, value);
  return cfg;
}

inline void report(const RunResult& r) {
  const auto& s = r.manifest.at("summary");
  std::cerr << "images: " << s.at("total") << " ok: " << s.at("ok") << " error: " << s.at("error")
            << " executed: " << r.executed.size() << "\n";
}

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Pseudo-caption generation from retrieved image descriptions"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  fs::path images, descriptions, catalog, out, topk, plan, candidates, predictions, texts, pairs, references;
  std::string exclude;
  std::size_t k = kDefaultTopK;
  std::size_t threads = 1;
  double tau = kDefaultTemperature;
  bool symmetric = false;
  std::string cider_variant = "d";
  double sigma = kDefaultCiderSigma;

  auto* retrieve = app.add_subcommand("retrieve", "rank descriptions per image and keep the top k");
  retrieve->add_option("--images", images, "image embedding store")->required();
  retrieve->add_option("--descriptions", descriptions, "description embedding store")->required();
  retrieve->add_option("--catalog", catalog, "description catalog (JSON Lines)")->required();
  retrieve->add_option("--exclude", exclude, "source-image ids to drop from the catalog");
  retrieve->add_option("--k", k, "descriptions kept per image");
  retrieve->add_option("--threads", threads, "worker threads");
  retrieve->add_option("--out", out)->required();

  GroupArgs group_args;
  auto* group = app.add_subcommand("group", "split each TopK into a head group and similarity-ranked tail groups");
  group->add_option("--topk", group_args.topk)->required();
  group->add_option("--m", group_args.m, "group size");
  group->add_option("--c1-embeddings", group_args.c1_embeddings, "head-summary embeddings keyed by image id");
  group->add_option("--desc-embeddings", group_args.desc_embeddings, "sentence embeddings keyed by description id");
  group->add_option("--catalog", group_args.catalog, "catalog, for hash embeddings and head summaries");
  group->add_option("--embed-dim", group_args.embed_dim, "hash embedder dimensionality");
  group_args.backend.add(group);
  group->add_option("--out", group_args.out)->required();

  BackendFlags gen_flags;
  auto* summarize = app.add_subcommand("summarize", "summarize grouping plans into stage-one candidates");
  summarize->add_option("--plan", plan)->required();
  summarize->add_option("--catalog", catalog)->required();
  gen_flags.add(summarize);
  summarize->add_option("--out", out)->required();

  auto* refine_cmd = app.add_subcommand("refine", "append the refined candidate from captioner predictions");
  refine_cmd->add_option("--candidates", candidates)->required();
  refine_cmd->add_option("--topk", topk)->required();
  refine_cmd->add_option("--catalog", catalog)->required();
  refine_cmd->add_option("--predictions", predictions)->required();
  gen_flags.add(refine_cmd);
  refine_cmd->add_option("--out", out)->required();

  auto* filter = app.add_subcommand("filter", "select the best candidate per image by CIDEr against the prediction");
  filter->add_option("--candidates", candidates)->required();
  filter->add_option("--predictions", predictions)->required();
  filter->add_option("--cider-variant", cider_variant)->check(CLI::IsMember({"d", "plain"}));
  filter->add_option("--sigma", sigma);
  filter->add_option("--out", out)->required();

  auto* guidance = app.add_subcommand("guidance", "InfoNCE loss and gradients for paired embeddings");
  guidance->add_option("--images", images)->required();
  guidance->add_option("--texts", texts)->required();
  guidance->add_option("--pairs", pairs, "JSON Lines of {image_id, text_id}")->required();
  guidance->add_option("--tau", tau);
  guidance->add_flag("--symmetric", symmetric, "average image- and text-anchored losses");
  guidance->add_option("--out", out, "gradient store; summary goes to <out>.json")->required();

  auto* score = app.add_subcommand("score", "corpus BLEU-1..4 and ROUGE-L");
  score->add_option("--candidates", candidates)->required();
  score->add_option("--references", references)->required();
  score->add_option("--out", out)->required();

  std::string config_path;
  std::map<std::string, std::string> overrides;
  auto* run = app.add_subcommand("run", "run the full pipeline");
  run->add_option("--config", config_path, "key=value configuration file");
  add_config_flags(run, overrides);

  std::string manifest_path;
  auto* resume_cmd = app.add_subcommand("resume", "re-run failed images of a previous run");
  resume_cmd->add_option("--manifest", manifest_path)->required();
  resume_cmd->add_option("--config", config_path, "configuration; defaults to the manifest's snapshot");
  add_config_flags(resume_cmd, overrides);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (*retrieve) return cmd_retrieve(images, descriptions, catalog, exclude, k, threads, out);
    if (*group) return cmd_group(group_args);
    if (*summarize) return cmd_summarize(plan, catalog, gen_flags, out);
    if (*refine_cmd) return cmd_refine(candidates, topk, catalog, predictions, gen_flags, out);
    if (*filter) {
      const CiderOptions options{cider_variant == "plain" ? CiderVariant::kPlain : CiderVariant::kCiderD, sigma};
      return cmd_filter(candidates, predictions, options, out);
    }
    if (*guidance) return cmd_guidance(images, texts, pairs, tau, symmetric, out);
    if (*score) return cmd_score(candidates, references, out);
    if (*run) {
      const auto result = run_pipeline(assemble_config(config_path, overrides));
      report(result);
      return static_cast<int>(result.exit_code);
    }
    if (*resume_cmd) {
      std::optional<PipelineConfig> base;
      if (config_path.empty()) {
        base = PipelineConfig::from_snapshot(Json::parse(read_file(manifest_path)).at("config"));
      }
      const auto result = resume(manifest_path, assemble_config(config_path, overrides, base));
      report(result);
      return static_cast<int>(result.exit_code);
    }
  } catch (const Error& e) {
    std::cerr << "rapsg: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "rapsg: malformed input: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kInputFormat);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "rapsg: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kInputFormat);
  }
  return static_cast<int>(ExitCode::kUsage);
}

}  // namespace rapsg::cli
