// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include "rapsg/clip_guidance.hpp"
#include "rapsg/digest.hpp"
#include "rapsg/error.hpp"
#include "rapsg/fluency_filter.hpp"
#include "rapsg/grouping.hpp"
#include "rapsg/jsonl.hpp"
#include "rapsg/retrieval.hpp"
#include "rapsg/summarization.hpp"
#include "rapsg/text.hpp"

namespace rapsg {

inline constexpr const char* kBackendEnvVar = "RAPSG_BACKEND_URL";
inline constexpr const char* kFallbackBackend = "fallback";
inline constexpr const char* kHashEmbeddings = "hash";

struct PipelineConfig {
  std::size_t k = kDefaultTopK;
  std::size_t m = kDefaultGroupSize;
  double tau = kDefaultTemperature;
  std::size_t max_tokens = kDefaultMaxTokens;
  std::uint64_t seed = 0;
  std::string backend = kFallbackBackend;  // "fallback" or an http:// URL
  std::size_t concurrency = 4;
  std::string image_store;
  std::string description_store;
  std::string catalog;
  std::string sentence_embeddings = kHashEmbeddings;  // "hash" or a store path
  std::string c1_embeddings;                          // store keyed by image id, optional
  std::uint32_t embed_dim = HashEmbedder::kDefaultDim;
  std::string predictions;
  std::string exclude_ids;
  std::string output_dir;
  bool stage2 = true;
  bool fail_fast = false;
  std::string cider_variant = "d";  // "d" or "plain"
  double cider_sigma = kDefaultCiderSigma;

  CiderOptions cider_options() const {
    return CiderOptions{cider_variant == "plain" ? CiderVariant::kPlain : CiderVariant::kCiderD, cider_sigma};
  }

  bool uses_fallback() const { return backend == kFallbackBackend; }

  void validate() const {
    if (m < 1) throw UsageError("config: m must be >= 1");
    if (k < m) throw UsageError("config: k must be >= m");
    if ((k - m) % m != 0) {
      throw UsageError("config: (k - m) must be divisible by m (k=" + std::to_string(k) +
                       ", m=" + std::to_string(m) + ")");
    }
    if (!(tau > 0.0)) throw UsageError("config: tau must be > 0");
    if (max_tokens < 1) throw UsageError("config: max_tokens must be >= 1");
    if (concurrency < 1) throw UsageError("config: concurrency must be >= 1");
    if (embed_dim < 1) throw UsageError("config: embed_dim must be >= 1");
    if (cider_variant != "d" && cider_variant != "plain") {
      throw UsageError("config: cider_variant must be 'd' or 'plain'");
    }
    if (!(cider_sigma > 0.0)) throw UsageError("config: cider_sigma must be > 0");
    if (!uses_fallback() && backend.rfind("http://", 0) != 0) {
      throw UsageError("config: backend must be 'fallback' or an http:// URL");
    }
    for (auto [key, value] : {std::pair{"image_store", &image_store},
                              std::pair{"description_store", &description_store},
                              std::pair{"catalog", &catalog}, std::pair{"output_dir", &output_dir}}) {
      if (value->empty()) throw UsageError(std::string("config: ") + key + " is required");
    }
    if (stage2 && predictions.empty()) {
      throw UsageError("config: stage2 is enabled but no predictions file is configured");
    }
    if (sentence_embeddings != kHashEmbeddings && c1_embeddings.empty()) {
      throw UsageError("config: a sentence embedding store requires c1_embeddings for the head summaries");
    }
  }

  /// Applies one key=value setting; unknown keys are an error.
  void set(std::string_view key, std::string_view raw) {
    const std::string value(raw);
    auto as_size = [&](std::string_view what) {
      std::size_t v = 0;
      auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
      if (ec != std::errc{} || p != value.data() + value.size()) {
        throw UsageError("config: " + std::string(what) + " expects a non-negative integer, got '" + value + "'");
      }
      return v;
    };
    auto as_double = [&](std::string_view what) {
      double v = 0.0;
      auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
      if (ec != std::errc{} || p != value.data() + value.size()) {
        throw UsageError("config: " + std::string(what) + " expects a number, got '" + value + "'");
      }
      return v;
    };
    auto as_bool = [&](std::string_view what) {
      if (value == "true" || value == "1" || value == "yes") return true;
      if (value == "false" || value == "0" || value == "no") return false;
      throw UsageError("config: " + std::string(what) + " expects true/false, got '" + value + "'");
    };

    if (key == "k") k = as_size(key);
    else if (key == "m") m = as_size(key);
    else if (key == "tau") tau = as_double(key);
    else if (key == "max_tokens") max_tokens = as_size(key);
    else if (key == "seed") seed = as_size(key);
    else if (key == "backend") backend = value;
    else if (key == "concurrency") concurrency = as_size(key);
    else if (key == "image_store") image_store = value;
    else if (key == "description_store") description_store = value;
    else if (key == "catalog") catalog = value;
    else if (key == "sentence_embeddings") sentence_embeddings = value;
    else if (key == "c1_embeddings") c1_embeddings = value;
    else if (key == "embed_dim") embed_dim = static_cast<std::uint32_t>(as_size(key));
    else if (key == "predictions") predictions = value;
    else if (key == "exclude_ids") exclude_ids = value;
    else if (key == "output_dir") output_dir = value;
    else if (key == "stage2") stage2 = as_bool(key);
    else if (key == "fail_fast") fail_fast = as_bool(key);
    else if (key == "cider_variant") cider_variant = value;
    else if (key == "cider_sigma") cider_sigma = as_double(key);
    else throw UsageError("config: unknown key '" + std::string(key) + "'");
  }

  /// Flat key=value text, '#' starts a comment. Relative paths are resolved
  /// against the directory holding the file.
  static PipelineConfig from_text(std::string_view text, const std::filesystem::path& base_dir = {}) {
    PipelineConfig cfg;
    cfg.merge_text(text, base_dir);
    return cfg;
  }

  void merge_text(std::string_view text, const std::filesystem::path& base_dir = {}) {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw UsageError("config line " + std::to_string(lineno) + ": expected key=value");
      }
      const auto key = trim(line.substr(0, eq));
      auto value = trim(line.substr(eq + 1));
      if (is_path_key(key) && !value.empty() && !base_dir.empty() && value != kHashEmbeddings &&
          std::filesystem::path(value).is_relative()) {
        value = (base_dir / value).lexically_normal().string();
      }
      set(key, value);
    }
  }

  static PipelineConfig from_file(const std::filesystem::path& path) {
    return from_text(read_file(path), path.parent_path());
  }

  void apply_environment() {
    if (const char* url = std::getenv(kBackendEnvVar); url != nullptr && *url != '\0') backend = url;
  }

  static bool is_path_key(std::string_view key) {
    return key == "image_store" || key == "description_store" || key == "catalog" ||
           key == "sentence_embeddings" || key == "c1_embeddings" || key == "predictions" ||
           key == "exclude_ids" || key == "output_dir";
  }

  Json snapshot() const {
    return Json{{"k", k},
                {"m", m},
                {"tau", tau},
                {"max_tokens", max_tokens},
                {"seed", seed},
                {"backend", backend},
                {"concurrency", concurrency},
                {"image_store", image_store},
                {"description_store", description_store},
                {"catalog", catalog},
                {"sentence_embeddings", sentence_embeddings},
                {"c1_embeddings", c1_embeddings},
                {"embed_dim", embed_dim},
                {"predictions", predictions},
                {"exclude_ids", exclude_ids},
                {"output_dir", output_dir},
                {"stage2", stage2},
                {"fail_fast", fail_fast},
                {"cider_variant", cider_variant},
                {"cider_sigma", cider_sigma}};
  }

  static PipelineConfig from_snapshot(const Json& j) {
    PipelineConfig cfg;
    for (const auto& [key, value] : j.items()) {
      if (value.is_string()) {
        cfg.set(key, value.get<std::string>());
      } else if (value.is_boolean()) {
        cfg.set(key, value.get<bool>() ? "true" : "false");
      } else if (value.is_number_float()) {
        cfg.set(key, format_double(value.get<double>()));
      } else {
        cfg.set(key, value.dump());
      }
    }
    return cfg;
  }

  /// Digest over every setting that can change output bytes.
  std::string content_digest() const {
    Json j = snapshot();
    j.erase("concurrency");
    j.erase("fail_fast");
    j.erase("output_dir");
    return sha256_hex(dump_line(j));
  }
};

}  // namespace rapsg
