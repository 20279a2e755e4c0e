// SPDX-License-Identifier: Apache-2.0
//
// Writes the synthetic test fixture: 20 images, 200 region descriptions
// (dim 16), catalog, exclusion list, captioner predictions, references and a
// pipeline config. Output is a pure function of the seed.
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rapsg/embedding_store.hpp"
#include "rapsg/jsonl.hpp"

namespace {

constexpr std::uint32_t kDim = 16;
constexpr std::size_t kImages = 20;
constexpr std::size_t kDescriptions = 200;
constexpr std::size_t kVgImages = 100;     // two descriptions each
constexpr std::size_t kOverlapping = 47;   // VG images also in the caption set

const std::vector<std::string> kObjects = {"dog", "cat", "man", "woman", "bus", "car", "tree", "kite",
                                           "skateboard", "horse", "bench", "umbrella", "boat", "bird",
                                           "train", "pizza", "table", "frisbee", "child", "bicycle"};
const std::vector<std::string> kAttributes = {"red", "blue", "small", "large", "white", "black",
                                              "green", "old", "young", "wooden", "yellow", "brown"};
const std::vector<std::string> kRelations = {"on", "near", "in front of", "next to", "behind",
                                             "under", "holding", "riding", "beside"};
const std::vector<std::string> kScenes = {"grass", "street", "beach", "park", "field", "road", "water", "sky"};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }
  double gaussian() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  std::mt19937_64 gen_;
};

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.below(v.size())];
}

std::string id3(const char* prefix, std::size_t i) {
  std::string n = std::to_string(i);
  return prefix + std::string(3 - std::min<std::size_t>(3, n.size()), '0') + n;
}

struct Topic {
  std::vector<std::string> objects;
  std::vector<std::string> attributes;
  std::string scene;
  std::vector<double> center;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generate the synthetic rapsg fixture"};
  std::filesystem::path out_dir;
  std::uint64_t seed = 20231016;
  app.add_option("--out", out_dir)->required();
  app.add_option("--seed", seed);
  CLI11_PARSE(app, argc, argv);
  std::filesystem::create_directories(out_dir);

  Rng rng(seed);
  std::vector<Topic> topics(kImages);
  for (auto& t : topics) {
    for (int i = 0; i < 3; ++i) t.objects.push_back(pick(rng, kObjects));
    for (int i = 0; i < 2; ++i) t.attributes.push_back(pick(rng, kAttributes));
    t.scene = pick(rng, kScenes);
    t.center.resize(kDim);
    for (auto& c : t.center) c = rng.gaussian();
  }

  auto unit = [](std::vector<double> v) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    const double n = std::sqrt(sq);
    std::vector<float> out;
    for (double x : v) out.push_back(static_cast<float>(x / n));
    return out;
  };

  // Images.
  std::vector<std::string> image_ids;
  std::vector<float> image_data;
  for (std::size_t i = 0; i < kImages; ++i) {
    image_ids.push_back(id3("img", i));
    std::vector<double> v = topics[i].center;
    for (auto& x : v) x += 0.2 * rng.gaussian();
    const auto u = unit(v);
    image_data.insert(image_data.end(), u.begin(), u.end());
  }
  rapsg::save_store(rapsg::EmbeddingStore(image_ids, kDim, image_data, true), out_dir / "images.raps");

  // Descriptions: each drawn from one image's topic, with noise.
  std::vector<std::string> desc_ids;
  std::vector<float> desc_data;
  std::vector<rapsg::CatalogEntry> catalog;
  for (std::size_t d = 0; d < kDescriptions; ++d) {
    const auto& t = topics[rng.below(kImages)];
    std::string text;
    switch (rng.below(3)) {
      case 0:
        text = "a " + pick(rng, t.attributes) + " " + pick(rng, t.objects) + " " + pick(rng, kRelations) + " the " +
               t.scene;
        break;
      case 1:
        text = pick(rng, t.objects) + " " + pick(rng, kRelations) + " a " + pick(rng, t.objects);
        break;
      default:
        text = pick(rng, t.attributes) + " " + pick(rng, t.objects);
        break;
    }
    std::vector<double> v = t.center;
    const double noise = 0.4 + 0.8 * rng.uniform();
    for (auto& x : v) x += noise * rng.gaussian();
    const auto u = unit(v);
    desc_ids.push_back(id3("d", d));
    desc_data.insert(desc_data.end(), u.begin(), u.end());
    catalog.push_back({desc_ids.back(), text, id3("vg", d / (kDescriptions / kVgImages))});
  }
  rapsg::save_store(rapsg::EmbeddingStore(desc_ids, kDim, desc_data, true), out_dir / "descriptions.raps");
  rapsg::save_catalog(rapsg::DescriptionCatalog(catalog), out_dir / "catalog.jsonl");

  // Overlapping VG images: every other one until kOverlapping are marked.
  std::string excluded;
  for (std::size_t i = 0, marked = 0; i < kVgImages && marked < kOverlapping; i += 2, ++marked) {
    excluded += id3("vg", i) + "\n";
  }
  for (std::size_t i = 1, marked = kVgImages / 2; marked < kOverlapping; i += 2, ++marked) {
    excluded += id3("vg", i) + "\n";
  }
  rapsg::write_file_atomic(out_dir / "excluded_images.txt", excluded);

  // Captioner predictions and human-style references.
  std::vector<rapsg::Json> predictions;
  std::vector<rapsg::Json> references;
  for (std::size_t i = 0; i < kImages; ++i) {
    const auto& t = topics[i];
    predictions.push_back(rapsg::Json{{"image_id", image_ids[i]},
                                      {"prediction", "a " + t.attributes[0] + " " + t.objects[0] + " " +
                                                         pick(rng, kRelations) + " a " + t.objects[1] + " on the " +
                                                         t.scene}});
    references.push_back(rapsg::Json{
        {"image_id", image_ids[i]},
        {"references", {"a " + t.attributes[0] + " " + t.objects[0] + " with a " + t.objects[1] + " in the " + t.scene,
                        "the " + t.objects[0] + " is " + pick(rng, kRelations) + " a " + t.attributes[1] + " " +
                            t.objects[2]}}});
  }
  rapsg::write_file_atomic(out_dir / "predictions.jsonl", rapsg::to_jsonl(predictions));
  rapsg::write_file_atomic(out_dir / "references.jsonl", rapsg::to_jsonl(references));

  rapsg::write_file_atomic(out_dir / "fixture.conf",
                           "# synthetic fixture, fallback backend, default k/m\n"
                           "image_store = images.raps\n"
                           "description_store = descriptions.raps\n"
                           "catalog = catalog.jsonl\n"
                           "exclude_ids = excluded_images.txt\n"
                           "predictions = predictions.jsonl\n"
                           "backend = fallback\n"
                           "seed = 7\n"
                           "k = 16\n"
                           "m = 4\n");
  std::cout << "wrote fixture to " << out_dir << "\n";
  return 0;
}
