#include "fmts/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "fmts/errors.hpp"
#include "fmts/losses.hpp"

namespace fmts {

namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

// Substream tags; each randomized aspect of generation draws from its own
// stream so layout changes never shift unrelated draws.
constexpr std::uint64_t kTagRotation = 1;
constexpr std::uint64_t kTagJitter = 2;
constexpr std::uint64_t kTagCounts = 3;
constexpr std::uint64_t kTagFill = 4;
constexpr std::uint64_t kTagPlace = 5;
constexpr std::uint64_t kTagProtocol = 6;

std::uint64_t sub2(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return Rng::substream(Rng::substream(seed, a), b);
}
std::uint64_t sub3(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return Rng::substream(sub2(seed, a, b), c);
}

struct Rgb {
  std::uint8_t r, g, b;
};

// Interior colors come from two disjoint palettes (warm vs cool), so two
// identities can never swap into each other's colors cell for cell.
constexpr Rgb kPaletteA[8] = {{230, 50, 50},  {240, 140, 40}, {235, 220, 60},
                              {240, 110, 170}, {120, 230, 80}, {250, 240, 200},
                              {220, 60, 220}, {250, 170, 130}};
constexpr Rgb kPaletteB[8] = {{50, 80, 230}, {40, 180, 180}, {30, 40, 120},
                              {130, 60, 210}, {30, 130, 60}, {120, 80, 40},
                              {90, 110, 140}, {35, 35, 35}};
constexpr Rgb kBorder = {255, 255, 255};

// The 30 non-constant affine boolean functions on 4 inputs as 16-bit masks:
// every mask has weight 8 and any two differ in at least 8 positions.
std::uint16_t block_code(int idx) {
  const int m = idx % 15 + 1;
  const int complement = idx / 15;
  std::uint16_t w = 0;
  for (int x = 0; x < 16; ++x) {
    const int bit = (std::popcount(static_cast<unsigned>(m & x)) & 1) ^ complement;
    w = static_cast<std::uint16_t>(w | (bit << x));
  }
  return w;
}

std::uint8_t scale_channel(std::uint8_t v, double factor) {
  const double s = std::round(v * factor);
  return static_cast<std::uint8_t>(std::clamp(s, 0.0, 255.0));
}

int count_differing_pixels(const Image& a, const Image& b) {
  int diff = 0;
  for (std::size_t i = 0; i < a.rgb.size(); i += 3) {
    if (a.rgb[i] != b.rgb[i] || a.rgb[i + 1] != b.rgb[i + 1] || a.rgb[i + 2] != b.rgb[i + 2]) {
      ++diff;
    }
  }
  return diff;
}

int n_unlabeled(const SynthConfig& cfg) {
  return static_cast<int>(std::floor(cfg.unlabeled_fraction * cfg.n_identities));
}

struct ScenePlan {
  std::vector<int> tids;  // rendered identities, in paint order
};

/**
 * Plans scene contents for one split. Every id in `required` is placed into
 * two distinct scenes first (greedy into the emptiest scene not already
 * holding it); remaining capacity is filled with seeded random identities.
 */
std::vector<ScenePlan> plan_scenes(const SynthConfig& cfg, int n_scenes,
                                   const std::vector<int>& required,
                                   std::uint64_t split_tag) {
  Rng count_rng(sub2(cfg.seed, kTagCounts, split_tag));
  std::vector<int> capacity(static_cast<std::size_t>(n_scenes));
  int total = 0;
  for (int& c : capacity) {
    c = count_rng.uniform_int(cfg.persons_min, cfg.persons_max);
    total += c;
  }
  const int needed = 2 * static_cast<int>(required.size());
  for (int i = 0; total < needed; i = (i + 1) % n_scenes) {
    if (capacity[static_cast<std::size_t>(i)] < cfg.persons_max) {
      ++capacity[static_cast<std::size_t>(i)];
      ++total;
    }
  }

  std::vector<ScenePlan> plans(static_cast<std::size_t>(n_scenes));
  auto contains = [&](int scene, int tid) {
    const auto& t = plans[static_cast<std::size_t>(scene)].tids;
    return std::find(t.begin(), t.end(), tid) != t.end();
  };
  auto remaining = [&](int scene) {
    return capacity[static_cast<std::size_t>(scene)] -
           static_cast<int>(plans[static_cast<std::size_t>(scene)].tids.size());
  };

  for (int tid : required) {
    for (int copy = 0; copy < 2; ++copy) {
      int best = -1;
      for (int s = 0; s < n_scenes; ++s) {
        if (remaining(s) <= 0 || contains(s, tid)) continue;
        if (best < 0 || remaining(s) > remaining(best)) best = s;
      }
      if (best < 0) {
        throw GenerationError("cannot place identity " + std::to_string(tid) +
                              " into two distinct scenes; split too small");
      }
      plans[static_cast<std::size_t>(best)].tids.push_back(tid);
    }
  }

  Rng fill_rng(sub2(cfg.seed, kTagFill, split_tag));
  for (int s = 0; s < n_scenes; ++s) {
    while (remaining(s) > 0) {
      bool placed = false;
      for (int attempt = 0; attempt < 100; ++attempt) {
        const int tid = static_cast<int>(fill_rng.below(
            static_cast<std::uint64_t>(cfg.n_identities)));
        if (!contains(s, tid)) {
          plans[static_cast<std::size_t>(s)].tids.push_back(tid);
          placed = true;
          break;
        }
      }
      if (!placed) {
        --capacity[static_cast<std::size_t>(s)];  // scene already holds most ids
      }
    }
    if (plans[static_cast<std::size_t>(s)].tids.empty()) {
      plans[static_cast<std::size_t>(s)].tids.push_back(static_cast<int>(
          fill_rng.below(static_cast<std::uint64_t>(cfg.n_identities))));
    }
  }
  return plans;
}

struct PlacedScene {
  std::vector<Box> boxes;
  std::vector<int> sizes;
};

/// One attempt draws every box once; the scene is retried as a whole until
/// all pairwise overlaps are at most IoU 0.3.
PlacedScene place_boxes(const SynthConfig& cfg, int n_persons, Rng& rng,
                        const std::string& scene_name) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    PlacedScene out;
    bool ok = true;
    for (int p = 0; p < n_persons && ok; ++p) {
      const int size = rng.uniform_int(cfg.patch_min, cfg.patch_max);
      const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.image_w - size + 1)));
      const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.image_h - size + 1)));
      Box box{double(x0), double(y0), double(x0 + size), double(y0 + size)};
      for (const Box& other : out.boxes) {
        if (iou(box, other) > 0.3) {
          ok = false;
          break;
        }
      }
      if (ok) {
        out.boxes.push_back(box);
        out.sizes.push_back(size);
      }
    }
    if (ok) return out;
  }
  throw GenerationError("placement failed after 1000 attempts for scene " + scene_name +
                        " (" + std::to_string(n_persons) + " persons in " +
                        std::to_string(cfg.image_w) + "x" + std::to_string(cfg.image_h) + ")");
}

void paste_patch(Image& scene, const Image& patch, int x0, int y0) {
  for (int y = 0; y < patch.h; ++y) {
    for (int x = 0; x < patch.w; ++x) {
      for (int c = 0; c < 3; ++c) scene.at(y0 + y, x0 + x, c) = patch.at(y, x, c);
    }
  }
}

void write_split(const SynthConfig& cfg, const std::string& split_dir,
                 const std::string& split_name, std::uint64_t split_tag,
                 const std::vector<ScenePlan>& plans) {
  fs::create_directories(fs::path(split_dir) / "images");
  const int n_lab = cfg.n_identities - n_unlabeled(cfg);

  ordered_json manifest;
  manifest["format_version"] = 1;
  manifest["image_size"] = {cfg.image_h, cfg.image_w};
  manifest["scenes"] = ordered_json::array();

  for (std::size_t s = 0; s < plans.size(); ++s) {
    std::ostringstream id;
    id << split_name << "_";
    id.width(4);
    id.fill('0');
    id << s;
    const std::string image_id = id.str();

    Rng scene_rng(sub3(cfg.seed, kTagPlace, split_tag, s));
    const PlacedScene placed =
        place_boxes(cfg, static_cast<int>(plans[s].tids.size()), scene_rng, image_id);

    Image img(cfg.image_h, cfg.image_w);
    for (int y = 0; y < img.h; ++y) {
      for (int x = 0; x < img.w; ++x) {
        const auto gray = static_cast<std::uint8_t>(100 + scene_rng.below(56));
        img.at(y, x, 0) = img.at(y, x, 1) = img.at(y, x, 2) = gray;
      }
    }
    ordered_json boxes = ordered_json::array();
    ordered_json pids = ordered_json::array();
    for (std::size_t p = 0; p < plans[s].tids.size(); ++p) {
      const int tid = plans[s].tids[p];
      const long instance =
          static_cast<long>((split_tag * 1000000 + s) * 8 + p);
      const Image patch = render_identity_patch(tid, placed.sizes[p], cfg.seed, instance,
                                                cfg.jitter);
      paste_patch(img, patch, static_cast<int>(placed.boxes[p].x1),
                  static_cast<int>(placed.boxes[p].y1));
      const Box& b = placed.boxes[p];
      boxes.push_back({b.x1, b.y1, b.x2, b.y2});
      pids.push_back(tid < n_lab ? tid : kUnlabeledPid);
    }

    const std::string rel_path = "images/" + image_id + ".png";
    write_png((fs::path(split_dir) / rel_path).string(), img);
    ordered_json scene;
    scene["image_id"] = image_id;
    scene["image_path"] = rel_path;
    scene["boxes"] = std::move(boxes);
    scene["pids"] = std::move(pids);
    manifest["scenes"].push_back(std::move(scene));
  }

  std::ofstream out(fs::path(split_dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest under " + split_dir);
  out << manifest.dump(2) << "\n";
}

}  // namespace

void validate_config(const SynthConfig& cfg) {
  if (cfg.n_identities < 2) {
    throw ConfigError("n_identities must be >= 2, got " + std::to_string(cfg.n_identities));
  }
  if (cfg.unlabeled_fraction < 0.0 || cfg.unlabeled_fraction >= 1.0) {
    throw ConfigError("unlabeled_fraction must lie in [0,1)");
  }
  if (cfg.n_identities - n_unlabeled(cfg) < 2) {
    throw ConfigError("need at least 2 labeled identities after the unlabeled fraction");
  }
  if (cfg.scenes_train < 2 || cfg.scenes_test < 2) {
    throw ConfigError("both splits need at least 2 scenes");
  }
  if (cfg.persons_min < 1 || cfg.persons_max < cfg.persons_min) {
    throw ConfigError("persons per scene range is invalid");
  }
  if (cfg.patch_min < 8 || cfg.patch_max < cfg.patch_min) {
    throw ConfigError("patch size range is invalid (minimum side 8)");
  }
  if (cfg.patch_max > cfg.image_w || cfg.patch_max > cfg.image_h) {
    throw ConfigError("largest patch does not fit in the image");
  }
  if (cfg.image_h < 16 || cfg.image_w < 16) {
    throw ConfigError("image side must be >= 16");
  }
}

Image render_identity_patch(int pid, int size, std::uint64_t seed, long instance,
                            bool jitter) {
  if (pid < 0) throw ConfigError("pid must be >= 0");
  if (size < 8) throw ConfigError("patch size must be >= 8");

  Rng rot_rng(Rng::substream(seed, kTagRotation));
  const int color_rot = static_cast<int>(rot_rng.below(8));
  const int pattern_rot = static_cast<int>(rot_rng.below(30));

  const std::uint16_t pattern = block_code((pid + pattern_rot) % 30);
  const Rgb c1 = kPaletteA[(pid + color_rot) % 8];
  const Rgb c2 = kPaletteB[(pid + color_rot + 5 * (pid / 8)) % 8];

  double factor = 1.0;
  if (jitter) {
    Rng jitter_rng(sub3(seed, kTagJitter, static_cast<std::uint64_t>(pid),
                        static_cast<std::uint64_t>(instance)));
    factor = 1.0 + 0.1 * jitter_rng.uniform(-1.0, 1.0);
  }

  Image patch(size, size);
  const int inner = size - 2;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      Rgb px = kBorder;
      if (y > 0 && y < size - 1 && x > 0 && x < size - 1) {
        const int cell_r = (y - 1) * 4 / inner;
        const int cell_c = (x - 1) * 4 / inner;
        const bool on = (pattern >> (cell_r * 4 + cell_c)) & 1;
        px = on ? c2 : c1;
      }
      patch.at(y, x, 0) = scale_channel(px.r, factor);
      patch.at(y, x, 1) = scale_channel(px.g, factor);
      patch.at(y, x, 2) = scale_channel(px.b, factor);
    }
  }
  return patch;
}

void generate_synthetic(const SynthConfig& cfg, const std::string& out_dir) {
  validate_config(cfg);

  // Appearance self-check: every identity pair must differ in more than a
  // quarter of pixels at the smallest configured patch size.
  if (cfg.n_identities <= 32) {
    std::vector<Image> canonical;
    canonical.reserve(static_cast<std::size_t>(cfg.n_identities));
    for (int pid = 0; pid < cfg.n_identities; ++pid) {
      canonical.push_back(render_identity_patch(pid, cfg.patch_min, cfg.seed, 0, false));
    }
    const int total = cfg.patch_min * cfg.patch_min;
    for (int a = 0; a < cfg.n_identities; ++a) {
      for (int b = a + 1; b < cfg.n_identities; ++b) {
        const int diff = count_differing_pixels(canonical[static_cast<std::size_t>(a)],
                                                canonical[static_cast<std::size_t>(b)]);
        if (diff * 4 <= total) {
          throw GenerationError("identities " + std::to_string(a) + " and " +
                                std::to_string(b) + " differ in only " +
                                std::to_string(diff) + "/" + std::to_string(total) +
                                " pixels");
        }
      }
    }
  }

  const int n_lab = cfg.n_identities - n_unlabeled(cfg);
  std::vector<int> all_ids(static_cast<std::size_t>(cfg.n_identities));
  std::iota(all_ids.begin(), all_ids.end(), 0);
  std::vector<int> labeled_ids(all_ids.begin(), all_ids.begin() + n_lab);

  const auto train_plans = plan_scenes(cfg, cfg.scenes_train, all_ids, 0);
  const auto test_plans = plan_scenes(cfg, cfg.scenes_test, labeled_ids, 1);
  write_split(cfg, (fs::path(out_dir) / "train").string(), "train", 0, train_plans);
  write_split(cfg, (fs::path(out_dir) / "test").string(), "test", 1, test_plans);
}

int Dataset::n_labeled() const {
  int max_pid = -1;
  for (const auto& scene : scenes) {
    for (int pid : scene.pids) max_pid = std::max(max_pid, pid);
  }
  return max_pid + 1;
}

int Dataset::scene_index(const std::string& image_id) const {
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (scenes[i].image_id == image_id) return static_cast<int>(i);
  }
  throw IndexError("unknown image id " + image_id);
}

Dataset load_dataset(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest " + manifest_path);
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ValidationError("manifest " + manifest_path + " is not valid JSON: " + e.what());
  }

  Dataset ds;
  ds.root = fs::path(manifest_path).parent_path().string();
  if (!j.contains("format_version") || j["format_version"] != 1) {
    throw ValidationError("manifest format_version must be 1");
  }
  if (!j.contains("image_size") || !j["image_size"].is_array() || j["image_size"].size() != 2) {
    throw ValidationError("manifest image_size must be [h, w]");
  }
  ds.image_h = j["image_size"][0].get<int>();
  ds.image_w = j["image_size"][1].get<int>();
  if (ds.image_h < 1 || ds.image_w < 1) throw ValidationError("image_size must be positive");
  if (!j.contains("scenes") || !j["scenes"].is_array()) {
    throw ValidationError("manifest scenes must be an array");
  }

  for (const auto& js : j["scenes"]) {
    SceneAnnotation scene;
    scene.image_id = js.at("image_id").get<std::string>();
    scene.image_path = js.at("image_path").get<std::string>();
    const auto& boxes = js.at("boxes");
    const auto& pids = js.at("pids");
    if (boxes.size() != pids.size()) {
      throw ValidationError("scene " + scene.image_id + ": " + std::to_string(boxes.size()) +
                            " boxes vs " + std::to_string(pids.size()) + " pids");
    }
    for (const auto& jb : boxes) {
      if (!jb.is_array() || jb.size() != 4) {
        throw ValidationError("scene " + scene.image_id + ": box must be [x1,y1,x2,y2]");
      }
      Box b{jb[0].get<double>(), jb[1].get<double>(), jb[2].get<double>(),
            jb[3].get<double>()};
      if (!b.valid() || b.x1 < 0 || b.y1 < 0 || b.x2 > ds.image_w || b.y2 > ds.image_h) {
        throw ValidationError("scene " + scene.image_id + ": box out of bounds or empty");
      }
      scene.boxes.push_back(b);
    }
    for (const auto& jp : pids) {
      const int pid = jp.get<int>();
      if (pid < kUnlabeledPid) {
        throw ValidationError("scene " + scene.image_id + ": pid " + std::to_string(pid) +
                              " is invalid");
      }
      scene.pids.push_back(pid);
    }
    for (std::size_t a = 0; a < scene.boxes.size(); ++a) {
      for (std::size_t b = a + 1; b < scene.boxes.size(); ++b) {
        if (iou(scene.boxes[a], scene.boxes[b]) > 0.3 + 1e-9) {
          throw ValidationError("scene " + scene.image_id + ": boxes overlap beyond IoU 0.3");
        }
      }
    }

    const fs::path img_path = fs::path(ds.root) / scene.image_path;
    if (!fs::exists(img_path)) {
      throw ValidationError("scene " + scene.image_id + ": missing image " + img_path.string());
    }
    Image img = read_png(img_path.string());
    if (img.h != ds.image_h || img.w != ds.image_w) {
      throw ValidationError("scene " + scene.image_id + ": image size " +
                            std::to_string(img.h) + "x" + std::to_string(img.w) +
                            " does not match manifest");
    }
    ds.images.push_back(std::move(img));
    ds.scenes.push_back(std::move(scene));
  }
  return ds;
}

Protocol make_protocol(const Dataset& ds, const std::vector<int>& gallery_sizes,
                       std::uint64_t seed) {
  Protocol proto;
  proto.gallery_sizes = gallery_sizes;
  const int n_scenes = static_cast<int>(ds.scenes.size());
  for (int g : gallery_sizes) {
    if (g < 2) throw ConfigError("gallery size must be >= 2, got " + std::to_string(g));
    if (g > n_scenes) {
      throw ConfigError("gallery size " + std::to_string(g) + " exceeds the " +
                        std::to_string(n_scenes) + "-scene test split");
    }
  }

  const int n_lab = ds.n_labeled();
  struct Occurrence {
    int scene;
    int box;
  };
  std::vector<std::vector<Occurrence>> occ(static_cast<std::size_t>(n_lab));
  for (int s = 0; s < n_scenes; ++s) {
    const auto& scene = ds.scenes[static_cast<std::size_t>(s)];
    for (std::size_t b = 0; b < scene.pids.size(); ++b) {
      const int pid = scene.pids[b];
      if (pid >= 0) occ[static_cast<std::size_t>(pid)].push_back({s, static_cast<int>(b)});
    }
  }

  proto.per_size.resize(gallery_sizes.size());
  for (int pid = 0; pid < n_lab; ++pid) {
    const auto& o = occ[static_cast<std::size_t>(pid)];
    std::vector<int> scenes_with;
    for (const auto& e : o) {
      if (scenes_with.empty() || scenes_with.back() != e.scene) scenes_with.push_back(e.scene);
    }
    if (scenes_with.size() < 2) {
      proto.warnings.push_back("identity " + std::to_string(pid) +
                               " appears in fewer than 2 scenes; skipped");
      continue;
    }
    const int q_scene = o.front().scene;
    QuerySpec query{ds.scenes[static_cast<std::size_t>(q_scene)].image_id,
                    ds.scenes[static_cast<std::size_t>(q_scene)].boxes[static_cast<std::size_t>(
                        o.front().box)],
                    pid};

    for (std::size_t gi = 0; gi < gallery_sizes.size(); ++gi) {
      const int g = gallery_sizes[static_cast<std::size_t>(gi)];
      Rng rng(sub3(seed, kTagProtocol, static_cast<std::uint64_t>(pid),
                   static_cast<std::uint64_t>(g)));
      std::vector<int> positives;
      for (int s : scenes_with) {
        if (s != q_scene) positives.push_back(s);
      }
      const int pos_scene =
          positives[static_cast<std::size_t>(rng.below(positives.size()))];

      std::vector<int> pool;
      for (int s = 0; s < n_scenes; ++s) {
        if (s != q_scene && s != pos_scene) pool.push_back(s);
      }
      rng.shuffle(pool);
      std::vector<int> chosen{pos_scene};
      for (int s : pool) {
        if (static_cast<int>(chosen.size()) >= g) break;
        chosen.push_back(s);
      }

      QueryCase qc;
      qc.query = query;
      for (int s : chosen) qc.gallery.push_back(ds.scenes[static_cast<std::size_t>(s)].image_id);
      proto.per_size[gi].push_back(std::move(qc));
    }
  }
  return proto;
}

}  // namespace fmts
