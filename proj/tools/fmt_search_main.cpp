// fmt-search: joint person detection and re-identification on synthetic
// scenes. One executable, subcommand per pipeline step; every run is a pure
// function of its config, flags, and input files.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fmts/checkpoint.hpp"
#include "fmts/data.hpp"
#include "fmts/errors.hpp"
#include "fmts/evalsearch.hpp"
#include "fmts/gradsuite.hpp"
#include "fmts/image.hpp"
#include "fmts/model.hpp"
#include "fmts/runconfig.hpp"
#include "fmts/training.hpp"

namespace {

namespace fs = std::filesystem;
using namespace fmts;

constexpr int kExitOk = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitGeneration = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitIo = 5;

// Leftover tokens become config overrides: "--train.lr0=0.001" or
// "--train.lr0 0.001" pairs.
std::vector<std::string> collect_overrides(const std::vector<std::string>& extras) {
  std::vector<std::string> overrides;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string tok = extras[i];
    if (tok.rfind("--", 0) != 0 || tok.find('.') == std::string::npos) {
      throw ConfigError("unrecognized argument " + tok +
                        " (overrides look like --section.key=value)");
    }
    tok = tok.substr(2);
    if (tok.find('=') == std::string::npos) {
      if (i + 1 >= extras.size()) throw ConfigError("override " + tok + " is missing a value");
      tok += "=" + extras[++i];
    }
    overrides.push_back(tok);
  }
  return overrides;
}

void require_image_match(const ModelConfig& mcfg, const Dataset& ds) {
  if (mcfg.image_h != ds.image_h || mcfg.image_w != ds.image_w) {
    throw ConfigError("model expects " + std::to_string(mcfg.image_h) + "x" +
                      std::to_string(mcfg.image_w) + " images but dataset is " +
                      std::to_string(ds.image_h) + "x" + std::to_string(ds.image_w));
  }
}

TrainResult run_training(const RunConfig& cfg, const Dataset& ds) {
  require_image_match(cfg.model, ds);
  return train(ds, cfg.model, cfg.train);
}

void write_training_outputs(const RunConfig& cfg, const TrainResult& result,
                            const std::string& out_dir, const std::string& suffix) {
  fs::create_directories(out_dir);
  save_checkpoint(out_dir + "/checkpoint" + suffix + ".json", cfg.model, result.params,
                  result.oim);
  write_train_log_csv(result.log, out_dir + "/train_log" + suffix + ".csv");
}

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  generate_synthetic(cfg.synth, out_dir);
  std::cout << "dataset written to " << out_dir << "\n";
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir) {
  const Dataset ds = load_dataset(data_dir + "/train/manifest.json");
  const TrainResult result = run_training(cfg, ds);
  write_training_outputs(cfg, result, out_dir, "");
  std::cout << "trained " << cfg.train.total_iters << " iterations ("
            << result.log.skipped_iterations << " skipped), checkpoint in " << out_dir << "\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path,
             const std::string& data_dir, const std::string& out_dir,
             const std::string& base_name) {
  if (!fs::exists(checkpoint_path)) {
    throw ConfigError("checkpoint not found: " + checkpoint_path);
  }
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const Dataset ds = load_dataset(data_dir + "/test/manifest.json");
  require_image_match(ckpt.config, ds);
  const Protocol protocol = make_protocol(ds, cfg.gallery_sizes, cfg.protocol_seed);
  const EvalReport report = evaluate(ckpt.params, ckpt.config, ds, protocol);
  fs::create_directories(out_dir);
  emit_report(report, out_dir + "/" + base_name + ".csv", ReportFormat::csv);
  emit_report(report, out_dir + "/" + base_name + ".json", ReportFormat::json);
  for (const std::string& w : report.warnings) std::cout << "warning: " << w << "\n";
  for (const SizeMetrics& row : report.rows) {
    std::cout << "gallery " << row.gallery_size << ": mAP " << shortest_double(row.map)
              << " top1 " << shortest_double(row.top1) << " top5 " << shortest_double(row.top5)
              << " top10 " << shortest_double(row.top10) << "\n";
  }
  std::cout << "det_recall " << shortest_double(report.det_recall) << "\n";
  return kExitOk;
}

int cmd_search(const std::string& checkpoint_path, const std::string& query_image,
               const std::vector<double>& query_box, const std::vector<std::string>& gallery,
               int top_n) {
  if (!fs::exists(checkpoint_path)) {
    throw ConfigError("checkpoint not found: " + checkpoint_path);
  }
  if (query_box.size() != 4) throw ConfigError("--box needs x1,y1,x2,y2");
  if (top_n < 1) throw ConfigError("--top-n must be >= 1");
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);

  QuerySpec query;
  query.image_id = query_image;
  query.box = Box{query_box[0], query_box[1], query_box[2], query_box[3]};
  query.pid = 0;  // identity is unknown at search time; any labeled value works
  const Tensor query_tensor = image_to_tensor(read_png(query_image));
  const Vec query_emb = embed_query(ckpt.params, ckpt.config, query, query_tensor);

  std::vector<GalleryDetections> dets;
  for (const std::string& path : gallery) {
    GalleryDetections g;
    g.image_id = path;
    g.dets = search_forward(ckpt.params, ckpt.config, image_to_tensor(read_png(path)));
    dets.push_back(std::move(g));
  }
  const RankedList ranked = rank_gallery(query_emb, dets);
  if (ranked.empty()) {
    std::cout << "no detections in the gallery\n";
    return kExitOk;
  }
  const int shown = std::min<int>(top_n, static_cast<int>(ranked.size()));
  for (int r = 0; r < shown; ++r) {
    const RankedEntry& e = ranked[static_cast<std::size_t>(r)];
    std::cout << r + 1 << " " << e.image_id << " [" << shortest_double(e.box.x1) << ","
              << shortest_double(e.box.y1) << "," << shortest_double(e.box.x2) << ","
              << shortest_double(e.box.y2) << "] distance " << shortest_double(e.distance)
              << "\n";
  }
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, int instances, bool corrupt) {
  SuiteOptions opts;
  opts.seed = seed;
  opts.instances = instances;
  opts.corrupt = corrupt;
  const std::vector<OpCheckResult> results = run_gradient_suite(opts);
  std::cout << format_suite_table(results);
  if (!suite_passed(results)) {
    std::cout << "gradient check FAILED\n";
    return kExitCheckFailure;
  }
  std::cout << "all gradients within tolerance\n";
  return kExitOk;
}

int cmd_ablate(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
               int gallery_size) {
  const Dataset train_ds = load_dataset(data_dir + "/train/manifest.json");
  const Dataset test_ds = load_dataset(data_dir + "/test/manifest.json");
  require_image_match(cfg.model, train_ds);
  require_image_match(cfg.model, test_ds);
  const Protocol protocol = make_protocol(test_ds, {gallery_size}, cfg.protocol_seed);

  struct Variant {
    const char* name;
    bool rpn_person_labels;
    bool reid_multiple_loss;
  };
  const Variant variants[] = {{"baseline", false, false},
                              {"plabel_rpn", true, false},
                              {"fmt_full", true, true}};
  fs::create_directories(out_dir);
  std::vector<double> maps;
  std::string csv = "variant,mAP,top1,top5\n";
  for (const Variant& v : variants) {
    RunConfig run = cfg;
    run.train.rpn_person_labels = v.rpn_person_labels;
    run.train.reid_multiple_loss = v.reid_multiple_loss;
    const TrainResult result = run_training(run, train_ds);
    write_training_outputs(run, result, out_dir, std::string("_") + v.name);
    const EvalReport report = evaluate(result.params, run.model, test_ds, protocol);
    const SizeMetrics& row = report.rows.at(0);
    csv += std::string(v.name) + "," + shortest_double(row.map) + "," +
           shortest_double(row.top1) + "," + shortest_double(row.top5) + "\n";
    maps.push_back(row.map);
    std::cout << v.name << ": mAP " << shortest_double(row.map) << " top1 "
              << shortest_double(row.top1) << " top5 " << shortest_double(row.top5) << "\n";
  }
  std::ofstream out(out_dir + "/ablation.csv");
  if (!out) throw IoError("cannot write " + out_dir + "/ablation.csv");
  out << csv;
  if (!out) throw IoError("failed writing " + out_dir + "/ablation.csv");
  std::cout << "delta mAP (fmt_full - baseline): " << shortest_double(maps[2] - maps[0])
            << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"joint person detection and re-identification on synthetic scenes"};
  app.require_subcommand(1);
  app.allow_extras();

  std::string config_path;
  app.add_option("--config", config_path, "JSON run configuration");

  std::string data_dir = "data";
  std::string out_dir;
  std::string checkpoint_path;
  std::string query_image;
  std::vector<double> query_box;
  std::vector<std::string> gallery_paths;
  int top_n = 10;
  std::uint64_t gc_seed = 2024;
  int gc_instances = 20;
  bool gc_corrupt = false;
  int ablate_gallery = 10;

  CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  gen->add_option("--out", out_dir, "dataset directory");
  gen->allow_extras();

  CLI::App* tr = app.add_subcommand("train", "train a model on the train split");
  tr->add_option("--data", data_dir, "dataset directory");
  tr->add_option("--out", out_dir, "output directory");
  tr->allow_extras();

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  ev->add_option("--checkpoint", checkpoint_path, "checkpoint json")->required();
  ev->add_option("--data", data_dir, "dataset directory");
  ev->add_option("--out", out_dir, "output directory");
  ev->allow_extras();

  CLI::App* sw = app.add_subcommand("sweep", "gallery-size sweep on the test split");
  sw->add_option("--checkpoint", checkpoint_path, "checkpoint json")->required();
  sw->add_option("--data", data_dir, "dataset directory");
  sw->add_option("--out", out_dir, "output directory");
  sw->allow_extras();

  CLI::App* se = app.add_subcommand("search", "rank gallery images against one query");
  se->add_option("--checkpoint", checkpoint_path, "checkpoint json")->required();
  se->add_option("--image", query_image, "query png")->required();
  se->add_option("--box", query_box, "query box x1,y1,x2,y2")->delimiter(',')->expected(4);
  se->add_option("--gallery", gallery_paths, "gallery pngs")->required();
  se->add_option("--top-n", top_n, "results to print");

  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--seed", gc_seed, "suite seed");
  gc->add_option("--instances", gc_instances, "instances per op");
  gc->add_flag("--corrupt", gc_corrupt, "perturb one gradient (forced failure)")
      ->group("");  // harness hook, hidden from help

  CLI::App* ab = app.add_subcommand("ablate", "train and evaluate the three variants");
  ab->add_option("--data", data_dir, "dataset directory");
  ab->add_option("--out", out_dir, "output directory");
  ab->add_option("--gallery-size", ablate_gallery, "gallery size for the table");
  ab->allow_extras();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    const std::vector<std::string> overrides = collect_overrides(app.remaining(true));
    if (gen->parsed() || tr->parsed() || ev->parsed() || sw->parsed() || ab->parsed()) {
      RunConfig cfg = load_run_config(config_path, overrides);
      if (out_dir.empty()) out_dir = cfg.out_dir;
      if (gen->parsed()) return cmd_gen_data(cfg, out_dir);
      if (tr->parsed()) return cmd_train(cfg, data_dir, out_dir);
      if (ev->parsed()) return cmd_eval(cfg, checkpoint_path, data_dir, out_dir, "report");
      if (sw->parsed()) return cmd_eval(cfg, checkpoint_path, data_dir, out_dir, "sweep");
      return cmd_ablate(cfg, data_dir, out_dir, ablate_gallery);
    }
    if (!overrides.empty()) throw ConfigError("this subcommand takes no config overrides");
    if (se->parsed()) {
      return cmd_search(checkpoint_path, query_image, query_box, gallery_paths, top_n);
    }
    return cmd_gradcheck(gc_seed, gc_instances, gc_corrupt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const GenerationError& e) {
    std::cerr << "generation error: " << e.what() << "\n";
    return kExitGeneration;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const NormalizationError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DegenerateVectorError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailure;
  }
}
