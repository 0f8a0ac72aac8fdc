// SPDX-License-Identifier: Apache-2.0
// Command-line driver: gen-data, train, eval, ablate, export-cam.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "scob/error.hpp"
#include "scob/report.hpp"
#include "scob/trainer.hpp"

namespace fs = std::filesystem;
using namespace scob;

namespace {

TrainConfig load_config(const std::string& file, const std::vector<std::string>& overrides) {
  TrainConfig c = file.empty() ? TrainConfig{} : TrainConfig::from_file(file);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  c.validate();
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

void write_curves(const fs::path& dir, const TrainState& st) {
  Series map{"val mAP", {}, {}}, unk{"unknown negatives", {}, {}};
  for (const auto& r : st.rows) {
    map.x.push_back(r.epoch);
    map.y.push_back(r.val.map);
    unk.x.push_back(r.epoch);
    unk.y.push_back(r.mean_unknown_neg);
  }
  std::ofstream a(dir / "val_map.svg");
  write_line_chart_svg(a, std::vector<Series>{map}, "validation mAP", "epoch", "mAP");
  std::ofstream b(dir / "unknown_negatives.svg");
  write_line_chart_svg(b, std::vector<Series>{unk}, "mean prediction on unknown negatives", "epoch", "p");
  std::ofstream h(dir / "histogram.svg");
  write_histogram_svg(h, st.histograms, "unknown-negative predictions per epoch");
}

std::vector<int> parse_ids(const std::string& text) {
  std::vector<int> ids;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) ids.push_back(std::stoi(item));
  return ids;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic contrastive bootstrapping for single-positive multi-label learning"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic multi-label dataset");
  DatasetSpec spec;
  std::string gen_out;
  bool keep_full = false;
  std::uint64_t drop_seed = 1;
  gen->add_option("-o,--out", gen_out, "Dataset file")->required();
  gen->add_option("--classes", spec.num_classes, "Number of classes")->capture_default_str();
  gen->add_option("--size", spec.image_size, "Image side in pixels")->capture_default_str();
  gen->add_option("--train", spec.num_train, "Training samples")->capture_default_str();
  gen->add_option("--val", spec.num_val, "Validation samples")->capture_default_str();
  gen->add_option("--min-positives", spec.min_positives)->capture_default_str();
  gen->add_option("--max-positives", spec.max_positives)->capture_default_str();
  gen->add_option("--noise", spec.noise_sigma)->capture_default_str();
  gen->add_option("--seed", spec.seed)->capture_default_str();
  gen->add_option("--label-seed", drop_seed, "Seed for choosing the observed positive")->capture_default_str();
  gen->add_flag("--keep-full-labels", keep_full, "Skip the single-positive reduction");

  // train
  auto* train = app.add_subcommand("train", "Run the bootstrapping loop");
  std::string data_path, config_path, out_dir = "run", resume_path;
  std::vector<std::string> overrides;
  bool quiet = false;
  train->add_option("-d,--data", data_path, "Dataset file")->required();
  train->add_option("-c,--config", config_path, "key=value config file");
  train->add_option("-s,--set", overrides, "Override one key (key=value), repeatable");
  train->add_option("-o,--out", out_dir, "Output directory")->capture_default_str();
  train->add_option("--resume", resume_path, "Continue from a checkpoint");
  train->add_flag("-q,--quiet", quiet);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ckpt_path, eval_out;
  Real threshold = -1;
  eval->add_option("-k,--checkpoint", ckpt_path)->required();
  eval->add_option("-d,--data", data_path)->required();
  eval->add_option("-o,--out", eval_out, "Metrics CSV (stdout when omitted)");
  eval->add_option("--threshold", threshold, "Binarization threshold (checkpoint config when omitted)");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train a set of variants over several seeds");
  std::string variants = "full,no_cl,baseline,joint_optim", seeds = "0,1,2";
  ablate->add_option("-d,--data", data_path)->required();
  ablate->add_option("-c,--config", config_path);
  ablate->add_option("-s,--set", overrides);
  ablate->add_option("--variants", variants)->capture_default_str();
  ablate->add_option("--seeds", seeds)->capture_default_str();
  ablate->add_option("-o,--out", out_dir)->capture_default_str();
  ablate->add_flag("-q,--quiet", quiet);

  // export-cam
  auto* cam = app.add_subcommand("export-cam", "Write CAM maps and masks as images");
  std::string ids_text, split = "val";
  int count = 8;
  cam->add_option("-k,--checkpoint", ckpt_path)->required();
  cam->add_option("-d,--data", data_path)->required();
  cam->add_option("--split", split)->check(CLI::IsMember({"train", "val"}))->capture_default_str();
  cam->add_option("--ids", ids_text, "Comma-separated sample indices");
  cam->add_option("--count", count, "First N samples when --ids is absent")->capture_default_str();
  cam->add_option("-o,--out", out_dir)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      auto d = generate_dataset(spec);
      if (!keep_full) drop_to_single_positive(d, drop_seed);
      validate_dataset(d);
      save_dataset(d, gen_out);
      std::cout << "wrote " << d.train.size() << " train / " << d.val.size() << " val samples to " << gen_out << "\n";
    } else if (train->parsed()) {
      const auto data = load_dataset(data_path);
      fs::create_directories(out_dir);
      const fs::path dir(out_dir);
      RunOptions opt;
      opt.metrics_path = (dir / "metrics.csv").string();
      opt.histogram_path = (dir / "histogram.csv").string();
      opt.checkpoint_path = (dir / "checkpoint.bin").string();
      if (!quiet) opt.log = &std::cout;
      TrainState st = resume_path.empty() ? TrainState(load_config(config_path, overrides), data)
                                          : load_checkpoint(resume_path);
      if (!resume_path.empty() && !overrides.empty()) {
        throw ConfigError("overrides cannot change a resumed run; only the original config applies");
      }
      write_text(dir / "config.txt", st.config.to_text());
      run_bootstrap(st, data, opt);
      write_curves(dir, st);
    } else if (eval->parsed()) {
      const auto data = load_dataset(data_path);
      auto st = load_checkpoint(ckpt_path);
      if (threshold > 0) st.config.threshold = threshold;
      std::vector<std::pair<std::string, MetricRow>> rows;
      std::vector<Real> k_hat;
      std::vector<CamQuality> cams;
      for (const auto& [name, samples] : {std::pair{"train", &data.train}, std::pair{"val", &data.val}}) {
        if (samples->empty()) continue;
        auto table = predict(st.nets.online, *samples, st.config);
        if (std::string(name) == "train") {
          // score the training split against its full labels as well
          table.labels.clear();
          for (const auto& s : *samples) table.labels.insert(table.labels.end(), s.y.begin(), s.y.end());
        }
        rows.emplace_back(name, evaluate_scores(table, st.config.threshold));
        k_hat.push_back(mean_positive_count(table));
        cams.push_back(cam_quality(st.nets.online, *samples, st.config));
      }
      if (eval_out.empty()) {
        write_eval_csv(std::cout, rows, k_hat, cams);
      } else {
        std::ofstream out(eval_out);
        if (!out) throw Error("cannot write " + eval_out);
        write_eval_csv(out, rows, k_hat, cams);
      }
    } else if (ablate->parsed()) {
      const auto data = load_dataset(data_path);
      const TrainConfig base = load_config(config_path, overrides);
      fs::create_directories(out_dir);
      const fs::path dir(out_dir);
      std::vector<RunSummary> runs;
      std::map<std::string, Series> curves;
      std::vector<std::string> names;
      {
        std::stringstream ss(variants);
        std::string v;
        while (std::getline(ss, v, ',')) names.push_back(v);
      }
      for (const auto& v : names) with_variant(base, v).validate();
      for (int seed : parse_ids(seeds)) {
        for (const auto& v : names) {
          TrainConfig c = with_variant(base, v);
          c.seed = static_cast<std::uint64_t>(seed);
          const fs::path run_dir = dir / (v + "_seed" + std::to_string(seed));
          fs::create_directories(run_dir);
          RunOptions opt;
          opt.metrics_path = (run_dir / "metrics.csv").string();
          opt.histogram_path = (run_dir / "histogram.csv").string();
          opt.checkpoint_path = (run_dir / "checkpoint.bin").string();
          if (!quiet) {
            std::cout << "== " << v << " seed " << seed << "\n";
            opt.log = &std::cout;
          }
          const auto st = run_bootstrap(c, data, opt);
          runs.push_back(summarize(st, data, v));
          auto& curve = curves[v];
          curve.name = v;
          for (std::size_t i = 0; i < st.rows.size(); ++i) {
            if (curve.x.size() <= i) {
              curve.x.push_back(st.rows[i].epoch);
              curve.y.push_back(0);
            }
            curve.y[i] += st.rows[i].val.map;
          }
        }
      }
      std::ofstream out(dir / "comparison.csv");
      write_summary_csv(out, runs);
      std::vector<Series> series;
      for (const auto& v : names) {
        auto s = curves[v];
        for (auto& y : s.y) y /= static_cast<Real>(parse_ids(seeds).size());
        series.push_back(std::move(s));
      }
      std::ofstream svg(dir / "val_map.svg");
      write_line_chart_svg(svg, series, "validation mAP (seed mean)", "epoch", "mAP");
      write_summary_csv(std::cout, runs);
    } else if (cam->parsed()) {
      const auto data = load_dataset(data_path);
      const auto st = load_checkpoint(ckpt_path);
      const auto& samples = split == "train" ? data.train : data.val;
      std::vector<int> ids = ids_text.empty() ? std::vector<int>{} : parse_ids(ids_text);
      if (ids.empty()) {
        for (int i = 0; i < count && i < static_cast<int>(samples.size()); ++i) ids.push_back(i);
      }
      const auto rows = export_cams(st.nets.online, samples, ids, st.config, out_dir);
      std::cout << "wrote " << rows.size() << " map/mask pairs to " << out_dir << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
