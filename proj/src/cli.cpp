#include "iwivig/cli.hpp"

#include "iwivig/dataset.hpp"
#include "iwivig/errors.hpp"
#include "iwivig/explanations.hpp"
#include "iwivig/metrics.hpp"
#include "iwivig/stats.hpp"
#include "iwivig/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

namespace iwivig::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const std::string& path, const std::string& text) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
}

RunConfig run_config(const std::string& path) {
  if (path.empty()) {
    RunConfig cfg;
    cfg.model.validate();
    return cfg;
  }
  return load_run_config(path);
}

void apply_overrides(RunConfig& cfg, const CLI::Option* seed_opt, std::uint64_t seed, const CLI::Option* r_opt,
                     double r, const CLI::Option* epochs_opt, int epochs) {
  if (seed_opt && seed_opt->count()) {
    cfg.train.seed = seed;
    cfg.model.init_seed = seed;
  }
  if (r_opt && r_opt->count()) cfg.model.bottleneck.r = r;
  if (epochs_opt && epochs_opt->count()) cfg.train.epochs = epochs;
  cfg.model.validate();
  cfg.train.validate();
}

TrainHooks logging_hooks(std::ostream& err) {
  TrainHooks hooks;
  hooks.on_epoch = [&err](const EpochRecord& r) {
    char buf[200];
    std::snprintf(buf, sizeof(buf), "epoch %d lr %.3e task %.4f info %.4f", r.epoch, r.lr, r.task_loss, r.info_loss);
    err << buf;
    if (r.val) err << " val " << r.val->primary();
    err << '\n';
  };
  return hooks;
}

std::string checkpoint_prefix(const std::string& out) {
  for (const char* ext : {".json", ".bin"}) {
    const std::string e(ext);
    if (out.size() > e.size() && out.compare(out.size() - e.size(), e.size(), e) == 0) {
      return out.substr(0, out.size() - e.size());
    }
  }
  return out;
}

struct SweepRow {
  double r = 0.0;
  double weight_sd = 0.0;
  double goodness_of_fit = 0.0;
  double auc = 0.0;
};

std::vector<double> parse_r_list(const std::string& s) {
  std::vector<double> rs;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const double r = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      rs.push_back(r);
    } catch (const std::exception&) {
      throw ConfigError("cannot parse r value '" + item + "'");
    }
  }
  if (rs.empty()) throw ConfigError("--r needs at least one value");
  return rs;
}

// Standard deviation of every edge probability over a dataset.
double edge_weight_sd(const Model& model, const Dataset& data) {
  ag::NoGradGuard guard;
  std::vector<double> all;
  for (std::size_t start = 0; start < data.samples.size(); start += 16) {
    const std::size_t end = std::min(data.samples.size(), start + 16);
    std::vector<const Image*> chunk;
    for (std::size_t i = start; i < end; ++i) chunk.push_back(&data.samples[i].image);
    ForwardContext ctx;
    const ForwardResult r = model.forward(chunk, ctx);
    const Matrix& p = r.bottleneck.p.value();
    all.insert(all.end(), p.data(), p.data() + p.size());
  }
  return stats::stddev(all);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-interpretable window vision GNN: data, training, explanations, metrics"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "Write the planted-dependency dataset");
  std::string gen_out;
  int gen_n = 500, gen_side = 128, gen_window = 4;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--n", gen_n, "Number of samples")->capture_default_str();
  gen->add_option("--input-side", gen_side, "Image side in pixels")->capture_default_str();
  gen->add_option("--window-side", gen_window, "Window side W of the target model")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Random seed")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
  std::string tr_config, tr_data, tr_out;
  std::uint64_t tr_seed = 0;
  double tr_r = 0.7;
  int tr_epochs = 0;
  tr->add_option("--config", tr_config, "Run config JSON ({\"model\": ..., \"train\": ...})");
  tr->add_option("--data", tr_data, "Dataset manifest.json")->required();
  tr->add_option("--out", tr_out, "Checkpoint prefix")->required();
  auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "Overrides train.seed and model.init_seed");
  auto* tr_r_opt = tr->add_option("--r", tr_r, "Overrides model.bottleneck.r");
  auto* tr_epochs_opt = tr->add_option("--epochs", tr_epochs, "Overrides train.epochs");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Accuracy/F1 or R2/Kendall tau of a checkpoint on a split");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint prefix or sidecar")->required();
  ev->add_option("--data", ev_data, "Dataset manifest.json")->required();
  ev->add_option("--split", ev_split, "Split name")->capture_default_str();
  ev->add_option("--out", ev_out, "Also write the JSON report here");

  // explain
  auto* ex = app.add_subcommand("explain", "Explanation JSON and overlay for one image");
  std::string ex_ckpt, ex_image, ex_out;
  double ex_percentile = 5.0;
  ex->add_option("--checkpoint", ex_ckpt, "Checkpoint prefix or sidecar")->required();
  ex->add_option("--image", ex_image, "Input PNG")->required();
  ex->add_option("--out", ex_out, "Output prefix (.json and .png are appended)")->required();
  ex->add_option("--percentile", ex_percentile, "Top edge percentile kept")->capture_default_str();

  // metrics
  auto* me = app.add_subcommand("metrics", "Insertion curves, infidelity, sparsity, planted recall");
  std::string me_ckpt, me_data, me_split = "test", me_out, me_perturbation = "square";
  MetricsOptions mopt;
  bool me_no_attr = false, me_plot = false;
  me->add_option("--checkpoint", me_ckpt, "Checkpoint prefix or sidecar")->required();
  me->add_option("--data", me_data, "Dataset manifest.json")->required();
  me->add_option("--split", me_split, "Split name")->capture_default_str();
  me->add_option("--out", me_out, "Output prefix (.json and .csv are appended)")->required();
  me->add_option("--percentile", mopt.percentile, "Top edge percentile for planted recall")->capture_default_str();
  me->add_option("--steps", mopt.insertion_steps, "Insertion fractions")->capture_default_str();
  me->add_option("--ig-steps", mopt.ig_steps, "Integrated-gradients steps")->capture_default_str();
  me->add_option("--occlusion-patch", mopt.occlusion.patch_px, "Occlusion patch (px)")->capture_default_str();
  me->add_option("--occlusion-stride", mopt.occlusion.stride_px, "Occlusion stride (px)")->capture_default_str();
  me->add_option("--infidelity-samples", mopt.infidelity_samples, "Perturbations per image")->capture_default_str();
  me->add_option("--perturbation", me_perturbation, "square or gaussian")
      ->check(CLI::IsMember({"square", "gaussian"}))
      ->capture_default_str();
  me->add_option("--perturbation-patch", mopt.perturbation.patch_px, "Square perturbation side (px)")
      ->capture_default_str();
  me->add_option("--noise-sd", mopt.perturbation.noise_sd, "Gaussian perturbation sd")->capture_default_str();
  me->add_option("--max-attribution-images", mopt.max_attribution_images, "Limit attribution metrics (-1: all)")
      ->capture_default_str();
  me->add_flag("--no-attributions", me_no_attr, "Skip IG/occlusion metrics");
  me->add_flag("--plot", me_plot, "Also render the insertion curves to <out>_insertion.png");
  me->add_option("--seed", mopt.seed, "Perturbation seed")->capture_default_str();

  // r-sweep
  auto* rs = app.add_subcommand("r-sweep", "Train and evaluate at several r values");
  std::string rs_config, rs_data, rs_out, rs_list = "0.3,0.5,0.7", rs_split = "test";
  std::uint64_t rs_seed = 0;
  int rs_epochs = 0;
  rs->add_option("--config", rs_config, "Run config JSON");
  rs->add_option("--data", rs_data, "Dataset manifest.json")->required();
  rs->add_option("--out", rs_out, "CSV report path (a .json twin is written next to it)")->required();
  rs->add_option("--r", rs_list, "Comma-separated r values")->capture_default_str();
  rs->add_option("--split", rs_split, "Evaluation split")->capture_default_str();
  auto* rs_seed_opt = rs->add_option("--seed", rs_seed, "Overrides train.seed and model.init_seed");
  auto* rs_epochs_opt = rs->add_option("--epochs", rs_epochs, "Overrides train.epochs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (gen->parsed()) {
      const DatasetManifest m = generate_planted_dataset(gen_n, gen_side, gen_seed, gen_out, gen_window);
      json summary{{"manifest", (fs::path(gen_out) / "manifest.json").string()}};
      for (const auto& s : m.splits) summary["splits"][s.name] = s.records.size();
      out << summary.dump() << '\n';
    } else if (tr->parsed()) {
      RunConfig cfg = run_config(tr_config);
      apply_overrides(cfg, tr_seed_opt, tr_seed, tr_r_opt, tr_r, tr_epochs_opt, tr_epochs);
      const Dataset train_set = load_folder_dataset(tr_data, "train", cfg.model.input_side);
      const Dataset val_set = load_folder_dataset(tr_data, "val", cfg.model.input_side);
      if (train_set.task != cfg.model.task) throw ConfigError("dataset task does not match model.task");
      Model model(cfg.model);
      const Checkpoint ckpt = train(model, train_set, val_set, cfg.train, logging_hooks(err));
      const std::string prefix = checkpoint_prefix(tr_out);
      save_checkpoint(ckpt, prefix);
      out << json{{"checkpoint", prefix + ".json"},
                  {"epoch", ckpt.epoch},
                  {"val", ckpt.metrics ? ckpt.metrics->to_json() : json(nullptr)}}
                 .dump()
          << '\n';
    } else if (ev->parsed()) {
      const Checkpoint ckpt = load_checkpoint(ev_ckpt);
      const auto model = model_from_checkpoint(ckpt);
      const Dataset data = load_folder_dataset(ev_data, ev_split, ckpt.model.input_side);
      json report = evaluate(*model, data).to_json();
      report["split"] = ev_split;
      if (!ev_out.empty()) write_text(ev_out, report.dump(2) + "\n");
      out << report.dump() << '\n';
    } else if (ex->parsed()) {
      const Checkpoint ckpt = load_checkpoint(ex_ckpt);
      const auto model = model_from_checkpoint(ckpt);
      const Image image = load_image(ex_image, ckpt.model.input_side);
      const auto [pred, full] = predict_with_explanation(*model, image, fs::path(ex_image).filename().string());
      const Explanation sub = top_percentile_subgraph(full, ex_percentile);
      const fs::path parent = fs::path(ex_out).parent_path();
      if (!parent.empty()) fs::create_directories(parent);
      export_json(sub, ex_out + ".json");
      render_overlay(image, sub, ex_out + ".png");
      out << json{{"explanation", ex_out + ".json"}, {"overlay", ex_out + ".png"}, {"edges", sub.edges.size()}}.dump()
          << '\n';
    } else if (me->parsed()) {
      const Checkpoint ckpt = load_checkpoint(me_ckpt);
      const auto model = model_from_checkpoint(ckpt);
      const Dataset data = load_folder_dataset(me_data, me_split, ckpt.model.input_side);
      mopt.attributions = !me_no_attr;
      mopt.perturbation.kind =
          me_perturbation == "square" ? Perturbation::Kind::SquareRemoval : Perturbation::Kind::Gaussian;
      if (mopt.occlusion.stride_px > mopt.occlusion.patch_px) {
        err << "warning: occlusion stride exceeds patch; uncovered pixels get zero attribution\n";
      }
      const MetricsReport rep = compute_metrics(*model, data, mopt);
      write_text(me_out + ".json", rep.to_json().dump(2) + "\n");
      write_text(me_out + ".csv", rep.to_csv());
      json summary{{"json", me_out + ".json"},
                   {"csv", me_out + ".csv"},
                   {"insertion_auc_desc", rep.insertion_desc.auc},
                   {"insertion_auc_asc", rep.insertion_asc.auc}};
      if (rep.planted_recall) summary["planted_recall"] = *rep.planted_recall;
      if (me_plot) {
        write_png(me_out + "_insertion.png", render_insertion_plot(rep.insertion_desc, rep.insertion_asc));
        summary["plot"] = me_out + "_insertion.png";
      }
      out << summary.dump() << '\n';
    } else if (rs->parsed()) {
      RunConfig base = run_config(rs_config);
      apply_overrides(base, rs_seed_opt, rs_seed, nullptr, 0.0, rs_epochs_opt, rs_epochs);
      const std::vector<double> rs_values = parse_r_list(rs_list);
      const Dataset train_set = load_folder_dataset(rs_data, "train", base.model.input_side);
      const Dataset val_set = load_folder_dataset(rs_data, "val", base.model.input_side);
      const Dataset eval_set = load_folder_dataset(rs_data, rs_split, base.model.input_side);
      std::vector<SweepRow> rows;
      for (double r : rs_values) {
        RunConfig cfg = base;
        cfg.model.bottleneck.r = r;
        cfg.model.validate();
        err << "r = " << r << '\n';
        Model model(cfg.model);
        train(model, train_set, val_set, cfg.train, logging_hooks(err));
        SweepRow row;
        row.r = r;
        row.weight_sd = edge_weight_sd(model, eval_set);
        row.goodness_of_fit = evaluate(model, eval_set).primary();
        row.auc = insertion_curves(model, eval_set).descending.auc;
        rows.push_back(row);
      }
      std::string csv = "r,weight_sd,goodness_of_fit,auc\n";
      json j = json::array();
      for (const auto& row : rows) {
        csv += fmt(row.r) + ',' + fmt(row.weight_sd) + ',' + fmt(row.goodness_of_fit) + ',' + fmt(row.auc) + '\n';
        j.push_back({{"r", row.r}, {"weight_sd", row.weight_sd}, {"goodness_of_fit", row.goodness_of_fit}, {"auc", row.auc}});
      }
      write_text(rs_out, csv);
      const std::string json_path = (fs::path(rs_out).replace_extension(".json")).string();
      write_text(json_path, json{{"goodness_of_fit", base.model.task == Task::Classification ? "accuracy" : "r2"},
                                 {"split", rs_split},
                                 {"rows", j}}
                                .dump(2) +
                                "\n");
      out << csv;
    }
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kOk;
}

}  // namespace iwivig::cli
