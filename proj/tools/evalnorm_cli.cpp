// evalnorm command-line driver.
//
//   evalnorm train --config run.cfg --seed 7 [--set key=value ...] [--out DIR]
//   evalnorm sweep --config run.cfg --seed 7 --sizes 2,4,8,16
//   evalnorm eval --checkpoint DIR/checkpoint.enck --mode en
//   evalnorm estimate-offline --checkpoint in.enck --out out.enck [--steps N]
//   evalnorm hist --checkpoint in.enck --layer 0 --channel 3 --out hist.csv
//   evalnorm report --records a.csv b.csv [--out DIR]
//
// Exit status: 0 ok, 1 usage error, 2 runtime error.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "evalnorm/evalnorm.hpp"

namespace fs = std::filesystem;
using namespace evalnorm;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c, bool seed_required) {
  cmd->add_option("--config", c.config, "run configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "override a config key (key=value), repeatable")->take_all();
  auto* s = cmd->add_option("--seed", c.seed, "model init and shuffling seed");
  if (seed_required) s->required();
}

RunConfig resolve_config(const Common& c, RunConfig base = {}) {
  RunConfig cfg = c.config.empty() ? base : load_config(c.config);
  for (const auto& s : c.sets) apply_override(cfg, s);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string en_trajectory_csv(const RunRecord& r) {
  std::string out = "run_id,epoch,layer_id,alpha_hat,beta_hat,aux_loss\n";
  for (const auto& e : r.epochs)
    for (std::size_t l = 0; l < e.en.size(); ++l)
      out += r.run_id + "," + std::to_string(e.epoch) + "," + e.en[l].layer_id + "," + format_double(e.en[l].alpha_hat) +
             "," + format_double(e.en[l].beta_hat) + "," + format_double(l < e.aux_loss.size() ? e.aux_loss[l] : 0.0) +
             "\n";
  return out;
}

Dataset pick_split(const DatasetPair& d, const std::string& split) { return split == "train" ? d.train : d.eval; }

std::size_t resolve_layer(const Model& m, const std::string& layer) {
  for (std::size_t i = 0; i < m.norms.size(); ++i)
    if (m.norms[i].id == layer) return i;
  try {
    return static_cast<std::size_t>(parse_uint(layer));
  } catch (const ConfigError&) {
    throw ConfigError("unknown normalization layer '" + layer + "'");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EvalNorm: batch norm with decoupled microbatches and evaluation-time statistics"};
  app.require_subcommand(1);

  Common train_c, sweep_c, eval_c, est_c, hist_c;
  std::string train_out, sweep_out, sweep_sizes = "2,4,8,16";

  auto* train_cmd = app.add_subcommand("train", "train one model and write checkpoint + CSVs");
  add_common(train_cmd, train_c, true);
  train_cmd->add_option("--out", train_out, "output directory (default: output_dir from config)");

  auto* sweep_cmd = app.add_subcommand("sweep", "train once per normalization microbatch size");
  add_common(sweep_cmd, sweep_c, true);
  sweep_cmd->add_option("--sizes", sweep_sizes, "comma separated microbatch sizes")->capture_default_str();
  sweep_cmd->add_option("--out", sweep_out, "output directory (default: output_dir from config)");

  std::string eval_ck, eval_mode = "ema", eval_split = "eval";
  std::optional<double> eval_alpha;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, eval_c, false);
  eval_cmd->add_option("--checkpoint", eval_ck)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--mode", eval_mode, "ema | en | simple_inv_b | simple_inv_b2 | instance | simple")
      ->check(CLI::IsMember({"ema", "en", "simple_inv_b", "simple_inv_b2", "instance", "simple"}))
      ->capture_default_str();
  eval_cmd->add_option("--alpha", eval_alpha, "mixing weight for --mode simple")->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--split", eval_split)->check(CLI::IsMember({"train", "eval"}))->capture_default_str();

  std::string est_ck, est_out, est_split = "train";
  std::size_t est_steps = 0, est_mb = 0;
  auto* est_cmd = app.add_subcommand("estimate-offline", "fit EnParams on a frozen checkpoint");
  add_common(est_cmd, est_c, false);
  est_cmd->add_option("--checkpoint", est_ck)->required()->check(CLI::ExistingFile);
  est_cmd->add_option("--out", est_out, "checkpoint to write")->required();
  est_cmd->add_option("--steps", est_steps, "microbatch steps (0: min(N/B, 2000))");
  est_cmd->add_option("--microbatch", est_mb, "normalization microbatch (0: from checkpoint)");
  est_cmd->add_option("--split", est_split)->check(CLI::IsMember({"train", "eval"}))->capture_default_str();

  std::string hist_ck, hist_out, hist_layer = "0", hist_split = "eval";
  std::size_t hist_channel = 0, hist_mb = 0;
  auto* hist_cmd = app.add_subcommand("hist", "activation histograms under TrainBN / EMA / EN");
  add_common(hist_cmd, hist_c, false);
  hist_cmd->add_option("--checkpoint", hist_ck)->required()->check(CLI::ExistingFile);
  hist_cmd->add_option("--layer", hist_layer, "layer index or id")->capture_default_str();
  hist_cmd->add_option("--channel", hist_channel)->capture_default_str();
  hist_cmd->add_option("--out", hist_out, "histogram CSV")->required();
  hist_cmd->add_option("--microbatch", hist_mb, "TrainBN microbatch (0: from checkpoint)");
  hist_cmd->add_option("--split", hist_split)->check(CLI::IsMember({"train", "eval"}))->capture_default_str();

  std::vector<std::string> report_in;
  std::string report_out;
  auto* report_cmd = app.add_subcommand("report", "merge record CSVs and print a summary");
  report_cmd->add_option("--records", report_in, "record CSV files")->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--out", report_out, "directory for records.csv and summary.txt");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*train_cmd) {
      const RunConfig cfg = resolve_config(train_c);
      const fs::path dir = train_out.empty() ? fs::path(cfg.output_dir) : fs::path(train_out);
      const auto res = train(cfg);
      fs::create_directories(dir);
      save_checkpoint((dir / "checkpoint.enck").string(), res.checkpoint);
      write_text(dir / "records.csv", records_csv(std::vector<RunRecord>{res.record}));
      write_text(dir / "en_params.csv", en_table_csv(res.record.run_id, model_en_params(res.model)));
      write_text(dir / "en_trajectory.csv", en_trajectory_csv(res.record));
      std::cout << summary_text(record_rows(res.record));
    } else if (*sweep_cmd) {
      const RunConfig cfg = resolve_config(sweep_c);
      const auto sizes = parse_size_list(sweep_sizes);
      const fs::path dir = sweep_out.empty() ? fs::path(cfg.output_dir) : fs::path(sweep_out);
      const auto results = sweep(cfg, sizes, load_datasets(cfg));
      fs::create_directories(dir);
      std::vector<RunRecord> records;
      std::string en_table = std::string(kEnTableHeader) + "\n";
      for (const auto& r : results) {
        records.push_back(r.record);
        save_checkpoint((dir / (r.record.run_id + ".enck")).string(), r.checkpoint);
        const std::string t = en_table_csv(r.record.run_id, model_en_params(r.model));
        en_table += t.substr(t.find('\n') + 1);
      }
      write_text(dir / "records.csv", records_csv(records));
      write_text(dir / "en_params.csv", en_table);
      std::vector<RecordRow> rows;
      for (const auto& r : records) {
        auto more = record_rows(r);
        rows.insert(rows.end(), more.begin(), more.end());
      }
      std::cout << summary_text(rows);
    } else if (*eval_cmd) {
      const Checkpoint ck = load_checkpoint(eval_ck);
      const RunConfig cfg = resolve_config(eval_c, config_from_checkpoint(ck));
      const Model model = model_from_checkpoint(ck);
      NormMode mode = NormMode::eval_ema();
      if (eval_mode == "simple") {
        if (!eval_alpha) throw ConfigError("--mode simple needs --alpha");
        mode = NormMode::eval_simple(*eval_alpha);
      } else {
        mode = to_norm_mode(parse_eval_mode(eval_mode), cfg.norm_microbatch);
      }
      const auto data = pick_split(load_datasets(cfg), eval_split);
      const auto r = evaluate(model, data, mode, cfg.eps, cfg.eval_batch);
      std::cout << "mode,accuracy,correct,total\n"
                << eval_mode << "," << format_double(r.accuracy) << "," << r.correct << "," << r.total << "\n";
    } else if (*est_cmd) {
      const Checkpoint ck = load_checkpoint(est_ck);
      const RunConfig cfg = resolve_config(est_c, config_from_checkpoint(ck));
      OfflineOptions opt;
      opt.microbatch = est_mb;
      opt.steps = est_steps;
      opt.seed = est_c.seed.value_or(cfg.seed);
      opt.optimizer.lr = cfg.en.lr;
      opt.optimizer.momentum = cfg.en.momentum;
      if (cfg.en.init) opt.init = *cfg.en.init;
      OfflineEstimate details;
      const Checkpoint out = estimate_offline_cmd(ck, pick_split(load_datasets(cfg), est_split), opt, &details);
      save_checkpoint(est_out, out);
      std::cout << en_table_csv(cfg.effective_run_id(), details.params);
      for (std::size_t l = 0; l < details.params.size(); ++l)
        std::cerr << details.params[l].layer_id << ": aux loss " << format_double(details.initial_loss[l]) << " -> "
                  << format_double(details.final_loss[l]) << "\n";
      std::cerr << details.steps << " steps\n";
    } else if (*hist_cmd) {
      const Checkpoint ck = load_checkpoint(hist_ck);
      const RunConfig cfg = resolve_config(hist_c, config_from_checkpoint(ck));
      const Model model = model_from_checkpoint(ck);
      const std::size_t mb = hist_mb ? hist_mb : cfg.norm_microbatch;
      const auto r = emit_histograms(model, pick_split(load_datasets(cfg), hist_split), resolve_layer(model, hist_layer),
                                     hist_channel, mb, cfg.eps);
      write_text(hist_out, histogram_csv(r));
      std::cout << "layer_id,channel,w1_ema,w1_en\n"
                << r.layer_id << "," << r.channel << "," << format_double(r.distance_ema) << ","
                << format_double(r.distance_en) << "\n";
    } else if (*report_cmd) {
      std::vector<RecordRow> rows;
      for (const auto& path : report_in) {
        auto more = parse_records_csv(read_text(path));
        rows.insert(rows.end(), more.begin(), more.end());
      }
      const std::string summary = summary_text(rows);
      if (!report_out.empty()) {
        write_text(fs::path(report_out) / "records.csv", records_csv(rows));
        write_text(fs::path(report_out) / "summary.txt", summary);
      }
      std::cout << summary;
    }
  } catch (const std::exception& e) {
    std::cerr << "evalnorm: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
