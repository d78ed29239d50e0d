// Command-line front end: gen, train, eval, sweep-n, sweep-range.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mlcl/harness.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string dataset;
  std::vector<std::string> checkpoints;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "flat key = value config file");
  cmd->add_option("--seed", c.seed, "master seed (overrides the config)");
  cmd->add_option("--out", c.out, "output directory (overrides out_dir)");
  cmd->add_flag("--quiet", c.quiet, "suppress progress output");
}

mlcl::ExperimentConfig resolve(const Common& c) {
  mlcl::ExperimentConfig cfg = c.config.empty() ? mlcl::ExperimentConfig{} : mlcl::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

mlcl::Dataset dataset_for(const Common& c, const mlcl::ExperimentConfig& cfg) {
  return c.dataset.empty() ? mlcl::build_dataset(cfg) : mlcl::load_dataset(c.dataset);
}

mlcl::ModelMap load_models(const std::vector<std::string>& paths) {
  mlcl::ModelMap models;
  for (const auto& p : paths) {
    auto m = mlcl::model_from_checkpoint(mlcl::tc::load_checkpoint(p));
    const auto scheme = m.scheme;
    models.insert_or_assign(scheme, std::move(m));
  }
  return models;
}

mlcl::ProgressFn progress(bool quiet) {
  if (quiet) return {};
  return [](const mlcl::CurveRow& r) {
    if (!r.eval_mae) return;
    std::fprintf(stderr, "step %lld  train_loss %.3f m  eval_mae %.3f m\n", static_cast<long long>(r.step),
                 r.train_loss, *r.eval_mae);
  };
}

void print_table(const mlcl::ResultTable& t) { std::cout << t.to_csv(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cooperative vehicle localization experiments"};
  app.require_subcommand(1);

  Common gen_opts, train_opts, eval_opts, sn_opts, sr_opts;
  std::string scheme = "mlcl";
  std::string resume;

  auto* gen = app.add_subcommand("gen", "simulate traces and write a dataset directory");
  add_common(gen, gen_opts);

  auto* tr = app.add_subcommand("train", "train mlcl, nc or gcn; writes checkpoint and learning curve");
  add_common(tr, train_opts);
  tr->add_option("--dataset", train_opts.dataset, "dataset directory from `gen` (default: generate in memory)");
  tr->add_option("--scheme", scheme, "mlcl | nc | gcn")->check(CLI::IsMember({"mlcl", "nc", "gcn"}));
  tr->add_option("--resume", resume, "checkpoint to continue from");

  auto* ev = app.add_subcommand("eval", "per-time MAE of every configured scheme on the test split");
  add_common(ev, eval_opts);
  ev->add_option("--dataset", eval_opts.dataset, "dataset directory from `gen`");
  ev->add_option("--checkpoint", eval_opts.checkpoints, "checkpoint of a learned scheme (repeatable)");

  auto* sn = app.add_subcommand("sweep-n", "MAE against evaluation group size");
  add_common(sn, sn_opts);
  sn->add_option("--dataset", sn_opts.dataset, "dataset directory from `gen`");
  sn->add_option("--checkpoint", sn_opts.checkpoints, "checkpoint of a learned scheme (repeatable)");

  auto* sr = app.add_subcommand("sweep-range", "MAE against communication range");
  add_common(sr, sr_opts);
  sr->add_option("--dataset", sr_opts.dataset, "dataset directory from `gen`");
  sr->add_option("--checkpoint", sr_opts.checkpoints, "checkpoint of a learned scheme (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = resolve(gen_opts);
      const auto d = mlcl::cmd_gen(cfg, cfg.out_dir);
      std::cout << "wrote " << d.train.size() << " train and " << d.test.size() << " test episodes to "
                << cfg.out_dir << "\n";
    } else if (tr->parsed()) {
      const auto cfg = resolve(train_opts);
      const auto d = dataset_for(train_opts, cfg);
      std::optional<fs::path> from;
      if (!resume.empty()) from = resume;
      const auto m = mlcl::cmd_train(cfg, scheme, d, cfg.out_dir, from, progress(train_opts.quiet));
      if (!m.curve.empty() && m.curve.back().eval_mae)
        std::cout << scheme << " final eval MAE " << *m.curve.back().eval_mae << " m\n";
    } else if (ev->parsed()) {
      const auto cfg = resolve(eval_opts);
      const auto d = dataset_for(eval_opts, cfg);
      const auto res = mlcl::cmd_eval(cfg, d, load_models(eval_opts.checkpoints), cfg.out_dir);
      print_table(res.summary);
    } else if (sn->parsed()) {
      const auto cfg = resolve(sn_opts);
      const auto d = dataset_for(sn_opts, cfg);
      auto models = load_models(sn_opts.checkpoints);
      print_table(mlcl::cmd_sweep_n(cfg, d, models, cfg.out_dir, progress(sn_opts.quiet)).table);
    } else if (sr->parsed()) {
      const auto cfg = resolve(sr_opts);
      const auto d = dataset_for(sr_opts, cfg);
      auto models = load_models(sr_opts.checkpoints);
      print_table(mlcl::cmd_sweep_range(cfg, d, models, cfg.out_dir, progress(sr_opts.quiet)).table);
    }
  } catch (const mlcl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const mlcl::ParseError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const mlcl::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
