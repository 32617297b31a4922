// Command-line front end: one subcommand per pipeline stage.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "tablelab/pipeline.hpp"

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, missing_prerequisite = 3, numerical_failure = 4 };

struct Common {
  std::string config;
  std::string out;
  std::optional<int> threads;
  std::optional<std::uint64_t> seed;
};

tablelab::RunConfig resolve(const Common& c) {
  tablelab::RunConfig cfg = c.config.empty() ? tablelab::parse_run_config(nlohmann::json::object())
                                             : tablelab::load_run_config(c.config);
  if (const char* env = std::getenv("TABLELAB_OUT")) cfg.out_dir = env;
  if (const char* env = std::getenv("TABLELAB_THREADS")) cfg.threads = std::atoi(env);
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (c.threads) cfg.threads = *c.threads;
  if (c.seed) cfg.apply_seed(*c.seed);
  tablelab::validate(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tablelab: cell-location mechanisms in a small table-reading transformer"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "Run configuration (JSON)");
  app.add_option("--out", common.out, "Run directory (overrides out_dir)");
  app.add_option("--threads", common.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--seed", common.seed, "Seed override");

  using Fn = std::function<void(tablelab::Run&)>;
  std::vector<std::pair<std::string, Fn>> commands{
      {"gen", tablelab::stage_gen},
      {"train", [](tablelab::Run& r) { tablelab::stage_train(r, &std::cerr); }},
  };
  std::map<std::string, std::string> help{{"gen", "Generate the entity pool and all dataset splits"},
                                          {"train", "Train the model on the generated corpus"},
                                          {"eval", "Held-out exact match and error breakdown"},
                                          {"patch-map", "Layer x region activation patching"},
                                          {"stage1", "Header similarity, alignment heads and ablations"},
                                          {"stage2", "Coordinate probes, interaction scores, delimiter heads"},
                                          {"stage3", "Final-position head patching and mover heads"},
                                          {"steer", "Unit shift vector steering"},
                                          {"compose", "Additive composition of shift vectors"},
                                          {"noise", "Structural and filler noise injection"},
                                          {"multicell", "Multi-row and multi-column queries"},
                                          {"report", "Render report.md from existing outputs"},
                                          {"all", "Run every stage in order"}};
  for (const auto& s : tablelab::analysis_stages()) commands.push_back({s.name, s.fn});
  commands.push_back({"all", [](tablelab::Run& r) { tablelab::run_all(r, &std::cerr); }});

  for (const auto& [name, fn] : commands) {
    auto* sub = app.add_subcommand(name, help[name]);
    sub->fallthrough();
    sub->callback([&common, name = name, fn = fn] {
      tablelab::Run run(resolve(common));
      if (name == "all") fn(run);
      else tablelab::run_stage(run, name, fn);
      std::cerr << name << ": done (" << run.dir().string() << ")\n";
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const tablelab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const tablelab::PrerequisiteError& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return missing_prerequisite;
  } catch (const tablelab::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return numerical_failure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return failure;
  }
  return ok;
}
