#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mtdlab/errors.hpp"
#include "mtdlab/experiments.hpp"

using namespace mtdlab;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string seeds;
  std::string alpha_grid;
  std::string temp_grid;
  std::string entropy_mode;
  bool force = false;
};

template <typename T>
std::vector<T> ParseList(const std::string& text, const char* flag) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    T v;
    if (!(is >> v) || !(is >> std::ws).eof()) {
      throw ConfigError(std::string("--") + flag + ": cannot parse '" + item + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(std::string("--") + flag + ": empty list");
  return out;
}

// Precedence: flags over the config file over built-in defaults.
RunConfig Resolve(const Flags& f) {
  nlohmann::json file = nlohmann::json::object();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ConfigError("cannot open config " + f.config);
    try {
      file = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + f.config + ": " + e.what());
    }
  }
  RunConfig cfg = RunConfigFromJson(file);
  if (!f.out.empty()) {
    cfg.out = f.out;
  } else if (!file.contains("out")) {
    const char* root = std::getenv("MTDLAB_OUT");
    cfg.out = (std::filesystem::path(root ? root : "runs") / cfg.experiment).string();
  }
  if (!f.seeds.empty()) cfg.seeds = ParseList<std::uint64_t>(f.seeds, "seeds");
  if (f.seed) cfg.seeds = {*f.seed};
  if (!f.alpha_grid.empty()) cfg.steering.alpha_grid = ParseList<double>(f.alpha_grid, "alpha-grid");
  if (!f.temp_grid.empty()) cfg.steering.temp_grid = ParseList<double>(f.temp_grid, "temp-grid");
  if (!f.entropy_mode.empty()) cfg.steering.params.fixed_entropy = f.entropy_mode == "fixed";
  cfg.Validate();
  return cfg;
}

void AddFlags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "Run config (JSON)");
  cmd->add_option("--out", f.out, "Run directory (default $MTDLAB_OUT/<experiment>)");
  cmd->add_option("--seed", f.seed, "Run a single seed");
  cmd->add_option("--seeds", f.seeds, "Comma-separated seed list");
  cmd->add_option("--alpha-grid", f.alpha_grid, "Comma-separated alpha values for sweep");
  cmd->add_option("--temp-grid", f.temp_grid, "Comma-separated temperatures for sweep");
  cmd->add_option("--entropy-mode", f.entropy_mode, "geodesic or fixed")
      ->check(CLI::IsMember({"geodesic", "fixed"}));
  cmd->add_flag("--force", f.force, "Overwrite outputs written under another config");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mtdlab: Multiple Token Divergence experiments"};
  app.require_subcommand(1);
  Flags flags;
  struct Verb {
    const char* name;
    const char* help;
    bool (*per_seed)(const RunConfig&, std::uint64_t, const StageOptions&);
  };
  const Verb verbs[] = {
      {"gen-assets", "Write task assets (memorized pools, PFAs, creative worlds, bin edges)", CmdGenAssets},
      {"train", "Train the mixture variants and creative-task models", CmdTrain},
      {"eval", "Record logit traces and experiment records", CmdEval},
      {"steer", "Generate creative items with Divergence Steering", CmdSteer},
      {"sweep", "Creativity grid over temperature and alpha", CmdSweep},
      {"analyze", "Aggregate scores, correlations, binned curves and grids", nullptr},
  };
  for (const Verb& v : verbs) AddFlags(app.add_subcommand(v.name, v.help), flags);
  auto* show = app.add_subcommand("show-config", "Print the resolved config");
  AddFlags(show, flags);

  CLI11_PARSE(app, argc, argv);
  try {
    const RunConfig cfg = Resolve(flags);
    StageOptions opts;
    opts.force = flags.force;
    opts.log = &std::cerr;
    if (show->parsed()) {
      std::cout << RunConfigToJson(cfg).dump(2) << "\n";
      return 0;
    }
    for (const Verb& v : verbs) {
      if (!app.got_subcommand(v.name)) continue;
      if (v.per_seed) {
        for (std::uint64_t s : cfg.seeds) {
          std::cerr << v.name << ": seed " << s << "\n";
          v.per_seed(cfg, s, opts);
        }
      } else {
        CmdAnalyze(cfg, opts);
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
