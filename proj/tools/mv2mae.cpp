#include <exception>
#include <iostream>
#include <map>
#include <memory>

#include "CLI11.hpp"
#include "mv2mae/cli.hpp"
#include "mv2mae/errors.hpp"

namespace {

struct Subcommand {
  CLI::App* app = nullptr;
  std::string config;
  bool dump = false;
  std::map<std::string, std::string> values;
};

const char* describe(const std::string& cmd) {
  if (cmd == "gen-data") return "render a synthetic multi-view dataset";
  if (cmd == "pretrain") return "multi-view masked pre-training";
  if (cmd == "finetune") return "train a classifier on top of the encoder";
  if (cmd == "eval") return "multi-view evaluation with late fusion";
  if (cmd == "viz") return "write motion-weight, reconstruction or cross-attention images";
  return "finite-difference gradient checks";
}

}  // namespace

int main(int argc, char** argv) {
  using namespace mv2mae;
  CLI::App app{"Multi-view masked video autoencoder"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<Subcommand>> subs;
  for (const auto& cmd : cli::commands()) {
    auto s = std::make_unique<Subcommand>();
    s->app = app.add_subcommand(cmd, describe(cmd));
    s->app->add_option("--config", s->config, "key=value configuration file");
    s->app->add_flag("--dump-config", s->dump, "print the resolved configuration and exit");
    for (const auto& key : cli::config_keys()) {
      std::string names = "--" + key;
      std::string dashed = key;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      if (dashed != key) names += ",--" + dashed;
      auto* opt = s->app->add_option(names, s->values[key], cli::key_help(key));
      if (cli::is_bool_key(key)) opt->expected(0, 1)->default_str("true");
    }
    subs.push_back(std::move(s));
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (const auto& s : subs) {
    if (!s->app->parsed()) continue;
    const std::string cmd = s->app->get_name();
    try {
      std::vector<std::pair<std::string, std::string>> entries;
      if (!s->config.empty()) entries = cli::read_config_file(s->config);
      for (const auto& key : cli::config_keys()) {
        if (s->app->count("--" + key) == 0) continue;
        auto value = s->values.at(key);
        if (value.empty() && cli::is_bool_key(key)) value = "true";
        entries.emplace_back(key, value);
      }
      const auto cfg = cli::resolve(cmd, entries);
      if (s->dump) {
        std::cout << cli::dump_config(cfg);
        return 0;
      }
      return cli::run_command(cfg, std::cout);
    } catch (const ConfigError& e) {
      std::cerr << "mv2mae " << cmd << ": configuration error: " << e.what() << '\n';
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "mv2mae " << cmd << ": " << e.what() << '\n';
      return 1;
    }
  }
  return 2;
}
