#pragma once

// Command-line front end: one CLI11 subcommand per pipeline stage, each key
// exposed as --key. Exit codes: 0 ok, 1 usage, 2 data, 3 numerical.

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pkge/pipeline.hpp"

namespace pkge {

inline int run_cli(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"pkge: product knowledge graph embeddings"};
  app.require_subcommand(1);
  std::string config_file;
  std::map<std::string, std::map<std::string, std::string>> flags;
  for (const auto& stage : stages()) {
    auto* sub = app.add_subcommand(stage.name, stage.help);
    sub->add_option("--config", config_file, "key=value config file; flags override it");
    for (const auto& k : stage.keys) {
      sub->add_option("--" + k.key, flags[stage.name][k.key], k.help)->default_str(k.def.empty() ? "\"\"" : k.def);
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    for (const auto* sub : app.get_subcommands()) {
      err << "valid keys for " << sub->get_name() << ": " << Config(sub->get_name(), find_stage(sub->get_name()).keys).valid_keys() << '\n';
    }
    return 1;
  }
  try {
    const auto* sub = app.get_subcommands().front();
    const auto& stage = find_stage(sub->get_name());
    Config cfg(stage.name, stage.keys);
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& k : stage.keys) {
      if (sub->count("--" + k.key)) cfg.set(k.key, flags[stage.name][k.key]);
    }
    stage.run(cfg);
    return 0;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace pkge
