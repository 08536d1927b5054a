// SPDX-License-Identifier: Apache-2.0
//
// transcrowd <command> [--config file.json] [--key value ...]
//
// Every schema key is accepted as a dashed flag (head_hidden -> --head-hidden).
// For `infer` and `attnmap`, --image names the input picture.

#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "transcrowd.hpp"

namespace {

std::string flag_for(std::string key) {
  for (char& c : key)
    if (c == '_') c = '-';
  return "--" + key;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace transcrowd;
  CLI::App app{"transcrowd: transformer crowd counting from count-level labels"};
  app.require_subcommand(1);

  std::string config_path;
  std::map<std::string, std::string> given;  // schema key -> raw text
  const std::map<std::string, std::string> about{
      {"synth", "generate a synthetic dot-counting dataset"},
      {"train", "train from scratch or resume from a checkpoint"},
      {"eval", "per-image predictions and MAE/MSE on a labelled directory"},
      {"infer", "predict the count of one image"},
      {"gradcheck", "finite-difference check of every parameter gradient"},
      {"attnmap", "export the last-layer attention map as PGM"}};

  for (const auto& name : command_names()) {
    CLI::App* sub = app.add_subcommand(name, about.at(name));
    sub->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    const bool picture = name == "infer" || name == "attnmap";
    for (const auto& field : config_schema()) {
      const std::string key = field.key;
      if (picture && key == "image") continue;
      sub->add_option(flag_for(key), given[key], "config key " + key);
    }
    if (picture) sub->add_option("--image", given["image_path"], "input PPM");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error\tusage\t" << e.what() << '\n';
    return 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  RunConfig cfg;
  try {
    nlohmann::json overrides = nlohmann::json::object();
    for (const auto& [key, text] : given)
      if (!text.empty()) overrides[key] = override_value(key, text);
    cfg = config_path.empty() ? parse_config(nlohmann::json::object(), overrides)
                              : parse_config(std::filesystem::path(config_path), overrides);
  } catch (const std::exception& e) {
    std::cerr << "error\tconfig\t" << e.what() << '\n';
    return 2;
  }
  return dispatch(command, cfg, std::cout, std::cerr);
}
