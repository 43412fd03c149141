// SPDX-License-Identifier: Apache-2.0
// JSON config files for CLI11. Nested objects map to subcommands, so
// {"train": {"epochs": 30}} sets `train --epochs 30`.
#pragma once

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace csmap::cli {

class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    return resolved(app, default_also).dump(2) + "\n";
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    nlohmann::json j;
    try {
      input >> j;
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
    std::vector<CLI::ConfigItem> items;
    collect(j, {}, items);
    return items;
  }

  /// Options that were set or have defaults, for the app and every parsed subcommand.
  static nlohmann::json resolved(const CLI::App* app, bool default_also = true) {
    nlohmann::json out = nlohmann::json::object();
    for (const CLI::Option* opt : app->get_options()) {
      if (!opt->get_configurable() || opt->get_lnames().empty()) continue;
      const std::string& name = opt->get_lnames().front();
      if (name == "help" || name == "config") continue;
      if (opt->get_type_size() == 0) {
        out[name] = opt->count() > 0 && opt->as<bool>();
        continue;
      }
      std::vector<std::string> values = opt->results();
      if (values.empty()) {
        if (!default_also || opt->get_default_str().empty()) continue;
        values = split_default(opt->get_default_str());
      }
      if (opt->get_expected_max() > 1) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& v : values) arr.push_back(typed(v));
        out[name] = arr;
      } else {
        out[name] = typed(values.back());
      }
    }
    for (const CLI::App* sub : app->get_subcommands()) out[sub->get_name()] = resolved(sub, default_also);
    return out;
  }

 private:
  // Vector defaults print as "[a,b,c]".
  static std::vector<std::string> split_default(const std::string& s) {
    if (s.size() < 2 || s.front() != '[' || s.back() != ']') return {s};
    std::vector<std::string> out;
    std::string item;
    for (char ch : s.substr(1, s.size() - 2)) {
      if (ch == ',') {
        out.push_back(item);
        item.clear();
      } else {
        item += ch;
      }
    }
    if (!item.empty()) out.push_back(item);
    return out;
  }

  static nlohmann::json typed(const std::string& s) {
    if (s == "true") return true;
    if (s == "false") return false;
    const auto j = nlohmann::json::parse(s, nullptr, false);
    if (!j.is_discarded() && j.is_number()) return j;
    return s;
  }

  static std::string scalar(const nlohmann::json& j, const std::string& key) {
    if (j.is_string()) return j.get<std::string>();
    if (j.is_boolean()) return j.get<bool>() ? "true" : "false";
    if (j.is_number()) return j.dump();
    throw CLI::ConversionError("config key '" + key + "' must be a string, number or boolean");
  }

  static void collect(const nlohmann::json& j, const std::vector<std::string>& parents,
                      std::vector<CLI::ConfigItem>& items) {
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) {
        auto sub = parents;
        sub.push_back(key);
        collect(value, sub, items);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v, key));
      } else {
        item.inputs.push_back(scalar(value, key));
      }
      items.push_back(std::move(item));
    }
  }
};

}  // namespace csmap::cli
