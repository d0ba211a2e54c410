#include "dcs/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace dcs {
namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

long long parse_int(const std::string& v, const std::string& ctx) {
  std::size_t pos = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(ctx + ": '" + v + "' is not an integer");
  }
  if (pos != v.size()) throw ConfigError(ctx + ": '" + v + "' is not an integer");
  return out;
}

unsigned long long parse_uint(const std::string& v, const std::string& ctx) {
  std::size_t pos = 0;
  unsigned long long out = 0;
  if (!v.empty() && v[0] == '-')
    throw ConfigError(ctx + ": '" + v + "' is not a non-negative integer");
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(ctx + ": '" + v + "' is not a non-negative integer");
  }
  if (pos != v.size())
    throw ConfigError(ctx + ": '" + v + "' is not a non-negative integer");
  return out;
}

double parse_double(const std::string& v, const std::string& ctx) {
  std::size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(ctx + ": '" + v + "' is not a number");
  }
  if (pos != v.size()) throw ConfigError(ctx + ": '" + v + "' is not a number");
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::vector<int> parse_int_list(const std::string& v, const std::string& ctx) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError(ctx + ": empty element in list '" + v + "'");
    out.push_back(static_cast<int>(parse_int(item, ctx)));
  }
  if (out.empty()) throw ConfigError(ctx + ": list must not be empty");
  return out;
}

std::string format_int_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

struct Entry {
  const char* key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define INT_ENTRY(key, expr)                                                             \
  Entry{key,                                                                             \
        [](RunConfig& c, const std::string& v, const std::string& ctx) {                 \
          c.expr = static_cast<decltype(c.expr)>(parse_int(v, ctx));                     \
        },                                                                               \
        [](const RunConfig& c) { return std::to_string(c.expr); }}

#define DBL_ENTRY(key, expr)                                                             \
  Entry{key,                                                                             \
        [](RunConfig& c, const std::string& v, const std::string& ctx) {                 \
          c.expr = parse_double(v, ctx);                                                 \
        },                                                                               \
        [](const RunConfig& c) { return format_double(c.expr); }}

#define STR_ENTRY(key, expr)                                                             \
  Entry{key,                                                                             \
        [](RunConfig& c, const std::string& v, const std::string&) { c.expr = v; },      \
        [](const RunConfig& c) { return c.expr; }}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      Entry{"backbone.stage_widths",
            [](RunConfig& c, const std::string& v, const std::string& ctx) {
              c.backbone.stage_widths = parse_int_list(v, ctx);
            },
            [](const RunConfig& c) { return format_int_list(c.backbone.stage_widths); }},
      INT_ENTRY("backbone.blocks_per_stage", backbone.blocks_per_stage),
      INT_ENTRY("backbone.side", backbone.side),
      INT_ENTRY("backbone.reduction", backbone.reduction),
      INT_ENTRY("backbone.in_channels", backbone.in_channels),
      INT_ENTRY("heads.d_hidden", heads.d_hidden),
      INT_ENTRY("heads.d_proj", heads.d_proj),
      INT_ENTRY("heads.d_pred_hidden", heads.d_pred_hidden),
      INT_ENTRY("train.epochs", train.epochs),
      INT_ENTRY("train.batch_size", train.batch_size),
      DBL_ENTRY("train.base_lr", train.base_lr),
      INT_ENTRY("train.warmup_epochs", train.warmup_epochs),
      DBL_ENTRY("train.momentum", train.momentum),
      DBL_ENTRY("train.weight_decay", train.weight_decay),
      Entry{"train.seed",
            [](RunConfig& c, const std::string& v, const std::string& ctx) {
              c.train.seed = static_cast<std::uint64_t>(parse_uint(v, ctx));
            },
            [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      DBL_ENTRY("train.tau_start", train.tau_start),
      DBL_ENTRY("train.tau_end", train.tau_end),
      INT_ENTRY("train.checkpoint_every", train.checkpoint_every),
      DBL_ENTRY("budget.t_d", train.budget.t_d),
      DBL_ENTRY("budget.lambda", train.budget.lambda),
      DBL_ENTRY("budget.gamma", train.budget.gamma),
      DBL_ENTRY("budget.p_b", train.budget.p_b),
      DBL_ENTRY("augment.crop_scale_lo", augment.crop_scale_lo),
      DBL_ENTRY("augment.crop_scale_hi", augment.crop_scale_hi),
      DBL_ENTRY("augment.brightness", augment.brightness),
      DBL_ENTRY("augment.contrast", augment.contrast),
      DBL_ENTRY("augment.saturation", augment.saturation),
      DBL_ENTRY("augment.hue", augment.hue),
      DBL_ENTRY("augment.jitter_p", augment.jitter_p),
      DBL_ENTRY("augment.grayscale_p", augment.grayscale_p),
      DBL_ENTRY("augment.blur_p", augment.blur_p),
      DBL_ENTRY("augment.blur_sigma_lo", augment.blur_sigma_lo),
      DBL_ENTRY("augment.blur_sigma_hi", augment.blur_sigma_hi),
      DBL_ENTRY("augment.flip_p", augment.flip_p),
      STR_ENTRY("data.source", data.source),
      INT_ENTRY("data.train_limit", data.train_limit),
      INT_ENTRY("data.val_limit", data.val_limit),
      INT_ENTRY("data.synthetic_classes", data.synthetic_classes),
      INT_ENTRY("data.synthetic_per_class", data.synthetic_per_class),
      INT_ENTRY("eval.batch_size", eval.batch_size),
  };
  return entries;
}

#undef INT_ENTRY
#undef DBL_ENTRY
#undef STR_ENTRY

const Entry* find_entry(const std::string& key) {
  for (const auto& e : registry())
    if (key == e.key) return &e;
  return nullptr;
}

void apply_assignment(RunConfig& cfg, const std::string& line, const std::string& ctx) {
  const auto eq = line.find('=');
  if (eq == std::string::npos)
    throw ConfigError(ctx + ": expected key=value, got '" + line + "'");
  const std::string key = trim(line.substr(0, eq));
  const std::string value = trim(line.substr(eq + 1));
  if (key.empty()) throw ConfigError(ctx + ": missing key before '='");
  const Entry* e = find_entry(key);
  if (!e) throw ConfigError(ctx + ": unknown key '" + key + "'");
  e->set(cfg, value, ctx + ": " + key);
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    apply_assignment(cfg, line, origin + ":" + std::to_string(lineno));
  }
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  apply_assignment(cfg, assignment, "--set " + assignment);
}

std::string render_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& e : registry()) {
    const std::string key = e.key;
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      if (!out.empty()) out += "\n";
      section = sec;
    }
    out += key + " = " + e.get(cfg) + "\n";
  }
  return out;
}

}  // namespace dcs
