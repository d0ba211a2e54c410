#pragma once

#include <string>

#include "dcs/backbone.hpp"
#include "dcs/data.hpp"
#include "dcs/heads.hpp"
#include "dcs/trainer.hpp"

namespace dcs {

// Which images a run trains and evaluates on.
struct DataConfig {
  std::string source = "synthetic";  // cifar10 | cifar100 | synthetic
  int train_limit = 5000;            // images taken from the train split, 0 = all
  int val_limit = 1000;              // images taken from the val/test split, 0 = all
  int synthetic_classes = 10;
  int synthetic_per_class = 600;     // pool per class before the split limits

  void validate() const {
    if (source != "cifar10" && source != "cifar100" && source != "synthetic")
      throw ConfigError("data.source must be cifar10, cifar100, or synthetic (got '" +
                        source + "')");
    if (train_limit < 0 || val_limit < 0)
      throw ConfigError("data limits must be >= 0 (0 means all)");
    if (synthetic_classes < 2) throw ConfigError("data.synthetic_classes must be >= 2");
    if (synthetic_per_class < 1) throw ConfigError("data.synthetic_per_class must be >= 1");
  }
};

struct EvalConfig {
  int batch_size = 256;

  void validate() const {
    if (batch_size < 1) throw ConfigError("eval.batch_size must be >= 1");
  }
};

// Everything a run reads, merged from one config file plus overrides.
struct RunConfig {
  BackboneConfig backbone;
  HeadsConfig heads;  // heads.d_enc follows backbone.stage_widths.back()
  TrainConfig train;
  AugmentationConfig augment;
  DataConfig data;
  EvalConfig eval;

  void validate() const {
    backbone.validate();
    HeadsConfig h = heads;
    h.d_enc = backbone.d_enc();
    h.validate();
    train.validate();
    augment.validate();
    data.validate();
    eval.validate();
  }
};

// key=value text with dotted keys, '#' comments, blank lines. Unknown keys
// are rejected by full path. `origin` labels errors ("file.cfg:7", "--set").
RunConfig parse_config_text(const std::string& text, const std::string& origin);
RunConfig parse_config_file(const std::string& path);

// One "section.key=value" assignment applied on top of a parsed config.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Canonical echo: every known key in registry order, current values. The
// output parses back to an identical config.
std::string render_config(const RunConfig& cfg);

}  // namespace dcs
