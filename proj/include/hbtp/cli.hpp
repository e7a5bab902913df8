#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "hbtp/measures.hpp"
#include "hbtp/vi.hpp"

namespace hbtp::cli {

enum class Mode { Unsupervised, Supervised };

struct RunConfig {
  Hyper hyper;
  InferenceConfig inference;
  Mode mode = Mode::Unsupervised;
  bool prune_leaves = true;
  std::size_t min_count = 2;

  std::string events, stories, checkpoint, trace, predictions, metrics, out, out_dir;
  int folds = 0;  // 0: no cross-validation split
  int fold = -1;

  // sampler
  int users = 150;
  int num_stories = 60;
  int min_sharers = 2;
  int max_sharers = 6;
  int hubs = 0;
  int words = 50;
  int vocab_size = 200;
  std::string label_h;  // "true:2,false:-1,..."; empty draws h from the GP

  void validate() const;
};

/// Parses flat key=value text ('#' starts a comment). Keys use underscores.
std::map<std::string, std::string> parse_config_text(const std::string& text,
                                                     const std::string& name = "<config>");

/// Applies key=value settings on top of `cfg`; unknown keys and malformed
/// values raise ConfigError naming the key.
void apply_settings(RunConfig& cfg, const std::map<std::string, std::string>& settings);

/// Writes through a temporary file in the same directory and renames it into
/// place, so a failed writer leaves no partial output.
void write_atomic(const std::filesystem::path& path, const std::function<void(std::ostream&)>& fn);

/// Exit status: 0 success, 1 usage/configuration error, 2 runtime error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hbtp::cli
