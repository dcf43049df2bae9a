#pragma once

// Small configurations that keep training-based tests fast.

#include <filesystem>
#include <random>
#include <string>

#include "tpkd/config.hpp"

namespace fixtures {

inline const char* kTinyConfig = R"(# tiny task and models
seed = 3
data.vocab = 4
data.feat_dim = 4
data.min_frames = 4
data.max_frames = 16
data.min_len = 1
data.max_len = 4
data.noise = 0.3
data.num_utts = 30
data.test_fraction = 0.2
model.large.enc_layers = 2
model.large.enc_width = 12
model.large.pred_embed = 4
model.large.pred_width = 8
model.large.joint_width = 8
model.large.addenc_width = 8
model.large.las_embed = 4
model.large.las_width = 8
model.large.att_dim = 8
model.large.heads = 2
model.small.enc_layers = 2
model.small.enc_width = 8
model.small.pred_embed = 4
model.small.pred_width = 6
model.small.joint_width = 6
model.small.addenc_width = 6
model.small.las_embed = 4
model.small.las_width = 6
model.small.att_dim = 6
model.small.heads = 2
sched.lr = 3e-3
train.epochs_stage1 = 3
train.epochs_stage2 = 2
train.epochs_stage3 = 2
experiment.seeds = 1
experiment.sweep_seeds = 1
)";

inline tpkd::Config tiny_config() { return tpkd::parse_config(kTinyConfig); }

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("tpkd_test_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace fixtures
