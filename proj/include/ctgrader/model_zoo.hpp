#pragma once

#include <array>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>

#include "ctgrader/common.hpp"
#include "ctgrader/nn/layers.hpp"
#include "ctgrader/nn/serialize.hpp"

namespace ctg {

enum class Arch {
  AlexNet,
  VGG,
  ResNet152,
  WideResNet101,
  DenseNet,
  DenseNet201,
  InceptionNet,
  SqueezeNet,
  VTB32,
};

const std::vector<Arch>& arch_registry();
std::string to_string(Arch a);
Arch parse_arch(const std::string& name);

// Native input side of the published pretrained pipeline for each backbone.
int canonical_input_size(Arch a);
// Width of the feature vector feeding the classification head.
int head_in_features(Arch a);

enum class WeightInit { pretrained, scratch };
std::string to_string(WeightInit w);
WeightInit parse_weight_init(const std::string& name);

enum class FineTuneExtent { last_layer_only, all_layers };
std::string to_string(FineTuneExtent e);
FineTuneExtent parse_extent(const std::string& name);

struct ModelSpec {
  Arch arch = Arch::SqueezeNet;
  int input_side = 224;  // v
  std::array<float, 3> norm_mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> norm_std{0.229f, 0.224f, 0.225f};
  int num_classes = kNumClasses;
  WeightInit init = WeightInit::scratch;
};

ModelSpec default_model_spec(Arch a, WeightInit init = WeightInit::scratch);

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

struct ModelOutput {
  nn::Var logits;
  nn::Var aux_logits;  // InceptionNet in train mode only, otherwise null
};

class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {}
  virtual ~Model() = default;

  // Validates the [N,3,v,v] batch shape before running the network.
  ModelOutput forward(const nn::Var& x, nn::ForwardCtx& ctx);

  const ModelSpec& spec() const { return spec_; }
  nn::ParamStore& store() { return store_; }
  const nn::ParamStore& store() const { return store_; }

  // Parameters whose name starts with this prefix form the classification
  // head; everything else is backbone.
  virtual std::string head_prefix() const { return "head."; }

  int64_t total_param_count() const;
  int64_t trainable_param_count() const;
  std::vector<nn::Var> trainable_params() const;

 protected:
  virtual ModelOutput forward_impl(const nn::Var& x, nn::ForwardCtx& ctx) = 0;

  ModelSpec spec_;
  nn::ParamStore store_;
};

// Scratch builds are fully deterministic in (spec, seed). Pretrained builds
// additionally load backbone weights from `<weights_dir>/<arch>.ctw` (the
// directory comes from CTGRADER_PRETRAINED_DIR unless given explicitly) and
// keep the freshly initialized K-way head.
std::unique_ptr<Model> build_model(const ModelSpec& spec, uint64_t seed,
                                   const std::optional<fs::path>& weights_dir = std::nullopt);

void apply_freeze_policy(Model& model, FineTuneExtent extent);

// FNV-1a over raw parameter bytes in registration order; buffers excluded.
uint64_t param_checksum(const Model& model, bool include_head = true);

// Weight-blob helpers shared by checkpoints and pretrained files.
nn::TensorFile snapshot_weights(const Model& model);
void restore_weights(Model& model, const nn::TensorFile& file);

}  // namespace ctg
