#include "ctgrader/model_zoo.hpp"

#include <cstdlib>
#include <cstring>

#include "models/arch_impl.hpp"

namespace ctg {

const std::vector<Arch>& arch_registry() {
  static const std::vector<Arch> kRegistry = {
      Arch::AlexNet,   Arch::VGG,          Arch::ResNet152,
      Arch::WideResNet101, Arch::DenseNet, Arch::DenseNet201,
      Arch::InceptionNet,  Arch::SqueezeNet, Arch::VTB32,
  };
  return kRegistry;
}

std::string to_string(Arch a) {
  switch (a) {
    case Arch::AlexNet: return "AlexNet";
    case Arch::VGG: return "VGG";
    case Arch::ResNet152: return "ResNet152";
    case Arch::WideResNet101: return "WideResNet101";
    case Arch::DenseNet: return "DenseNet";
    case Arch::DenseNet201: return "DenseNet201";
    case Arch::InceptionNet: return "InceptionNet";
    case Arch::SqueezeNet: return "SqueezeNet";
    case Arch::VTB32: return "VTB32";
  }
  throw ArgumentError("invalid arch value");
}

Arch parse_arch(const std::string& name) {
  for (Arch a : arch_registry())
    if (lower(to_string(a)) == lower(trim(name))) return a;
  throw ArgumentError("unknown architecture: '" + name + "'");
}

int canonical_input_size(Arch a) {
  return a == Arch::InceptionNet ? 299 : 224;
}

int head_in_features(Arch a) {
  switch (a) {
    case Arch::AlexNet: return 4096;
    case Arch::VGG: return 4096;
    case Arch::ResNet152: return 2048;
    case Arch::WideResNet101: return 2048;
    case Arch::DenseNet: return 1024;   // DenseNet-121
    case Arch::DenseNet201: return 1920;
    case Arch::InceptionNet: return 2048;
    case Arch::SqueezeNet: return 512;  // final 1x1 conv
    case Arch::VTB32: return 768;
  }
  throw ArgumentError("invalid arch value");
}

std::string to_string(WeightInit w) {
  return w == WeightInit::pretrained ? "pretrained" : "scratch";
}

WeightInit parse_weight_init(const std::string& name) {
  const std::string t = lower(trim(name));
  if (t == "pretrained") return WeightInit::pretrained;
  if (t == "scratch") return WeightInit::scratch;
  throw ArgumentError("unknown weight init mode: '" + name + "'");
}

std::string to_string(FineTuneExtent e) {
  return e == FineTuneExtent::all_layers ? "all" : "last";
}

FineTuneExtent parse_extent(const std::string& name) {
  const std::string t = lower(trim(name));
  if (t == "all" || t == "all_layers") return FineTuneExtent::all_layers;
  if (t == "last" || t == "last_layer_only" || t == "last_layer")
    return FineTuneExtent::last_layer_only;
  throw ArgumentError("unknown fine-tune extent: '" + name + "'");
}

ModelSpec default_model_spec(Arch a, WeightInit init) {
  ModelSpec spec;
  spec.arch = a;
  spec.input_side = canonical_input_size(a);
  spec.init = init;
  return spec;
}

nlohmann::json to_json(const ModelSpec& spec) {
  return {
      {"arch", to_string(spec.arch)},
      {"input_side", spec.input_side},
      {"norm_mean", spec.norm_mean},
      {"norm_std", spec.norm_std},
      {"num_classes", spec.num_classes},
      {"init", to_string(spec.init)},
  };
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec spec;
  spec.arch = parse_arch(j.at("arch").get<std::string>());
  spec.input_side = j.at("input_side").get<int>();
  spec.norm_mean = j.at("norm_mean").get<std::array<float, 3>>();
  spec.norm_std = j.at("norm_std").get<std::array<float, 3>>();
  spec.num_classes = j.at("num_classes").get<int>();
  spec.init = parse_weight_init(j.at("init").get<std::string>());
  return spec;
}

ModelOutput Model::forward(const nn::Var& x, nn::ForwardCtx& ctx) {
  const auto& s = x->value.shape;
  if (s.size() != 4 || s[1] != 3 || s[2] != spec_.input_side || s[3] != spec_.input_side) {
    throw ArgumentError(to_string(spec_.arch) + " expects input of shape [N,3," +
                        std::to_string(spec_.input_side) + "," +
                        std::to_string(spec_.input_side) + "], got " + x->value.shape_str());
  }
  return forward_impl(x, ctx);
}

int64_t Model::total_param_count() const {
  int64_t n = 0;
  for (const auto& p : store_.params()) n += p.var->value.numel();
  return n;
}

int64_t Model::trainable_param_count() const {
  int64_t n = 0;
  for (const auto& p : store_.params())
    if (p.var->requires_grad) n += p.var->value.numel();
  return n;
}

std::vector<nn::Var> Model::trainable_params() const {
  std::vector<nn::Var> out;
  for (const auto& p : store_.params())
    if (p.var->requires_grad) out.push_back(p.var);
  return out;
}

namespace {

std::unique_ptr<Model> build_scratch(const ModelSpec& spec, uint64_t seed) {
  nn::Rng rng(seed);
  switch (spec.arch) {
    case Arch::AlexNet: return models::build_alexnet(spec, rng);
    case Arch::VGG: return models::build_vgg16(spec, rng);
    case Arch::ResNet152:
    case Arch::WideResNet101: return models::build_resnet(spec, rng);
    case Arch::DenseNet:
    case Arch::DenseNet201: return models::build_densenet(spec, rng);
    case Arch::InceptionNet: return models::build_inception_v3(spec, rng);
    case Arch::SqueezeNet: return models::build_squeezenet(spec, rng);
    case Arch::VTB32: return models::build_vit_b32(spec, rng);
  }
  throw ArgumentError("architecture not in registry");
}

void load_pretrained_backbone(Model& model, const fs::path& weights_dir) {
  const fs::path file = weights_dir / (to_string(model.spec().arch) + ".ctw");
  if (!fs::exists(file)) {
    throw LoadError("pretrained weights for " + to_string(model.spec().arch) +
					" not found at " + file.string() +
                    "; provide the weights file or run with init=scratch");
  }
  const nn::TensorFile tf = nn::read_tensor_file(file);
  if (tf.meta.contains("arch") && tf.meta["arch"] != to_string(model.spec().arch)) {
    throw LoadError("weights file " + file.string() + " is for arch " +
                    tf.meta["arch"].get<std::string>() + ", expected " +
                    to_string(model.spec().arch));
  }
  const std::string head = model.head_prefix();
  auto is_head = [&head](const std::string& name) { return name.rfind(head, 0) == 0; };
  for (auto& p : model.store().params()) {
    if (is_head(p.name)) continue;  // the replaced K-way head keeps its fresh init
    const nn::Tensor* t = tf.find(p.name);
    if (!t) throw LoadError("weights file misses backbone tensor: " + p.name);
    if (t->shape != p.var->value.shape)
      throw LoadError("weights shape mismatch for " + p.name + ": file " + t->shape_str() +
                      " vs model " + p.var->value.shape_str());
    p.var->value = *t;
  }
  for (auto& [name, buf] : model.store().buffers()) {
    if (is_head(name)) continue;
    const nn::Tensor* t = tf.find(name);
    if (!t) throw LoadError("weights file misses backbone buffer: " + name);
    *buf = *t;
  }
}

}  // namespace

std::unique_ptr<Model> build_model(const ModelSpec& spec, uint64_t seed,
                                   const std::optional<fs::path>& weights_dir) {
  if (spec.num_classes != kNumClasses)
    throw ArgumentError("model head must have K=4 classes");
  if (spec.input_side <= 0) throw ArgumentError("input side must be positive");
  auto model = build_scratch(spec, seed);
  if (spec.init == WeightInit::pretrained) {
    fs::path dir;
    if (weights_dir) {
      dir = *weights_dir;
    } else if (const char* env = std::getenv("CTGRADER_PRETRAINED_DIR")) {
      dir = env;
    } else {
      throw LoadError(
          "pretrained init requested but no weights directory configured "
          "(set CTGRADER_PRETRAINED_DIR); run with init=scratch for offline use");
    }
    load_pretrained_backbone(*model, dir);
  }
  return model;
}

void apply_freeze_policy(Model& model, FineTuneExtent extent) {
  const std::string head = model.head_prefix();
  for (auto& p : model.store().params()) {
    const bool is_head = p.name.rfind(head, 0) == 0;
    p.var->requires_grad = extent == FineTuneExtent::all_layers || is_head;
  }
}

uint64_t param_checksum(const Model& model, bool include_head) {
  const std::string head = model.head_prefix();
  uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : model.store().params()) {
    if (!include_head && p.name.rfind(head, 0) == 0) continue;
    mix(p.name.data(), p.name.size());
    mix(p.var->value.data.data(), p.var->value.data.size() * sizeof(float));
  }
  return h;
}

nn::TensorFile snapshot_weights(const Model& model) {
  nn::TensorFile tf;
  tf.meta["arch"] = to_string(model.spec().arch);
  tf.meta["model_spec"] = to_json(model.spec());
  for (const auto& p : model.store().params()) tf.tensors.emplace_back(p.name, p.var->value);
  for (const auto& [name, buf] : model.store().buffers()) tf.tensors.emplace_back(name, *buf);
  return tf;
}

void restore_weights(Model& model, const nn::TensorFile& file) {
  for (auto& p : model.store().params()) {
    const nn::Tensor* t = file.find(p.name);
    if (!t) throw LoadError("checkpoint misses tensor: " + p.name);
    if (t->shape != p.var->value.shape)
      throw LoadError("checkpoint shape mismatch for " + p.name + ": file " + t->shape_str() +
                      " vs model " + p.var->value.shape_str());
    p.var->value = *t;
  }
  for (auto& [name, buf] : model.store().buffers()) {
    const nn::Tensor* t = file.find(name);
    if (!t) throw LoadError("checkpoint misses buffer: " + name);
    *buf = *t;
  }
}

}  // namespace ctg
