#pragma once

#include "ctgrader/model_zoo.hpp"

// Internal per-family builders. Each returns a scratch-initialized model whose
// parameters were drawn from `rng` in registration order.
namespace ctg::models {

std::unique_ptr<Model> build_alexnet(const ModelSpec& spec, nn::Rng& rng);
std::unique_ptr<Model> build_vgg16(const ModelSpec& spec, nn::Rng& rng);
std::unique_ptr<Model> build_squeezenet(const ModelSpec& spec, nn::Rng& rng);
std::unique_ptr<Model> build_resnet(const ModelSpec& spec, nn::Rng& rng);  // 152 / wide-101
std::unique_ptr<Model> build_densenet(const ModelSpec& spec, nn::Rng& rng);
std::unique_ptr<Model> build_inception_v3(const ModelSpec& spec, nn::Rng& rng);
std::unique_ptr<Model> build_vit_b32(const ModelSpec& spec, nn::Rng& rng);

}  // namespace ctg::models
