#include "icafs/data/conditional.hpp"

#include <numeric>

namespace icafs::data {

ConditionalSampler::ConditionalSampler(std::vector<DiscreteBlock> blocks) : blocks_(std::move(blocks)) {
  if (blocks_.empty()) throw DataError("conditional vector needs at least one discrete block");
  for (const auto& b : blocks_) {
    if (b.width < 1 || static_cast<int>(b.frequencies.size()) != b.width) throw DataError("malformed discrete block " + b.name);
    offsets_.push_back(width_);
    width_ += b.width;
  }
}

ConditionalVector ConditionalSampler::fixed(int block, int category) const {
  if (block < 0 || block >= static_cast<int>(blocks_.size())) throw DataError("conditional block out of range");
  if (category < 0 || category >= blocks_[static_cast<std::size_t>(block)].width) throw DataError("conditional category out of range");
  ConditionalVector cv;
  cv.block = block;
  cv.category = category;
  cv.onehot = RowVector::Zero(width_);
  cv.onehot(offsets_[static_cast<std::size_t>(block)] + category) = 1.0;
  return cv;
}

ConditionalVector ConditionalSampler::sample(nn::Rng& rng) const {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(blocks_.size()) - 1);
  const int b = pick(rng);
  const auto& f = blocks_[static_cast<std::size_t>(b)].frequencies;
  std::discrete_distribution<int> cat(f.begin(), f.end());
  return fixed(b, cat(rng));
}

DiscreteBlock label_block(const std::vector<int>& y, int n_classes) {
  if (n_classes < 1 || y.empty()) throw DataError("label block needs labels");
  DiscreteBlock b;
  b.name = "label";
  b.width = n_classes;
  b.frequencies.assign(static_cast<std::size_t>(n_classes), 0.0);
  for (int v : y) b.frequencies.at(static_cast<std::size_t>(v)) += 1.0 / static_cast<double>(y.size());
  return b;
}

ConditionalVector build_conditional_vector(const ConditionalSampler& sampler, nn::Rng& rng, std::optional<int> fixed_label) {
  if (!fixed_label) return sampler.sample(rng);
  for (std::size_t b = 0; b < sampler.blocks().size(); ++b) {
    if (sampler.blocks()[b].column < 0) return sampler.fixed(static_cast<int>(b), *fixed_label);
  }
  throw DataError("fixed label requested but no label block is present");
}

}  // namespace icafs::data
