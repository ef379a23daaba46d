#pragma once

#include <optional>
#include <vector>

#include "icafs/data/normalizer.hpp"
#include "icafs/nn/random.hpp"

namespace icafs::data {

struct ConditionalVector {
  int block = 0;
  int category = 0;
  RowVector onehot;
};

/// Picks a block uniformly, then a category by its training frequency.
class ConditionalSampler {
 public:
  explicit ConditionalSampler(std::vector<DiscreteBlock> blocks);

  int width() const { return width_; }
  const std::vector<DiscreteBlock>& blocks() const { return blocks_; }
  ConditionalVector sample(nn::Rng& rng) const;
  ConditionalVector fixed(int block, int category) const;

 private:
  std::vector<DiscreteBlock> blocks_;
  std::vector<int> offsets_;
  int width_ = 0;
};

/// Label block with empirical class frequencies.
DiscreteBlock label_block(const std::vector<int>& y, int n_classes);

/**
 * Sample a conditional vector; with a fixed label the label block (which must
 * exist) is selected with that category.
 */
ConditionalVector build_conditional_vector(const ConditionalSampler& sampler, nn::Rng& rng,
                                           std::optional<int> fixed_label = std::nullopt);

}  // namespace icafs::data
