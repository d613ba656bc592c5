#pragma once

#include <string>
#include <vector>

#include "crab/tensor.hpp"

namespace crab {

// One padded mini-batch. Masks are right-padded prefixes of ones and every
// row has at least one valid position.
struct Batch {
  Tensor speech;       // [B, F_max, D_s]
  Tensor speech_mask;  // [B, F_max]
  Tensor text;         // [B, L_max, D_t]
  Tensor text_mask;    // [B, L_max]
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return labels.size(); }
};

}  // namespace crab
