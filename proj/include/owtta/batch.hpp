#pragma once

#include "owtta/types.hpp"

#include <cstdint>
#include <vector>

namespace owtta {

/// One test batch. Labels and OOD flags are ground truth for the evaluator
/// only; the adaptation loop reads nothing but the token grids.
struct Batch {
  std::vector<Mat> tokens;              // N grids, each P x d
  std::vector<int> labels;              // hidden class labels
  std::vector<std::uint8_t> ood_flags;  // hidden; 1 = OOD

  std::size_t size() const { return tokens.size(); }
};

}  // namespace owtta
