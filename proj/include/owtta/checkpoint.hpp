#pragma once

// Binary model checkpoint.
//
// Layout, all integers and floats little-endian:
//   bytes 0..7   magic "OWTTA001"
//   6 x u64      layers, dim, heads, patches, classes, seed
//   5 groups in fixed order: backbone, norm, aan, psi, ladder
//     u64 count, then count x f64 (group parameters flattened in group
//     order, each matrix in column-major storage order)

#include "owtta/backbone.hpp"

#include <string>

namespace owtta {

void save_state(const std::string& path, ModelState& state);

/// Rebuilds the state from the stored config, then overwrites every
/// parameter value. Throws on bad magic, truncation or count mismatch.
ModelState load_state(const std::string& path);

}  // namespace owtta
