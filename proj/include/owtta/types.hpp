#pragma once

#include "owtta/autodiff.hpp"

namespace owtta {

using Scalar = double;
using Mat = ad::Mat<Scalar>;
using Var = ad::VarT<Scalar>;
using Tape = ad::TapeT<Scalar>;
using Parameter = ad::ParameterT<Scalar>;

}  // namespace owtta
