#pragma once

#include "xbridge/tensor.hpp"

namespace xbridge {

// The conditioning pair the generator consumes: a token sequence plus a
// pooled vector. Teacher encoders and AlignNet both produce this layout,
// so a trained alignment output can replace the teacher output verbatim.
struct Condition {
  Tensor seq;     // [b, s, d_c]
  Tensor pooled;  // [b, d_p]
};

using TeacherCondition = Condition;
using AlignedCondition = Condition;

}  // namespace xbridge
