#pragma once

#include <string>

namespace gridner::train {

// Reads only the header and returns the stored float width ("f64"/"f32").
std::string peek_checkpoint_dtype(const std::string& path);

}  // namespace gridner::train
