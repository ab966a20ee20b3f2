// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "skim/datapipe.hpp"

namespace skim::cli {

/// Every failure line starts with this prefix.
inline constexpr const char* kErrorPrefix = "skim: error: ";
inline constexpr const char* kWarningPrefix = "skim: warning: ";

/// Runs one command. `args` excludes the program name. Returns the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Mask pixels with a 4-neighbour outside the mask or on the image border.
Mask contour(const Mask& mask);

/// Predicted pixels blended 50% towards red, then the ground-truth contour
/// drawn in green.
Image render_overlay(const Image& image, const Mask& prediction, const Mask& truth);

}  // namespace skim::cli
