// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "json.hpp"

namespace congater {

/// Static SVG line chart of a serialized SweepReport: metric curves over the
/// first swept attribute's ω, with every other attribute held at 0.
std::string render_sweep_svg(const nlohmann::json& report, const std::string& title = "");

}  // namespace congater
