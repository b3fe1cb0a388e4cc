#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>

namespace beamtime {

using TrialId = std::int64_t;
using JobId = std::int64_t;

enum class Stage { spotfinding = 0, indexing = 1, refinement = 2, integration = 3 };
inline constexpr std::array<Stage, 4> kStages{Stage::spotfinding, Stage::indexing, Stage::refinement,
                                              Stage::integration};

std::string_view to_string(Stage s);
/// Throws ValidationError.
Stage parse_stage(std::string_view s);
enum class Outcome { success, rejected };
std::string_view to_string(Outcome o);
/// Throws ValidationError.
Outcome parse_outcome(std::string_view s);

inline constexpr std::size_t stage_index(Stage s) { return static_cast<std::size_t>(s); }

}  // namespace beamtime
