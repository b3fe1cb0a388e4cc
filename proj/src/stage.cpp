#include "beamtime/stage.hpp"

#include <string>

#include "beamtime/errors.hpp"

namespace beamtime {

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::spotfinding: return "spotfinding";
    case Stage::indexing: return "indexing";
    case Stage::refinement: return "refinement";
    case Stage::integration: return "integration";
  }
  return "unknown";
}

Stage parse_stage(std::string_view s) {
  for (auto st : kStages)
    if (to_string(st) == s) return st;
  throw ValidationError("unknown stage '" + std::string(s) + "'");
}

std::string_view to_string(Outcome o) { return o == Outcome::success ? "success" : "rejected"; }

Outcome parse_outcome(std::string_view s) {
  if (s == "success") return Outcome::success;
  if (s == "rejected") return Outcome::rejected;
  throw ValidationError("unknown outcome '" + std::string(s) + "'");
}

}  // namespace beamtime
