#pragma once

#include <cstddef>
#include <string>

namespace ipcs {

enum class ClickSource { Human, Simulator };

inline const char* to_string(ClickSource s) { return s == ClickSource::Human ? "human" : "simulator"; }

/// One corrective click: the user asserts that point `point_index` belongs to
/// class `corrected_label`.
struct InteractionRecord {
  std::size_t point_index = 0;
  int corrected_label = 0;
  int round = 0;
  ClickSource source = ClickSource::Human;

  bool operator==(const InteractionRecord&) const = default;
};

}  // namespace ipcs
