#pragma once

#include <string>

namespace hedl {

/// Deterministic CSV number formatting ("%.10g"): reports must be
/// byte-identical across runs, so all emitters share one formatter.
std::string fmt_double(double v);

}  // namespace hedl
