#include "hedl/report.hpp"

#include <cstdio>

namespace hedl {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace hedl
