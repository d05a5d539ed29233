#pragma once

#include <cstdint>
#include <string_view>

namespace hedl {

/// FNV-1a over bytes; also used for config hashing in run manifests.
uint64_t fnv1a(std::string_view bytes);

/// Independent sub-stream seed: master seed mixed with a purpose tag, so
/// every consumer (world gen, adapter init, shuffles, ...) draws from its
/// own deterministic stream.
uint64_t sub_seed(uint64_t master, std::string_view tag);

}  // namespace hedl
