#include "pfeed/instrumentation.hpp"

namespace pfeed::instrumentation {

std::atomic<std::uint64_t>& encoder_forward_calls() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

std::atomic<std::uint64_t>& index_searches() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

Snapshot snapshot() { return {encoder_forward_calls().load(), index_searches().load()}; }

}  // namespace pfeed::instrumentation
