#pragma once

#include <atomic>
#include <cstdint>

namespace pfeed::instrumentation {

/// Process-wide counters. Feed refresh asserts that it moves neither.
std::atomic<std::uint64_t>& encoder_forward_calls();
std::atomic<std::uint64_t>& index_searches();

struct Snapshot {
  std::uint64_t encoder_forward_calls = 0;
  std::uint64_t index_searches = 0;
};

Snapshot snapshot();

}  // namespace pfeed::instrumentation
