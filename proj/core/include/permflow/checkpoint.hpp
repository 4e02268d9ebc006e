#pragma once

// Binary model checkpoints.
//
// Layout: the 8 magic bytes "PFLOWCKP", a little-endian uint32 format
// version, a little-endian uint64 header length, a UTF-8 JSON header
// describing masks, layer shapes, activations and value offsets, then every
// weight as a little-endian IEEE-754 binary64 in header order.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>

#include "permflow/flow.hpp"
#include "permflow/selfsup.hpp"

namespace permflow {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  FlowModel flow;
  std::optional<SelfSupHead> head;
};

void write_checkpoint(std::ostream& out, const FlowModel& flow, const SelfSupHead* head = nullptr);
void save_checkpoint(const std::filesystem::path& path, const FlowModel& flow,
                     const SelfSupHead* head = nullptr);
Checkpoint read_checkpoint(std::istream& in, const std::string& source = "<stream>");
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace permflow
