#pragma once

#include <cstdint>
#include <vector>

namespace diet {

using ItemId = std::int32_t;
using UserId = std::int32_t;

/// Item ids of one user, oldest first.
using Sequence = std::vector<ItemId>;

}  // namespace diet
