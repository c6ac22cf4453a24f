#pragma once

namespace ctrlgen {
struct AttentionMask;
}
