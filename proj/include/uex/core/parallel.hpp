#pragma once

namespace uex {

/// Deterministic mode pins math kernels to one thread.
void set_deterministic(bool on);
bool deterministic();
int max_threads();

}  // namespace uex
