#include "uex/core/parallel.hpp"

#include <omp.h>

namespace uex {

namespace {
bool g_deterministic = false;
int g_default_threads = 0;
}  // namespace

void set_deterministic(bool on) {
  if (g_default_threads == 0) g_default_threads = omp_get_max_threads();
  g_deterministic = on;
  omp_set_num_threads(on ? 1 : g_default_threads);
}

bool deterministic() { return g_deterministic; }

int max_threads() { return omp_get_max_threads(); }

}  // namespace uex
