#include "stormsplat/parallel.hpp"

#include <omp.h>

#include <cstdlib>
#include <string>

namespace stormsplat {

void set_thread_count(int threads) { omp_set_num_threads(threads > 0 ? threads : 1); }

int thread_count() { return omp_get_max_threads(); }

int resolve_thread_count(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("STORMSPLAT_THREADS")) {
    try {
      int value = std::stoi(env);
      if (value > 0) return value;
    } catch (const std::exception&) {
    }
  }
  return omp_get_num_procs();
}

}  // namespace stormsplat
