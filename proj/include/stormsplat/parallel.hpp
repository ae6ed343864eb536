#pragma once

namespace stormsplat {

/// Caps the number of data-parallel workers used by the renderer, metrics and
/// flow solvers. Results never depend on this value: every parallel loop writes
/// disjoint outputs and reductions run in a fixed order.
void set_thread_count(int threads);
int thread_count();

/// Resolves the worker count from an explicit request (> 0), then the
/// STORMSPLAT_THREADS environment variable, then the number of cores.
int resolve_thread_count(int requested);

}  // namespace stormsplat
