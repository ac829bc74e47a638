#pragma once

namespace voxelsr {

// Applies the VOXELSR_THREADS cap (when set) to the matrix-product thread pool and
// returns the thread count in effect.
int configure_threads();

}  // namespace voxelsr
