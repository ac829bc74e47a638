#include "voxelsr/autodiff/threads.hpp"

#include <cstdlib>
#include <string>

#include <Eigen/Core>

namespace voxelsr {

int configure_threads() {
    if (const char* env = std::getenv("VOXELSR_THREADS")) {
        try {
            const int cap = std::stoi(env);
            if (cap >= 1) Eigen::setNbThreads(cap);
        } catch (const std::exception&) {
            // Unparseable values leave the library default in place.
        }
    }
    return Eigen::nbThreads();
}

}  // namespace voxelsr
