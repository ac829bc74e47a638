#pragma once

#include <cstdint>

#include <Eigen/Core>

namespace voxelsr::ad::detail {

// Row-major C = alpha * op(A) * op(B) + beta * C, with leading dimensions.
template <typename T>
void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, double alpha, const T* a,
          std::int64_t lda, const T* b, std::int64_t ldb, double beta, T* c, std::int64_t ldc) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Stride = Eigen::OuterStride<>;
    using ConstMap = Eigen::Map<const Mat, 0, Stride>;
    Eigen::Map<Mat, 0, Stride> cm(c, m, n, Stride(ldc));
    const ConstMap am(a, ta ? k : m, ta ? m : k, Stride(lda));
    const ConstMap bm(b, tb ? n : k, tb ? k : n, Stride(ldb));
    const T al = static_cast<T>(alpha);
    if (beta == 0.0) {
        cm.setZero();
    } else if (beta != 1.0) {
        cm *= static_cast<T>(beta);
    }
    if (ta && tb) {
        cm.noalias() += al * am.transpose() * bm.transpose();
    } else if (ta) {
        cm.noalias() += al * am.transpose() * bm;
    } else if (tb) {
        cm.noalias() += al * am * bm.transpose();
    } else {
        cm.noalias() += al * am * bm;
    }
}

}  // namespace voxelsr::ad::detail
