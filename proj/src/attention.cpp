#include "flashblock/attention.hpp"

namespace flashblock {

Tensor2D attention_dense(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v, double scale,
                         double score_offset) {
  if (q.cols() != k.cols()) throw ShapeError("attention_dense: query/key width mismatch");
  if (k.rows() != v.rows()) throw ShapeError("attention_dense: key/value row count mismatch");
  if (k.rows() == 0) throw ShapeError("attention_dense: no keys");

  Tensor2D out(q.rows(), v.cols());
  std::vector<double> scores(k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k.rows(); ++j) {
      scores[j] = dot(q.row(i), k.row(j)) * scale + score_offset;
      mx = std::max(mx, scores[j]);
    }
    double z = 0.0;
    auto dst = out.row(i);
    for (std::size_t j = 0; j < k.rows(); ++j) {
      const double w = std::exp(scores[j] - mx);
      z += w;
      auto vj = v.row(j);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += w * vj[c];
    }
    for (auto& x : dst) x /= z;
  }
  return out;
}

}  // namespace flashblock
