#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "upt/tensor.hpp"

namespace upt {

enum class LossKind { sdm, itc, sdm_plus_itc };

inline std::string_view loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::sdm: return "sdm";
    case LossKind::itc: return "itc";
    case LossKind::sdm_plus_itc: return "sdm_plus_itc";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view name) {
  for (LossKind k : {LossKind::sdm, LossKind::itc, LossKind::sdm_plus_itc})
    if (loss_kind_name(k) == name) return k;
  throw ConfigError("unknown loss kind '" + std::string(name) + "'");
}

struct LossConfig {
  double tau = 0.02;
  double epsilon = 1e-8;
  LossKind kind = LossKind::sdm;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("temperature tau must be positive");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  }
};

// y[i][j] = 1 when image i and text j share an identity.
inline Tensor identity_labels(const std::vector<int>& image_ids, const std::vector<int>& text_ids) {
  Tensor y(image_ids.size(), text_ids.size());
  for (std::size_t i = 0; i < image_ids.size(); ++i)
    for (std::size_t j = 0; j < text_ids.size(); ++j) y(i, j) = image_ids[i] == text_ids[j] ? 1.0 : 0.0;
  return y;
}

// p[i][j] = softmax_j(S[i][j] / tau).
inline Tensor match_probabilities(const Tensor& similarity, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature tau must be positive");
  Tensor logits = similarity;
  logits *= 1.0 / tau;
  return softmax_rows(logits);
}

// q[i][j] = y[i][j] / sum_k y[i][k].
inline Tensor true_distribution(const Tensor& labels) {
  Tensor q = labels;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    double total = 0.0;
    for (double v : q.row(i)) total += v;
    if (total <= 0.0) throw LabelError("label row " + std::to_string(i) + " has no match");
    for (double& v : q.row(i)) v /= total;
  }
  return q;
}

struct LossGrad {
  double loss = 0.0;
  Tensor grad;  // dL/dS
};

// Row-averaged KL(p_i || q_i + eps) with its gradient with respect to the
// similarities S that produced p = softmax(S / tau):
//   dL/dS[i][k] = p[i][k] (c[i][k] - L_i) / (N tau),  c = log p - log(q + eps).
inline LossGrad sdm_loss(const Tensor& p, const Tensor& q, double epsilon, double tau) {
  if (p.shape() != q.shape()) {
    throw ShapeError("sdm_loss p " + shape_str(p.shape()) + " vs q " + shape_str(q.shape()));
  }
  const std::size_t n = p.rows(), m = p.cols();
  LossGrad out{0.0, Tensor(n, m)};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    double row_loss = 0.0;
    std::vector<double> c(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      if (p(i, j) == 0.0) continue;
      c[j] = std::log(p(i, j)) - std::log(q(i, j) + epsilon);
      row_loss += p(i, j) * c[j];
    }
    out.loss += row_loss * inv_n;
    for (std::size_t j = 0; j < m; ++j)
      out.grad(i, j) = p(i, j) * (c[j] - row_loss) * inv_n / tau;
  }
  return out;
}

// One direction of SDM straight from similarities and labels.
inline LossGrad sdm_direction(const Tensor& similarity, const Tensor& labels, const LossConfig& cfg) {
  return sdm_loss(match_probabilities(similarity, cfg.tau), true_distribution(labels), cfg.epsilon,
                  cfg.tau);
}

struct BidirectionalLoss {
  double loss = 0.0;
  double image_to_text = 0.0;
  double text_to_image = 0.0;
  Tensor grad;  // dL/dS, S with image rows and text columns
};

// L = L_i2t(S, y) + L_t2i(Sᵀ, yᵀ), both weighted 1.
inline BidirectionalLoss bidirectional_sdm_similarity(const Tensor& similarity, const Tensor& labels,
                                                      const LossConfig& cfg) {
  LossGrad i2t = sdm_direction(similarity, labels, cfg);
  LossGrad t2i = sdm_direction(transpose(similarity), transpose(labels), cfg);
  Tensor grad = i2t.grad;
  grad += transpose(t2i.grad);
  return {i2t.loss + t2i.loss, i2t.loss, t2i.loss, std::move(grad)};
}

// Symmetric InfoNCE with the diagonal as the only positive:
//   L = mean_i -log softmax_j(S/tau)[i][i] + mean_j -log softmax_i(S/tau)[i][j].
inline BidirectionalLoss itc_similarity(const Tensor& similarity, double tau) {
  const std::size_t n = similarity.rows();
  if (similarity.cols() != n) throw ShapeError("ITC needs a square similarity matrix");
  BidirectionalLoss out{0.0, 0.0, 0.0, Tensor(n, n)};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (int direction = 0; direction < 2; ++direction) {
    const Tensor s = direction == 0 ? similarity : transpose(similarity);
    const Tensor p = match_probabilities(s, tau);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (double v : s.row(i)) mx = std::max(mx, v / tau);
      double lse = 0.0;
      for (double v : s.row(i)) lse += std::exp(v / tau - mx);
      total += (mx + std::log(lse) - s(i, i) / tau) * inv_n;
      for (std::size_t j = 0; j < n; ++j) {
        const double g = (p(i, j) - (i == j ? 1.0 : 0.0)) * inv_n / tau;
        if (direction == 0) out.grad(i, j) += g; else out.grad(j, i) += g;
      }
    }
    (direction == 0 ? out.image_to_text : out.text_to_image) = total;
  }
  out.loss = out.image_to_text + out.text_to_image;
  return out;
}

// Row-averaged KL(q_i || p_i) with 0 log 0 = 0. For one-hot q this is the
// cross-entropy -log p[i][target], i.e. one direction of ITC.
inline double reverse_kl_rows(const Tensor& q, const Tensor& p) {
  double total = 0.0;
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < q.cols(); ++j)
      if (q(i, j) > 0.0) total += q(i, j) * (std::log(q(i, j)) - std::log(p(i, j)));
  return total / static_cast<double>(q.rows());
}

// ---------------------------------------------------------------------------
// Losses on embedding matrices (rows are unit-norm embeddings).

struct EmbeddingLoss {
  double loss = 0.0;
  double image_to_text = 0.0;
  double text_to_image = 0.0;
  Tensor d_image;
  Tensor d_text;
};

inline void require_unit_rows(const Tensor& f, const char* what) {
  for (std::size_t i = 0; i < f.rows(); ++i) {
    double sq = 0.0;
    for (double v : f.row(i)) sq += v * v;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
      throw ContractError(std::string(what) + " embedding row " + std::to_string(i) +
                          " is not unit norm");
    }
  }
}

inline EmbeddingLoss embedding_loss(const Tensor& image, const Tensor& text, const Tensor& labels,
                                    const LossConfig& cfg) {
  cfg.validate();
  require_unit_rows(image, "image");
  require_unit_rows(text, "text");
  const Tensor similarity = matmul_nt(image, text);
  BidirectionalLoss total{0.0, 0.0, 0.0, Tensor(similarity.rows(), similarity.cols())};
  auto add = [&](const BidirectionalLoss& part) {
    total.loss += part.loss;
    total.image_to_text += part.image_to_text;
    total.text_to_image += part.text_to_image;
    total.grad += part.grad;
  };
  if (cfg.kind == LossKind::sdm || cfg.kind == LossKind::sdm_plus_itc)
    add(bidirectional_sdm_similarity(similarity, labels, cfg));
  if (cfg.kind == LossKind::itc || cfg.kind == LossKind::sdm_plus_itc)
    add(itc_similarity(similarity, cfg.tau));
  return {total.loss, total.image_to_text, total.text_to_image, matmul(total.grad, text),
          matmul_tn(total.grad, image)};
}

inline EmbeddingLoss bidirectional_sdm(const Tensor& image, const Tensor& text, const Tensor& labels,
                                       const LossConfig& cfg) {
  LossConfig c = cfg;
  c.kind = LossKind::sdm;
  return embedding_loss(image, text, labels, c);
}

inline EmbeddingLoss itc_loss(const Tensor& image, const Tensor& text, double tau) {
  LossConfig c;
  c.tau = tau;
  c.kind = LossKind::itc;
  return embedding_loss(image, text, Tensor::identity(image.rows()), c);
}

}  // namespace upt
