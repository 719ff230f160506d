#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "sate/tensor.hpp"

namespace sate {

// Differentiable operations. Each op computes its forward value eagerly and,
// when a tape is active and some input requires a gradient, records a
// backward rule. Reductions accumulate in double precision; storage is f32.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
Tensor add_rowvec(const Tensor& x, const Tensor& v);  // [N,D] + [D]
Tensor relu(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]·[k,n]
Tensor transpose(const Tensor& x);                // 2-D

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = 1e-5f);

// out[l,:] = table[rows[l],:]
Tensor embed_rows(const Tensor& table, const std::vector<int>& rows);

// Inverted-scaling dropout mask: entries are 0 or 1/(1-rate). Constant
// (never differentiated); multiply with mul().
Tensor dropout_mask(const Shape& shape, float rate, std::mt19937_64& rng);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor slice_rows(const Tensor& x, int start, int count);  // 2-D
Tensor slice_cols(const Tensor& x, int start, int count);  // 2-D
Tensor concat_cols(const std::vector<Tensor>& parts);      // 2-D, equal rows

// out[i] = x.data[flat_idx[i]], any input shape, 1-D output.
Tensor gather(const Tensor& x, std::vector<int> flat_idx);

// Elementwise log(exp(a) + exp(b)); values at or below k_neg_inf stay there
// and receive no gradient.
Tensor logaddexp(const Tensor& a, const Tensor& b);

// out[i] = (allowed[i] && i >= k) ? v[i-k] : fill. 1-D.
Tensor shift_masked(const Tensor& v, int k, const std::vector<uint8_t>& allowed,
                    float fill = k_neg_inf);

Tensor logsumexp(const Tensor& v);  // 1-D -> scalar

// Sum over rows of (1-eps) * NLL(target) + eps * mean NLL over classes.
// targets are 0-based class indices into the last dim of logits [N,C].
Tensor cross_entropy_label_smoothing(const Tensor& logits,
                                     const std::vector<int>& targets, float eps);

// 1-D convolution over time, kernel 3, stride 2, zero padding 1.
// x [T,Cin], w [Cout,Cin,3], b [Cout] -> [ceil(T/2), Cout]
Tensor conv1d_k3s2(const Tensor& x, const Tensor& w, const Tensor& b);

inline int conv_out_len_k3s2(int t) { return (t + 1) / 2; }

}  // namespace sate
