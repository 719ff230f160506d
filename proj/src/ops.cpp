#include "sate/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace sate {

namespace {

constexpr float k_dead = k_neg_inf * 0.5f;  // below this, treat as log(0)

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

// nullptr when no gradient flowed into out (detached subgraph).
const float* upstream(const Tensor& out) {
  return out.has_grad() ? out.grad().data() : nullptr;
}

bool recording(const Tensor& a) { return Tape::active() && a.requires_grad(); }
bool recording(const Tensor& a, const Tensor& b) {
  return Tape::active() && (a.requires_grad() || b.requires_grad());
}
bool recording(const Tensor& a, const Tensor& b, const Tensor& c) {
  return Tape::active() && (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

void finish(Tensor& out, const char* name) { debug_check(out, name); }

struct AxisSpan {
  int64_t outer, n, inner;
};

AxisSpan axis_span(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw ShapeError("axis out of range for shape " + shape_str(shape));
  AxisSpan s{1, shape[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
    s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
  if (recording(a, b)) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    Tape::active()->record({a, b}, out, [ta, tb, to]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      if (ta.requires_grad()) {
        float* da = ta.grad_data();
        for (int64_t i = 0; i < ta.size(); ++i) da[i] += g[i];
      }
      if (tb.requires_grad()) {
        float* db = tb.grad_data();
        for (int64_t i = 0; i < tb.size(); ++i) db[i] += g[i];
      }
    });
  }
  finish(out, "add");
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] - pb[i];
  if (recording(a, b)) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    Tape::active()->record({a, b}, out, [ta, tb, to]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      if (ta.requires_grad()) {
        float* da = ta.grad_data();
        for (int64_t i = 0; i < ta.size(); ++i) da[i] += g[i];
      }
      if (tb.requires_grad()) {
        float* db = tb.grad_data();
        for (int64_t i = 0; i < tb.size(); ++i) db[i] -= g[i];
      }
    });
  }
  finish(out, "sub");
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
  if (recording(a, b)) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    Tape::active()->record({a, b}, out, [ta, tb, to]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      if (ta.requires_grad()) {
        float* da = ta.grad_data();
        const float* pb2 = tb.data();
        for (int64_t i = 0; i < ta.size(); ++i) da[i] += g[i] * pb2[i];
      }
      if (tb.requires_grad()) {
        float* db = tb.grad_data();
        const float* pa2 = ta.data();
        for (int64_t i = 0; i < tb.size(); ++i) db[i] += g[i] * pa2[i];
      }
    });
  }
  finish(out, "mul");
  return out;
}

Tensor scale(const Tensor& a, float c) {
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] * c;
  if (recording(a)) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record({a}, out, [ta, to, c]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      float* da = ta.grad_data();
      for (int64_t i = 0; i < ta.size(); ++i) da[i] += g[i] * c;
    });
  }
  finish(out, "scale");
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || x.dim(1) != v.dim(0))
    throw ShapeError("add_rowvec: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
  const int n = x.dim(0), d = x.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  const float* pv = v.data();
  float* po = out.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) po[i * d + j] = px[i * d + j] + pv[j];
  if (recording(x, v)) {
    out.set_requires_grad(true);
    Tensor tx = x, tv = v, to = out;
    Tape::active()->record({x, v}, out, [tx, tv, to, n, d]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      if (tx.requires_grad()) {
        float* dx = tx.grad_data();
        for (int64_t i = 0; i < tx.size(); ++i) dx[i] += g[i];
      }
      if (tv.requires_grad()) {
        float* dv = tv.grad_data();
        for (int j = 0; j < d; ++j) {
          double acc = 0.0;
          for (int i = 0; i < n; ++i) acc += g[i * d + j];
          dv[j] += static_cast<float>(acc);
        }
      }
    });
  }
  finish(out, "add_rowvec");
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.size(); ++i) po[i] = px[i] > 0.0f ? px[i] : 0.0f;
  if (recording(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record({x}, out, [tx, to]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      float* dx = tx.grad_data();
      const float* px2 = tx.data();
      for (int64_t i = 0; i < tx.size(); ++i)
        if (px2[i] > 0.0f) dx[i] += g[i];
    });
  }
  finish(out, "relu");
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  std::vector<double> acc(static_cast<size_t>(n));
  for (int i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* arow = pa + static_cast<int64_t>(i) * k;
    for (int q = 0; q < k; ++q) {
      const double av = arow[q];
      const float* brow = pb + static_cast<int64_t>(q) * n;
      for (int j = 0; j < n; ++j) acc[static_cast<size_t>(j)] += av * brow[j];
    }
    float* orow = po + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) orow[j] = static_cast<float>(acc[static_cast<size_t>(j)]);
  }
  if (recording(a, b)) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    Tape::active()->record({a, b}, out, [ta, tb, to, m, k, n]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      if (ta.requires_grad()) {
        // dA = G · B^T
        float* da = ta.grad_data();
        const float* pb2 = tb.data();
        for (int i = 0; i < m; ++i) {
          const float* grow = g + static_cast<int64_t>(i) * n;
          for (int q = 0; q < k; ++q) {
            const float* brow = pb2 + static_cast<int64_t>(q) * n;
            double acc2 = 0.0;
            for (int j = 0; j < n; ++j) acc2 += static_cast<double>(grow[j]) * brow[j];
            da[static_cast<int64_t>(i) * k + q] += static_cast<float>(acc2);
          }
        }
      }
      if (tb.requires_grad()) {
        // dB = A^T · G
        std::vector<double> buf(static_cast<size_t>(k) * n, 0.0);
        const float* pa2 = ta.data();
        for (int i = 0; i < m; ++i) {
          const float* arow = pa2 + static_cast<int64_t>(i) * k;
          const float* grow = g + static_cast<int64_t>(i) * n;
          for (int q = 0; q < k; ++q) {
            const double av = arow[q];
            double* brow = buf.data() + static_cast<int64_t>(q) * n;
            for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
        }
        float* db = tb.grad_data();
        for (size_t i = 0; i < buf.size(); ++i) db[i] += static_cast<float>(buf[i]);
      }
    });
  }
  finish(out, "matmul");
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose: needs 2-D, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros({n, m});
  const float* px = x.data();
  float* po = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[static_cast<int64_t>(j) * m + i] = px[static_cast<int64_t>(i) * n + j];
  if (recording(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record({x}, out, [tx, to, m, n]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      float* dx = tx.grad_data();
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i)
          dx[static_cast<int64_t>(i) * n + j] += g[static_cast<int64_t>(j) * m + i];
    });
  }
  finish(out, "transpose");
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  AxisSpan s = axis_span(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t in = 0; in < s.inner; ++in) {
      const int64_t base = o * s.n * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t i = 0; i < s.n; ++i) mx = std::max(mx, static_cast<double>(px[base + i * s.inner]));
      double z = 0.0;
      for (int64_t i = 0; i < s.n; ++i) z += std::exp(static_cast<double>(px[base + i * s.inner]) - mx);
      for (int64_t i = 0; i < s.n; ++i)
        po[base + i * s.inner] =
            static_cast<float>(std::exp(static_cast<double>(px[base + i * s.inner]) - mx) / z);
    }
  }
  if (recording(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record({x}, out, [tx, to, s]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      float* dx = tx.grad_data();
      const float* y = to.data();
      for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t in = 0; in < s.inner; ++in) {
          const int64_t base = o * s.n * s.inner + in;
          double dot = 0.0;
          for (int64_t i = 0; i < s.n; ++i) {
            const int64_t p = base + i * s.inner;
            dot += static_cast<double>(g[p]) * y[p];
          }
          for (int64_t i = 0; i < s.n; ++i) {
            const int64_t p = base + i * s.inner;
            dx[p] += static_cast<float>((static_cast<double>(g[p]) - dot) * y[p]);
          }
        }
      }
    });
  }
  finish(out, "softmax");
  return out;
}

Tensor log_softmax(const Tensor& x, int axis) {
  AxisSpan s = axis_span(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t in = 0; in < s.inner; ++in) {
      const int64_t base = o * s.n * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t i = 0; i < s.n; ++i) mx = std::max(mx, static_cast<double>(px[base + i * s.inner]));
      double z = 0.0;
      for (int64_t i = 0; i < s.n; ++i) z += std::exp(static_cast<double>(px[base + i * s.inner]) - mx);
      const double lz = mx + std::log(z);
      for (int64_t i = 0; i < s.n; ++i)
        po[base + i * s.inner] = static_cast<float>(static_cast<double>(px[base + i * s.inner]) - lz);
    }
  }
  if (recording(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record({x}, out, [tx, to, s]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      float* dx = tx.grad_data();
      const float* y = to.data();
      for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t in = 0; in < s.inner; ++in) {
          const int64_t base = o * s.n * s.inner + in;
          double gsum = 0.0;
          for (int64_t i = 0; i < s.n; ++i) gsum += g[base + i * s.inner];
          for (int64_t i = 0; i < s.n; ++i) {
            const int64_t p = base + i * s.inner;
            dx[p] += static_cast<float>(g[p] - std::exp(static_cast<double>(y[p])) * gsum);
          }
        }
      }
    });
  }
  finish(out, "log_softmax");
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
  const int d = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  const int64_t rows = x.size() / d;
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  const float* pg = gain.data();
  const float* pb = bias.data();
  float* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = px + r * d;
    float* orow = po + r * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j)
      orow[j] = static_cast<float>((xr[j] - mu) * inv * pg[j] + pb[j]);
  }
  if (recording(x, gain, bias)) {
    out.set_requires_grad(true);
    Tensor tx = x, tg = gain, tb = bias, to = out;
    const double deps = eps;
    Tape::active()->record({x, gain, bias}, out, [tx, tg, tb, to, rows, d, deps]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      const float* px2 = tx.data();
      const float* pg2 = tg.data();
      std::vector<double> dgain(static_cast<size_t>(d), 0.0), dbias(static_cast<size_t>(d), 0.0);
      float* dx = tx.requires_grad() ? tx.grad_data() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const float* xr = px2 + r * d;
        const float* gr = g + r * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xr[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
          const double c = xr[j] - mu;
          var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + deps);
        double mean_gh = 0.0, mean_ghx = 0.0;
        for (int j = 0; j < d; ++j) {
          const double xh = (xr[j] - mu) * inv;
          const double gh = static_cast<double>(gr[j]) * pg2[j];
          dgain[static_cast<size_t>(j)] += static_cast<double>(gr[j]) * xh;
          dbias[static_cast<size_t>(j)] += gr[j];
          mean_gh += gh;
          mean_ghx += gh * xh;
        }
        mean_gh /= d;
        mean_ghx /= d;
        if (dx) {
          float* dxr = dx + r * d;
          for (int j = 0; j < d; ++j) {
            const double xh = (xr[j] - mu) * inv;
            const double gh = static_cast<double>(gr[j]) * pg2[j];
            dxr[j] += static_cast<float>(inv * (gh - mean_gh - xh * mean_ghx));
          }
        }
      }
      if (tg.requires_grad()) {
        float* dg = tg.grad_data();
        for (int j = 0; j < d; ++j) dg[j] += static_cast<float>(dgain[static_cast<size_t>(j)]);
      }
      if (tb.requires_grad()) {
        float* db = tb.grad_data();
        for (int j = 0; j < d; ++j) db[j] += static_cast<float>(dbias[static_cast<size_t>(j)]);
      }
    });
  }
  finish(out, "layer_norm");
  return out;
}

Tensor embed_rows(const Tensor& table, const std::vector<int>& rows) {
  if (table.rank() != 2) throw ShapeError("embed_rows: table must be 2-D");
  const int r = table.dim(0), d = table.dim(1);
  for (int id : rows)
    if (id < 0 || id >= r)
      throw IndexError("embed_rows: row " + std::to_string(id) + " outside [0," +
                       std::to_string(r) + ")");
  const int l = static_cast<int>(rows.size());
  Tensor out = Tensor::zeros({l, d});
  const float* pt = table.data();
  float* po = out.data();
  for (int i = 0; i < l; ++i)
    std::memcpy(po + static_cast<int64_t>(i) * d, pt + static_cast<int64_t>(rows[static_cast<size_t>(i)]) * d,
                sizeof(float) * static_cast<size_t>(d));
  if (recording(table)) {
    out.set_requires_grad(true);
    Tensor tt = table, to = out;
    std::vector<int> idx = rows;
    Tape::active()->record({table}, out, [tt, to, idx, d]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      float* dt = tt.grad_data();
      for (size_t i = 0; i < idx.size(); ++i) {
        float* drow = dt + static_cast<int64_t>(idx[i]) * d;
        const float* grow = g + static_cast<int64_t>(i) * d;
        for (int j = 0; j < d; ++j) drow[j] += grow[j];
      }
    });
  }
  finish(out, "embed_rows");
  return out;
}

Tensor dropout_mask(const Shape& shape, float rate, std::mt19937_64& rng) {
  if (rate < 0.0f || rate >= 1.0f) throw ContractError("dropout rate must be in [0,1)");
  Tensor mask = Tensor::zeros(shape);
  const float keep = 1.0f - rate;
  const float inv = 1.0f / keep;
  float* pm = mask.data();
  for (int64_t i = 0; i < mask.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    pm[i] = u < keep ? inv : 0.0f;
  }
  return mask;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  const float* px = x.data();
  for (int64_t i = 0; i < x.size(); ++i) acc += px[i];
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (recording(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record({x}, out, [tx, to]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      float* dx = tx.grad_data();
      for (int64_t i = 0; i < tx.size(); ++i) dx[i] += g[0];
    });
  }
  finish(out, "sum");
  return out;
}

Tensor mean(const Tensor& x) {
  const int64_t n = x.size();
  double acc = 0.0;
  const float* px = x.data();
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
  if (recording(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record({x}, out, [tx, to, n]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      float* dx = tx.grad_data();
      const float s = g[0] / static_cast<float>(n);
      for (int64_t i = 0; i < n; ++i) dx[i] += s;
    });
  }
  finish(out, "mean");
  return out;
}

Tensor slice_rows(const Tensor& x, int start, int count) {
  if (x.rank() != 2) throw ShapeError("slice_rows: needs 2-D");
  if (start < 0 || count <= 0 || start + count > x.dim(0))
    throw ShapeError("slice_rows: range out of bounds");
  const int d = x.dim(1);
  Tensor out = Tensor::zeros({count, d});
  std::memcpy(out.data(), x.data() + static_cast<int64_t>(start) * d,
              sizeof(float) * static_cast<size_t>(count) * static_cast<size_t>(d));
  if (recording(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record({x}, out, [tx, to, start, count, d]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      float* dx = tx.grad_data();
      for (int64_t i = 0; i < static_cast<int64_t>(count) * d; ++i)
        dx[static_cast<int64_t>(start) * d + i] += g[i];
    });
  }
  finish(out, "slice_rows");
  return out;
}

Tensor slice_cols(const Tensor& x, int start, int count) {
  if (x.rank() != 2) throw ShapeError("slice_cols: needs 2-D");
  if (start < 0 || count <= 0 || start + count > x.dim(1))
    throw ShapeError("slice_cols: range out of bounds");
  const int n = x.dim(0), d = x.dim(1);
  Tensor out = Tensor::zeros({n, count});
  const float* px = x.data();
  float* po = out.data();
  for (int i = 0; i < n; ++i)
    std::memcpy(po + static_cast<int64_t>(i) * count, px + static_cast<int64_t>(i) * d + start,
                sizeof(float) * static_cast<size_t>(count));
  if (recording(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record({x}, out, [tx, to, start, count, n, d]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      float* dx = tx.grad_data();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < count; ++j)
          dx[static_cast<int64_t>(i) * d + start + j] += g[static_cast<int64_t>(i) * count + j];
    });
  }
  finish(out, "slice_cols");
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const int n = parts[0].dim(0);
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != n) throw ShapeError("concat_cols: row mismatch");
    total += p.dim(1);
  }
  Tensor out = Tensor::zeros({n, total});
  float* po = out.data();
  int off = 0;
  for (const Tensor& p : parts) {
    const int d = p.dim(1);
    const float* pp = p.data();
    for (int i = 0; i < n; ++i)
      std::memcpy(po + static_cast<int64_t>(i) * total + off, pp + static_cast<int64_t>(i) * d,
                  sizeof(float) * static_cast<size_t>(d));
    off += d;
  }
  bool rec = false;
  if (Tape::active())
    for (const Tensor& p : parts) rec = rec || p.requires_grad();
  if (rec) {
    out.set_requires_grad(true);
    std::vector<Tensor> ps = parts;
    Tensor to = out;
    Tape::active()->record(parts, out, [ps, to, n, total]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      int off2 = 0;
      for (Tensor& p : ps) {
        const int d = p.dim(1);
        if (p.requires_grad()) {
          float* dp = p.grad_data();
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
              dp[static_cast<int64_t>(i) * d + j] += g[static_cast<int64_t>(i) * total + off2 + j];
        }
        off2 += d;
      }
    });
  }
  finish(out, "concat_cols");
  return out;
}

Tensor gather(const Tensor& x, std::vector<int> flat_idx) {
  const int64_t n = x.size();
  for (int i : flat_idx)
    if (i < 0 || i >= n) throw IndexError("gather: flat index out of range");
  const int m = static_cast<int>(flat_idx.size());
  Tensor out = Tensor::zeros({m});
  const float* px = x.data();
  float* po = out.data();
  for (int i = 0; i < m; ++i) po[i] = px[flat_idx[static_cast<size_t>(i)]];
  if (recording(x)) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record({x}, out, [tx, to, flat_idx]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      float* dx = tx.grad_data();
      for (size_t i = 0; i < flat_idx.size(); ++i) dx[flat_idx[i]] += g[i];
    });
  }
  finish(out, "gather");
  return out;
}

Tensor logaddexp(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "logaddexp");
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.size(); ++i) {
    const double hi = std::max(pa[i], pb[i]);
    const double lo = std::min(pa[i], pb[i]);
    po[i] = hi <= k_dead ? k_neg_inf : static_cast<float>(hi + std::log1p(std::exp(lo - hi)));
  }
  if (recording(a, b)) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    Tape::active()->record({a, b}, out, [ta, tb, to]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      const float* pa2 = ta.data();
      const float* pb2 = tb.data();
      const float* y = to.data();
      float* da = ta.requires_grad() ? ta.grad_data() : nullptr;
      float* db = tb.requires_grad() ? tb.grad_data() : nullptr;
      for (int64_t i = 0; i < to.size(); ++i) {
        if (y[i] <= k_dead) continue;
        if (da) da[i] += static_cast<float>(g[i] * std::exp(static_cast<double>(pa2[i]) - y[i]));
        if (db) db[i] += static_cast<float>(g[i] * std::exp(static_cast<double>(pb2[i]) - y[i]));
      }
    });
  }
  finish(out, "logaddexp");
  return out;
}

Tensor shift_masked(const Tensor& v, int k, const std::vector<uint8_t>& allowed, float fill) {
  if (v.rank() != 1) throw ShapeError("shift_masked: needs 1-D");
  const int n = v.dim(0);
  if (static_cast<int>(allowed.size()) != n) throw ShapeError("shift_masked: mask length mismatch");
  Tensor out = Tensor::full({n}, fill);
  const float* pv = v.data();
  float* po = out.data();
  for (int i = k; i < n; ++i)
    if (allowed[static_cast<size_t>(i)]) po[i] = pv[i - k];
  if (recording(v)) {
    out.set_requires_grad(true);
    Tensor tv = v, to = out;
    std::vector<uint8_t> al = allowed;
    Tape::active()->record({v}, out, [tv, to, k, al, n]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      float* dv = tv.grad_data();
      for (int i = k; i < n; ++i)
        if (al[static_cast<size_t>(i)]) dv[i - k] += g[i];
    });
  }
  finish(out, "shift_masked");
  return out;
}

Tensor logsumexp(const Tensor& v) {
  if (v.rank() != 1) throw ShapeError("logsumexp: needs 1-D");
  const int n = v.dim(0);
  const float* pv = v.data();
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(pv[i]));
  float value;
  if (mx <= k_dead) {
    value = k_neg_inf;
  } else {
    double z = 0.0;
    for (int i = 0; i < n; ++i) z += std::exp(static_cast<double>(pv[i]) - mx);
    value = static_cast<float>(mx + std::log(z));
  }
  Tensor out = Tensor::scalar(value);
  if (recording(v)) {
    out.set_requires_grad(true);
    Tensor tv = v, to = out;
    Tape::active()->record({v}, out, [tv, to, n]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      const float y = to.data()[0];
      if (y <= k_dead) return;
      float* dv = tv.grad_data();
      const float* pv2 = tv.data();
      for (int i = 0; i < n; ++i)
        dv[i] += static_cast<float>(g[0] * std::exp(static_cast<double>(pv2[i]) - y));
    });
  }
  finish(out, "logsumexp");
  return out;
}

Tensor cross_entropy_label_smoothing(const Tensor& logits, const std::vector<int>& targets,
                                     float eps) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be 2-D");
  if (eps < 0.0f || eps >= 1.0f) throw ContractError("label smoothing must be in [0,1)");
  const int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw ShapeError("cross_entropy: targets length mismatch");
  for (int t : targets)
    if (t < 0 || t >= c)
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside vocabulary [0," +
                       std::to_string(c) + ")");
  const float* pl = logits.data();
  // log-softmax rows in f64, loss accumulated in f64
  std::vector<double> ls(static_cast<size_t>(n) * c);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* row = pl + static_cast<int64_t>(i) * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    double mean_nll = 0.0;
    for (int j = 0; j < c; ++j) {
      const double l = row[j] - lz;
      ls[static_cast<size_t>(i) * c + j] = l;
      mean_nll -= l;
    }
    mean_nll /= c;
    loss += (1.0 - eps) * (-ls[static_cast<size_t>(i) * c + targets[static_cast<size_t>(i)]]) +
            eps * mean_nll;
  }
  Tensor out = Tensor::scalar(static_cast<float>(loss));
  if (recording(logits)) {
    out.set_requires_grad(true);
    Tensor tl = logits, to = out;
    std::vector<int> tg = targets;
    Tape::active()->record({logits}, out, [tl, to, tg, n, c, eps]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      float* dl = tl.grad_data();
      const float* pl2 = tl.data();
      for (int i = 0; i < n; ++i) {
        const float* row = pl2 + static_cast<int64_t>(i) * c;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        for (int j = 0; j < c; ++j) {
          const double p = std::exp(row[j] - mx) / z;
          const double q = (j == tg[static_cast<size_t>(i)] ? (1.0 - eps) : 0.0) +
                           static_cast<double>(eps) / c;
          dl[static_cast<int64_t>(i) * c + j] += static_cast<float>(g[0] * (p - q));
        }
      }
    });
  }
  finish(out, "cross_entropy_label_smoothing");
  return out;
}

Tensor conv1d_k3s2(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 3 || b.rank() != 1)
    throw ShapeError("conv1d_k3s2: x [T,Cin], w [Cout,Cin,3], b [Cout]");
  const int t = x.dim(0), cin = x.dim(1);
  const int cout = w.dim(0);
  if (w.dim(1) != cin || w.dim(2) != 3 || b.dim(0) != cout)
    throw ShapeError("conv1d_k3s2: weight/bias shape mismatch");
  const int to_len = conv_out_len_k3s2(t);
  Tensor out = Tensor::zeros({to_len, cout});
  const float* px = x.data();
  const float* pw = w.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int ot = 0; ot < to_len; ++ot) {
    for (int co = 0; co < cout; ++co) {
      double acc = pb[co];
      for (int tap = 0; tap < 3; ++tap) {
        const int it = 2 * ot - 1 + tap;
        if (it < 0 || it >= t) continue;
        const float* xr = px + static_cast<int64_t>(it) * cin;
        const float* wr = pw + (static_cast<int64_t>(co) * cin) * 3 + tap;
        for (int ci = 0; ci < cin; ++ci) acc += static_cast<double>(xr[ci]) * wr[static_cast<int64_t>(ci) * 3];
      }
      po[static_cast<int64_t>(ot) * cout + co] = static_cast<float>(acc);
    }
  }
  if (recording(x, w, b)) {
    out.set_requires_grad(true);
    Tensor tx = x, tw = w, tb = b, to = out;
    Tape::active()->record({x, w, b}, out, [tx, tw, tb, to, t, cin, cout, to_len]() mutable {
      const float* g = upstream(to);
      if (!g) return;
      const float* px2 = tx.data();
      const float* pw2 = tw.data();
      if (tx.requires_grad()) {
        std::vector<double> dx(static_cast<size_t>(t) * cin, 0.0);
        for (int ot = 0; ot < to_len; ++ot)
          for (int co = 0; co < cout; ++co) {
            const double gv = g[static_cast<int64_t>(ot) * cout + co];
            for (int tap = 0; tap < 3; ++tap) {
              const int it = 2 * ot - 1 + tap;
              if (it < 0 || it >= t) continue;
              const float* wr = pw2 + (static_cast<int64_t>(co) * cin) * 3 + tap;
              double* dxr = dx.data() + static_cast<int64_t>(it) * cin;
              for (int ci = 0; ci < cin; ++ci) dxr[ci] += gv * wr[static_cast<int64_t>(ci) * 3];
            }
          }
        float* gx = tx.grad_data();
        for (size_t i = 0; i < dx.size(); ++i) gx[i] += static_cast<float>(dx[i]);
      }
      if (tw.requires_grad()) {
        std::vector<double> dw(static_cast<size_t>(cout) * cin * 3, 0.0);
        for (int ot = 0; ot < to_len; ++ot)
          for (int co = 0; co < cout; ++co) {
            const double gv = g[static_cast<int64_t>(ot) * cout + co];
            for (int tap = 0; tap < 3; ++tap) {
              const int it = 2 * ot - 1 + tap;
              if (it < 0 || it >= t) continue;
              const float* xr = px2 + static_cast<int64_t>(it) * cin;
              double* dwr = dw.data() + (static_cast<int64_t>(co) * cin) * 3 + tap;
              for (int ci = 0; ci < cin; ++ci) dwr[static_cast<int64_t>(ci) * 3] += gv * xr[ci];
            }
          }
        float* gw = tw.grad_data();
        for (size_t i = 0; i < dw.size(); ++i) gw[i] += static_cast<float>(dw[i]);
      }
      if (tb.requires_grad()) {
        float* gb = tb.grad_data();
        for (int co = 0; co < cout; ++co) {
          double acc = 0.0;
          for (int ot = 0; ot < to_len; ++ot) acc += g[static_cast<int64_t>(ot) * cout + co];
          gb[co] += static_cast<float>(acc);
        }
      }
    });
  }
  finish(out, "conv1d_k3s2");
  return out;
}

}  // namespace sate
