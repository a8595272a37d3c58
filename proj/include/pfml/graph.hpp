#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "pfml/masking.hpp"
#include "pfml/rng.hpp"
#include "pfml/tensor.hpp"

namespace pfml::ag {

// Reverse-mode autodiff over a per-batch tape. Every op appends a node
// holding its value and a closure that scatters the node's gradient back
// to its inputs. Gradients are checked against central finite differences
// in the test suite; that check is the contract.
class Graph {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Graph&)> backward;
  };

  int add(Tensor value) {
    Node n;
    n.grad = Tensor(value.shape);
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void set_backward(int id, std::function<void(Graph&)> fn) {
    nodes_[id].backward = std::move(fn);
  }

  const Tensor& value(int id) const { return nodes_[id].value; }
  Tensor& value_mut(int id) { return nodes_[id].value; }
  Tensor& grad(int id) { return nodes_[id].grad; }

  // Seeds d(loss)/d(loss) = 1 and runs the tape in reverse.
  void backward(int loss_id) {
    if (nodes_[loss_id].value.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    nodes_[loss_id].grad.data[0] = 1.0;
    for (int i = loss_id; i >= 0; --i)
      if (nodes_[i].backward) nodes_[i].backward(*this);
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

struct Var {
  Graph* g = nullptr;
  int id = -1;

  const Tensor& val() const { return g->value(id); }
  Tensor& grad() const { return g->grad(id); }
  const std::vector<int64_t>& shape() const { return val().shape; }
  int64_t dim(size_t i) const { return val().dim(i); }
};

// Leaves have no backward; their grads are read off after Graph::backward.
inline Var leaf(Graph& g, Tensor value) { return Var{&g, g.add(std::move(value))}; }
inline Var constant(Graph& g, Tensor value) { return Var{&g, g.add(std::move(value))}; }

// ---- elementwise ----

inline Var add(Var a, Var b) {
  if (!a.val().same_shape(b.val())) throw std::invalid_argument("add: shape mismatch");
  Graph& g = *a.g;
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b.val()[i];
  int id = g.add(std::move(out));
  g.set_backward(id, [id, ida = a.id, idb = b.id](Graph& gr) {
    const Tensor& go = gr.grad(id);
    Tensor& ga = gr.grad(ida);
    Tensor& gb = gr.grad(idb);
    for (int64_t i = 0; i < go.numel(); ++i) {
      ga[i] += go[i];
      gb[i] += go[i];
    }
  });
  return Var{&g, id};
}

inline Var mul(Var a, Var b) {
  if (!a.val().same_shape(b.val())) throw std::invalid_argument("mul: shape mismatch");
  Graph& g = *a.g;
  Tensor out = a.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
  int id = g.add(std::move(out));
  g.set_backward(id, [id, ida = a.id, idb = b.id](Graph& gr) {
    const Tensor& go = gr.grad(id);
    const Tensor& av = gr.value(ida);
    const Tensor& bv = gr.value(idb);
    Tensor& ga = gr.grad(ida);
    Tensor& gb = gr.grad(idb);
    for (int64_t i = 0; i < go.numel(); ++i) {
      ga[i] += go[i] * bv[i];
      gb[i] += go[i] * av[i];
    }
  });
  return Var{&g, id};
}

inline Var scale(Var a, double s) {
  Graph& g = *a.g;
  Tensor out = a.val();
  for (double& v : out.data) v *= s;
  int id = g.add(std::move(out));
  g.set_backward(id, [id, ida = a.id, s](Graph& gr) {
    const Tensor& go = gr.grad(id);
    Tensor& ga = gr.grad(ida);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += s * go[i];
  });
  return Var{&g, id};
}

// Exact GeLU: 0.5 x (1 + erf(x / sqrt(2))).
inline Var gelu(Var a) {
  Graph& g = *a.g;
  Tensor out = a.val();
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  int id = g.add(std::move(out));
  g.set_backward(id, [id, ida = a.id](Graph& gr) {
    const Tensor& go = gr.grad(id);
    const Tensor& av = gr.value(ida);
    Tensor& ga = gr.grad(ida);
    constexpr double inv_sqrt_2pi = 0.3989422804014326779399461;
    for (int64_t i = 0; i < go.numel(); ++i) {
      const double x = av[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      ga[i] += go[i] * (cdf + x * pdf);
    }
  });
  return Var{&g, id};
}

// ---- shape ----

inline Var reshape(Var a, std::vector<int64_t> new_shape) {
  if (Tensor::numel_of(new_shape) != a.val().numel())
    throw std::invalid_argument("reshape: element count mismatch");
  Graph& g = *a.g;
  Tensor out(std::move(new_shape), a.val().data);
  int id = g.add(std::move(out));
  g.set_backward(id, [id, ida = a.id](Graph& gr) {
    const Tensor& go = gr.grad(id);
    Tensor& ga = gr.grad(ida);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
  });
  return Var{&g, id};
}

inline Var transpose(Var a) {
  if (a.val().rank() != 2) throw std::invalid_argument("transpose: rank-2 only");
  Graph& g = *a.g;
  const int64_t n = a.dim(0), m = a.dim(1);
  Tensor out({m, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) out.at2(j, i) = a.val().at2(i, j);
  int id = g.add(std::move(out));
  g.set_backward(id, [id, ida = a.id, n, m](Graph& gr) {
    const Tensor& go = gr.grad(id);
    Tensor& ga = gr.grad(ida);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < m; ++j) ga.at2(i, j) += go.at2(j, i);
  });
  return Var{&g, id};
}

inline Var slice_cols(Var a, int64_t from, int64_t to) {
  if (a.val().rank() != 2) throw std::invalid_argument("slice_cols: rank-2 only");
  const int64_t n = a.dim(0), m = a.dim(1);
  if (from < 0 || to > m || from >= to) throw std::invalid_argument("slice_cols: bad range");
  Graph& g = *a.g;
  Tensor out({n, to - from});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = from; j < to; ++j) out.at2(i, j - from) = a.val().at2(i, j);
  int id = g.add(std::move(out));
  g.set_backward(id, [id, ida = a.id, n, from, to](Graph& gr) {
    const Tensor& go = gr.grad(id);
    Tensor& ga = gr.grad(ida);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = from; j < to; ++j) ga.at2(i, j) += go.at2(i, j - from);
  });
  return Var{&g, id};
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  Graph& g = *parts[0].g;
  const int64_t n = parts[0].dim(0);
  int64_t total = 0;
  for (const Var& p : parts) {
    if (p.val().rank() != 2 || p.dim(0) != n)
      throw std::invalid_argument("concat_cols: shape mismatch");
    total += p.dim(1);
  }
  Tensor out({n, total});
  int64_t off = 0;
  std::vector<int> ids;
  std::vector<int64_t> widths;
  for (const Var& p : parts) {
    const int64_t w = p.dim(1);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < w; ++j) out.at2(i, off + j) = p.val().at2(i, j);
    off += w;
    ids.push_back(p.id);
    widths.push_back(w);
  }
  int id = g.add(std::move(out));
  g.set_backward(id, [id, ids, widths, n](Graph& gr) {
    const Tensor& go = gr.grad(id);
    int64_t off2 = 0;
    for (size_t k = 0; k < ids.size(); ++k) {
      Tensor& gp = gr.grad(ids[k]);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < widths[k]; ++j) gp.at2(i, j) += go.at2(i, off2 + j);
      off2 += widths[k];
    }
  });
  return Var{&g, id};
}

// ---- linear algebra ----

inline Var matmul(Var a, Var b) {
  if (a.val().rank() != 2 || b.val().rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes");
  Graph& g = *a.g;
  const int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out({n, m});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t p = 0; p < k; ++p) {
      const double av = a.val().at2(i, p);
      for (int64_t j = 0; j < m; ++j) out.at2(i, j) += av * b.val().at2(p, j);
    }
  int id = g.add(std::move(out));
  g.set_backward(id, [id, ida = a.id, idb = b.id, n, k, m](Graph& gr) {
    const Tensor& go = gr.grad(id);
    const Tensor& av = gr.value(ida);
    const Tensor& bv = gr.value(idb);
    Tensor& ga = gr.grad(ida);
    Tensor& gb = gr.grad(idb);
    // dA = dOut * B^T ; dB = A^T * dOut
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < m; ++j) {
        const double gv = go.at2(i, j);
        if (gv == 0.0) continue;
        for (int64_t p = 0; p < k; ++p) {
          ga.at2(i, p) += gv * bv.at2(p, j);
          gb.at2(p, j) += gv * av.at2(i, p);
        }
      }
  });
  return Var{&g, id};
}

// x (n x k), w (k x m), b (m) -> n x m.
inline Var linear(Var x, Var w, Var b) {
  if (x.val().rank() != 2 || w.val().rank() != 2 || b.val().rank() != 1 ||
      x.dim(1) != w.dim(0) || w.dim(1) != b.dim(0))
    throw std::invalid_argument("linear: incompatible shapes");
  Graph& g = *x.g;
  const int64_t n = x.dim(0), k = x.dim(1), m = w.dim(1);
  Tensor out({n, m});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m; ++j) out.at2(i, j) = b.val()[j];
    for (int64_t p = 0; p < k; ++p) {
      const double xv = x.val().at2(i, p);
      for (int64_t j = 0; j < m; ++j) out.at2(i, j) += xv * w.val().at2(p, j);
    }
  }
  int id = g.add(std::move(out));
  g.set_backward(id, [id, idx = x.id, idw = w.id, idb = b.id, n, k, m](Graph& gr) {
    const Tensor& go = gr.grad(id);
    const Tensor& xv = gr.value(idx);
    const Tensor& wv = gr.value(idw);
    Tensor& gx = gr.grad(idx);
    Tensor& gw = gr.grad(idw);
    Tensor& gb = gr.grad(idb);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < m; ++j) {
        const double gv = go.at2(i, j);
        if (gv == 0.0) continue;
        gb[j] += gv;
        for (int64_t p = 0; p < k; ++p) {
          gx.at2(i, p) += gv * wv.at2(p, j);
          gw.at2(p, j) += gv * xv.at2(i, p);
        }
      }
  });
  return Var{&g, id};
}

// ---- normalization / softmax ----

// Normalizes each row of an n x d tensor, then applies gamma/beta (d).
inline Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5) {
  if (x.val().rank() != 2 || gamma.dim(0) != x.dim(1) || beta.dim(0) != x.dim(1))
    throw std::invalid_argument("layer_norm_rows: incompatible shapes");
  Graph& g = *x.g;
  const int64_t n = x.dim(0), d = x.dim(1);
  Tensor out({n, d});
  Tensor xhat({n, d});
  std::vector<double> inv_std(n);
  for (int64_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += x.val().at2(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double dv = x.val().at2(i, j) - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < d; ++j) {
      xhat.at2(i, j) = (x.val().at2(i, j) - mean) * inv_std[i];
      out.at2(i, j) = xhat.at2(i, j) * gamma.val()[j] + beta.val()[j];
    }
  }
  int id = g.add(std::move(out));
  g.set_backward(id, [id, idx = x.id, idg = gamma.id, idbt = beta.id, n, d,
                      xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr) {
    const Tensor& go = gr.grad(id);
    const Tensor& gam = gr.value(idg);
    Tensor& gx = gr.grad(idx);
    Tensor& gg = gr.grad(idg);
    Tensor& gb = gr.grad(idbt);
    for (int64_t i = 0; i < n; ++i) {
      double sum_gy = 0.0, sum_gy_xhat = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        const double gy = go.at2(i, j) * gam[j];
        sum_gy += gy;
        sum_gy_xhat += gy * xhat.at2(i, j);
        gg[j] += go.at2(i, j) * xhat.at2(i, j);
        gb[j] += go.at2(i, j);
      }
      const double inv_d = 1.0 / static_cast<double>(d);
      for (int64_t j = 0; j < d; ++j) {
        const double gy = go.at2(i, j) * gam[j];
        gx.at2(i, j) +=
            inv_std[i] * (gy - inv_d * sum_gy - xhat.at2(i, j) * inv_d * sum_gy_xhat);
      }
    }
  });
  return Var{&g, id};
}

// Normalizes over the channel axis of a (B, C, L) tensor per (b, l)
// position, gamma/beta of size C. Matches post-conv layer normalization.
inline Var layer_norm_channels(Var x, Var gamma, Var beta, double eps = 1e-5) {
  if (x.val().rank() != 3 || gamma.dim(0) != x.dim(1) || beta.dim(0) != x.dim(1))
    throw std::invalid_argument("layer_norm_channels: incompatible shapes");
  Graph& g = *x.g;
  const int64_t bn = x.dim(0), c = x.dim(1), l = x.dim(2);
  Tensor out({bn, c, l});
  Tensor xhat({bn, c, l});
  Tensor inv_std({bn, l});
  for (int64_t b = 0; b < bn; ++b)
    for (int64_t t = 0; t < l; ++t) {
      double mean = 0.0;
      for (int64_t ch = 0; ch < c; ++ch) mean += x.val().at3(b, ch, t);
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (int64_t ch = 0; ch < c; ++ch) {
        const double dv = x.val().at3(b, ch, t) - mean;
        var += dv * dv;
      }
      var /= static_cast<double>(c);
      inv_std.at2(b, t) = 1.0 / std::sqrt(var + eps);
      for (int64_t ch = 0; ch < c; ++ch) {
        xhat.at3(b, ch, t) = (x.val().at3(b, ch, t) - mean) * inv_std.at2(b, t);
        out.at3(b, ch, t) = xhat.at3(b, ch, t) * gamma.val()[ch] + beta.val()[ch];
      }
    }
  int id = g.add(std::move(out));
  g.set_backward(id, [id, idx = x.id, idg = gamma.id, idbt = beta.id, bn, c, l,
                      xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr) {
    const Tensor& go = gr.grad(id);
    const Tensor& gam = gr.value(idg);
    Tensor& gx = gr.grad(idx);
    Tensor& gg = gr.grad(idg);
    Tensor& gb = gr.grad(idbt);
    for (int64_t b = 0; b < bn; ++b)
      for (int64_t t = 0; t < l; ++t) {
        double sum_gy = 0.0, sum_gy_xhat = 0.0;
        for (int64_t ch = 0; ch < c; ++ch) {
          const double gy = go.at3(b, ch, t) * gam[ch];
          sum_gy += gy;
          sum_gy_xhat += gy * xhat.at3(b, ch, t);
          gg[ch] += go.at3(b, ch, t) * xhat.at3(b, ch, t);
          gb[ch] += go.at3(b, ch, t);
        }
        const double inv_c = 1.0 / static_cast<double>(c);
        for (int64_t ch = 0; ch < c; ++ch) {
          const double gy = go.at3(b, ch, t) * gam[ch];
          gx.at3(b, ch, t) += inv_std.at2(b, t) *
                              (gy - inv_c * sum_gy - xhat.at3(b, ch, t) * inv_c * sum_gy_xhat);
        }
      }
  });
  return Var{&g, id};
}

inline Var softmax_rows(Var x) {
  if (x.val().rank() != 2) throw std::invalid_argument("softmax_rows: rank-2 only");
  Graph& g = *x.g;
  const int64_t n = x.dim(0), d = x.dim(1);
  Tensor out({n, d});
  for (int64_t i = 0; i < n; ++i) {
    double mx = x.val().at2(i, 0);
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, x.val().at2(i, j));
    double sum = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      out.at2(i, j) = std::exp(x.val().at2(i, j) - mx);
      sum += out.at2(i, j);
    }
    for (int64_t j = 0; j < d; ++j) out.at2(i, j) /= sum;
  }
  int id = g.add(std::move(out));
  g.set_backward(id, [id, idx = x.id, n, d](Graph& gr) {
    const Tensor& go = gr.grad(id);
    const Tensor& y = gr.value(id);
    Tensor& gx = gr.grad(idx);
    for (int64_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += go.at2(i, j) * y.at2(i, j);
      for (int64_t j = 0; j < d; ++j) gx.at2(i, j) += y.at2(i, j) * (go.at2(i, j) - dot);
    }
  });
  return Var{&g, id};
}

// ---- convolution / pooling ----

// x (B, Cin, L), w (Cout, Cin/groups, K), b (Cout) -> (B, Cout, Lout),
// Lout = floor((L + 2*pad - K) / stride) + 1. Zero padding.
inline Var conv1d(Var x, Var w, Var b, int64_t stride, int64_t pad, int64_t groups = 1) {
  if (x.val().rank() != 3 || w.val().rank() != 3 || b.val().rank() != 1)
    throw std::invalid_argument("conv1d: bad ranks");
  const int64_t bn = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const int64_t cout = w.dim(0), cin_g = w.dim(1), k = w.dim(2);
  if (cin % groups != 0 || cout % groups != 0 || cin_g != cin / groups || b.dim(0) != cout)
    throw std::invalid_argument("conv1d: incompatible channel grouping");
  const int64_t lout = (len + 2 * pad - k) / stride + 1;
  if (lout < 1) throw std::invalid_argument("conv1d: output length < 1");
  Graph& g = *x.g;
  Tensor out({bn, cout, lout});
  const int64_t cout_g = cout / groups;
  for (int64_t bi = 0; bi < bn; ++bi)
    for (int64_t oc = 0; oc < cout; ++oc) {
      const int64_t grp = oc / cout_g;
      for (int64_t t = 0; t < lout; ++t) {
        double acc = b.val()[oc];
        const int64_t start = t * stride - pad;
        for (int64_t ic = 0; ic < cin_g; ++ic) {
          const int64_t src_c = grp * cin_g + ic;
          for (int64_t kk = 0; kk < k; ++kk) {
            const int64_t pos = start + kk;
            if (pos < 0 || pos >= len) continue;
            acc += x.val().at3(bi, src_c, pos) * w.val().at3(oc, ic, kk);
          }
        }
        out.at3(bi, oc, t) = acc;
      }
    }
  int id = g.add(std::move(out));
  g.set_backward(id, [id, idx = x.id, idw = w.id, idb = b.id, bn, cin_g, len, cout, cout_g, k,
                      stride, pad, lout](Graph& gr) {
    const Tensor& go = gr.grad(id);
    const Tensor& xv = gr.value(idx);
    const Tensor& wv = gr.value(idw);
    Tensor& gx = gr.grad(idx);
    Tensor& gw = gr.grad(idw);
    Tensor& gb = gr.grad(idb);
    for (int64_t bi = 0; bi < bn; ++bi)
      for (int64_t oc = 0; oc < cout; ++oc) {
        const int64_t grp = oc / cout_g;
        for (int64_t t = 0; t < lout; ++t) {
          const double gv = go.at3(bi, oc, t);
          if (gv == 0.0) continue;
          gb[oc] += gv;
          const int64_t start = t * stride - pad;
          for (int64_t ic = 0; ic < cin_g; ++ic) {
            const int64_t src_c = grp * cin_g + ic;
            for (int64_t kk = 0; kk < k; ++kk) {
              const int64_t pos = start + kk;
              if (pos < 0 || pos >= len) continue;
              gx.at3(bi, src_c, pos) += gv * wv.at3(oc, ic, kk);
              gw.at3(oc, ic, kk) += gv * xv.at3(bi, src_c, pos);
            }
          }
        }
      }
  });
  return Var{&g, id};
}

// Non-overlapping average pooling over the last axis, stride = kernel.
inline Var avg_pool1d(Var x, int64_t kernel) {
  if (x.val().rank() != 3) throw std::invalid_argument("avg_pool1d: rank-3 only");
  const int64_t bn = x.dim(0), c = x.dim(1), len = x.dim(2);
  const int64_t lout = len / kernel;
  if (lout < 1) throw std::invalid_argument("avg_pool1d: output length < 1");
  Graph& g = *x.g;
  Tensor out({bn, c, lout});
  for (int64_t b = 0; b < bn; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t t = 0; t < lout; ++t) {
        double acc = 0.0;
        for (int64_t kk = 0; kk < kernel; ++kk) acc += x.val().at3(b, ch, t * kernel + kk);
        out.at3(b, ch, t) = acc / static_cast<double>(kernel);
      }
  int id = g.add(std::move(out));
  g.set_backward(id, [id, idx = x.id, bn, c, lout, kernel](Graph& gr) {
    const Tensor& go = gr.grad(id);
    Tensor& gx = gr.grad(idx);
    const double inv_k = 1.0 / static_cast<double>(kernel);
    for (int64_t b = 0; b < bn; ++b)
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t t = 0; t < lout; ++t) {
          const double gv = go.at3(b, ch, t) * inv_k;
          for (int64_t kk = 0; kk < kernel; ++kk) gx.at3(b, ch, t * kernel + kk) += gv;
        }
  });
  return Var{&g, id};
}

// ---- dropout / masking ----

// Inverted dropout; identity when not training. Draws one uniform per
// element from the given stream regardless of shape, keeping streams
// aligned across configurations.
inline Var dropout(Var x, double p, bool training, RngStream& rng) {
  Graph& g = *x.g;
  if (!training || p <= 0.0) {
    Tensor out = x.val();
    int id = g.add(std::move(out));
    g.set_backward(id, [id, idx = x.id](Graph& gr) {
      const Tensor& go = gr.grad(id);
      Tensor& gx = gr.grad(idx);
      for (int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
    });
    return Var{&g, id};
  }
  Tensor out = x.val();
  std::vector<double> keep(out.numel());
  const double scale_v = 1.0 / (1.0 - p);
  for (int64_t i = 0; i < out.numel(); ++i) {
    keep[i] = rng.uniform() >= p ? scale_v : 0.0;
    out[i] *= keep[i];
  }
  int id = g.add(std::move(out));
  g.set_backward(id, [id, idx = x.id, keep = std::move(keep)](Graph& gr) {
    const Tensor& go = gr.grad(id);
    Tensor& gx = gr.grad(idx);
    for (int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * keep[i];
  });
  return Var{&g, id};
}

// Replaces masked rows of an (S, d) tensor with a constant row pattern
// (ones / zeros / pre-drawn gaussian rows). Unmasked rows pass through
// bit-identically; masked rows block the gradient.
inline Var mask_rows_constant(Var x, const MaskSet& mask, const Tensor& replacement_rows) {
  if (x.val().rank() != 2) throw std::invalid_argument("mask_rows: rank-2 only");
  const int64_t s = x.dim(0), d = x.dim(1);
  if (static_cast<int64_t>(mask.masked.size()) != s)
    throw std::invalid_argument("mask_rows: mask length mismatch");
  if (!replacement_rows.shape.empty() &&
      (replacement_rows.shape != std::vector<int64_t>{s, d}))
    throw std::invalid_argument("mask_rows: replacement shape mismatch");
  Graph& g = *x.g;
  Tensor out = x.val();
  for (int64_t i = 0; i < s; ++i)
    if (mask.masked[i])
      for (int64_t j = 0; j < d; ++j) out.at2(i, j) = replacement_rows.at2(i, j);
  int id = g.add(std::move(out));
  std::vector<bool> masked = mask.masked;
  g.set_backward(id, [id, idx = x.id, masked = std::move(masked), s, d](Graph& gr) {
    const Tensor& go = gr.grad(id);
    Tensor& gx = gr.grad(idx);
    for (int64_t i = 0; i < s; ++i) {
      if (masked[i]) continue;
      for (int64_t j = 0; j < d; ++j) gx.at2(i, j) += go.at2(i, j);
    }
  });
  return Var{&g, id};
}

// Learnable-token variant: masked rows take the token (which receives
// gradients), unmasked rows pass through.
inline Var mask_rows_token(Var x, const MaskSet& mask, Var token) {
  if (x.val().rank() != 2 || token.val().rank() != 1 || token.dim(0) != x.dim(1))
    throw std::invalid_argument("mask_rows_token: incompatible shapes");
  const int64_t s = x.dim(0), d = x.dim(1);
  if (static_cast<int64_t>(mask.masked.size()) != s)
    throw std::invalid_argument("mask_rows_token: mask length mismatch");
  Graph& g = *x.g;
  Tensor out = x.val();
  for (int64_t i = 0; i < s; ++i)
    if (mask.masked[i])
      for (int64_t j = 0; j < d; ++j) out.at2(i, j) = token.val()[j];
  int id = g.add(std::move(out));
  std::vector<bool> masked = mask.masked;
  g.set_backward(id,
                 [id, idx = x.id, idt = token.id, masked = std::move(masked), s, d](Graph& gr) {
                   const Tensor& go = gr.grad(id);
                   Tensor& gx = gr.grad(idx);
                   Tensor& gt = gr.grad(idt);
                   for (int64_t i = 0; i < s; ++i)
                     for (int64_t j = 0; j < d; ++j) {
                       if (masked[i])
                         gt[j] += go.at2(i, j);
                       else
                         gx.at2(i, j) += go.at2(i, j);
                     }
                 });
  return Var{&g, id};
}

// ---- reductions / losses ----

// Mean over rows: (n, d) -> (1, d).
inline Var mean_rows(Var x) {
  if (x.val().rank() != 2) throw std::invalid_argument("mean_rows: rank-2 only");
  Graph& g = *x.g;
  const int64_t n = x.dim(0), d = x.dim(1);
  Tensor out({1, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out.at2(0, j) += x.val().at2(i, j);
  for (int64_t j = 0; j < d; ++j) out.at2(0, j) /= static_cast<double>(n);
  int id = g.add(std::move(out));
  g.set_backward(id, [id, idx = x.id, n, d](Graph& gr) {
    const Tensor& go = gr.grad(id);
    Tensor& gx = gr.grad(idx);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j) gx.at2(i, j) += go.at2(0, j) * inv_n;
  });
  return Var{&g, id};
}

// Mean over masked rows and all coordinates of (pred - target)^2 or
// |pred - target|. Targets are plain data, not graph nodes. Unmasked
// rows contribute exactly zero by construction.
inline Var masked_loss(Var pred, const Tensor& target, const MaskSet& mask, bool l1) {
  if (pred.val().rank() != 2 || !pred.val().same_shape(target))
    throw std::invalid_argument("masked_loss: shape mismatch");
  const int64_t s = pred.dim(0), d = pred.dim(1);
  if (static_cast<int64_t>(mask.masked.size()) != s)
    throw std::invalid_argument("masked_loss: mask length mismatch");
  const int64_t m_count = mask.masked_count();
  if (m_count == 0) throw std::invalid_argument("masked_loss: zero masked frames");
  Graph& g = *pred.g;
  const double denom = static_cast<double>(m_count * d);
  double acc = 0.0;
  for (int64_t i = 0; i < s; ++i) {
    if (!mask.masked[i]) continue;
    for (int64_t j = 0; j < d; ++j) {
      const double r = pred.val().at2(i, j) - target.at2(i, j);
      acc += l1 ? std::abs(r) : r * r;
    }
  }
  Tensor out({1});
  out[0] = acc / denom;
  int id = g.add(std::move(out));
  std::vector<bool> masked = mask.masked;
  Tensor tgt = target;
  g.set_backward(id, [id, idp = pred.id, masked = std::move(masked), tgt = std::move(tgt), s, d,
                      denom, l1](Graph& gr) {
    const double go = gr.grad(id)[0];
    const Tensor& pv = gr.value(idp);
    Tensor& gp = gr.grad(idp);
    for (int64_t i = 0; i < s; ++i) {
      if (!masked[i]) continue;
      for (int64_t j = 0; j < d; ++j) {
        const double r = pv.at2(i, j) - tgt.at2(i, j);
        const double dr = l1 ? (r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0)) : 2.0 * r;
        gp.at2(i, j) += go * dr / denom;
      }
    }
  });
  return Var{&g, id};
}

// Weighted categorical cross-entropy on logits (n, K): mean over samples
// of weight[label] * (-log softmax(logits)[label]), weights normalized to
// mean 1 over the batch.
inline Var weighted_cross_entropy(Var logits, const std::vector<int64_t>& labels,
                                  const std::vector<double>& class_weights) {
  if (logits.val().rank() != 2) throw std::invalid_argument("cross_entropy: rank-2 logits");
  const int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n)
    throw std::invalid_argument("cross_entropy: label count mismatch");
  if (static_cast<int64_t>(class_weights.size()) != k)
    throw std::invalid_argument("cross_entropy: weight count mismatch");
  Graph& g = *logits.g;
  Tensor logp({n, k});
  double weight_sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw std::invalid_argument("cross_entropy: bad label");
    double mx = logits.val().at2(i, 0);
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, logits.val().at2(i, j));
    double sum = 0.0;
    for (int64_t j = 0; j < k; ++j) sum += std::exp(logits.val().at2(i, j) - mx);
    const double lse = mx + std::log(sum);
    for (int64_t j = 0; j < k; ++j) logp.at2(i, j) = logits.val().at2(i, j) - lse;
    weight_sum += class_weights[labels[i]];
  }
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc -= class_weights[labels[i]] * logp.at2(i, labels[i]);
  Tensor out({1});
  out[0] = acc / weight_sum;
  int id = g.add(std::move(out));
  g.set_backward(id, [id, idl = logits.id, labels, class_weights, n, k, weight_sum,
                      logp = std::move(logp)](Graph& gr) {
    const double go = gr.grad(id)[0];
    Tensor& gl = gr.grad(idl);
    for (int64_t i = 0; i < n; ++i) {
      const double w = class_weights[labels[i]] / weight_sum;
      for (int64_t j = 0; j < k; ++j) {
        const double p = std::exp(logp.at2(i, j));
        gl.at2(i, j) += go * w * (p - (j == labels[i] ? 1.0 : 0.0));
      }
    }
  });
  return Var{&g, id};
}

inline Var add_scalar_list(const std::vector<Var>& terms) {
  if (terms.empty()) throw std::invalid_argument("add_scalar_list: empty");
  Graph& g = *terms[0].g;
  double acc = 0.0;
  std::vector<int> ids;
  for (const Var& t : terms) {
    if (t.val().numel() != 1) throw std::invalid_argument("add_scalar_list: non-scalar");
    acc += t.val()[0];
    ids.push_back(t.id);
  }
  Tensor out({1});
  out[0] = acc;
  int id = g.add(std::move(out));
  g.set_backward(id, [id, ids](Graph& gr) {
    const double go = gr.grad(id)[0];
    for (int i : ids) gr.grad(i)[0] += go;
  });
  return Var{&g, id};
}

}  // namespace pfml::ag
