#include "treemil/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace treemil {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Accumulate into a parent only when gradient actually flows there.
bool wants_grad(detail::TensorNode& self, std::size_t i) {
    return self.parents[i]->requires_grad;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const bool broadcast = a.shape() != b.shape();
    if (broadcast) {
        require(b.rank() == 1 && !a.shape().empty() &&
                    b.shape()[0] == a.shape().back(),
                "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()) +
                    " (broadcast is supported on the last axis only)");
    }
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out(av.size());
    if (!broadcast) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    } else {
        const std::size_t last = b.numel();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % last];
    }
    return make_op_result(a.shape(), std::move(out), {a, b},
                          [broadcast](detail::TensorNode& self) {
                              auto& g = self.grad;
                              if (wants_grad(self, 0)) {
                                  auto& da = self.parents[0]->grad;
                                  for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                              }
                              if (wants_grad(self, 1)) {
                                  auto& db = self.parents[1]->grad;
                                  if (!broadcast) {
                                      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
                                  } else {
                                      const std::size_t last = db.size();
                                      for (std::size_t i = 0; i < g.size(); ++i)
                                          db[i % last] += g[i];
                                  }
                              }
                          });
}

Tensor multiply(const Tensor& a, const Tensor& b) {
    require_same_shape("multiply", a, b);
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_op_result(a.shape(), std::move(out), {a, b},
                          [](detail::TensorNode& self) {
                              auto& g = self.grad;
                              const auto& av = self.parents[0]->data;
                              const auto& bv = self.parents[1]->data;
                              if (wants_grad(self, 0)) {
                                  auto& da = self.parents[0]->grad;
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                      da[i] += g[i] * bv[i];
                              }
                              if (wants_grad(self, 1)) {
                                  auto& db = self.parents[1]->grad;
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                      db[i] += g[i] * av[i];
                              }
                          });
}

Tensor affine(const Tensor& a, double scale, double shift) {
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * av[i] + shift;
    return make_op_result(a.shape(), std::move(out), {a},
                          [scale](detail::TensorNode& self) {
                              if (!wants_grad(self, 0)) return;
                              auto& da = self.parents[0]->grad;
                              auto& g = self.grad;
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  da[i] += scale * g[i];
                          });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(),
            "matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n);
    MapMat(out.data(), m, n).noalias() =
        MapConst(a.data().data(), m, k) * MapConst(b.data().data(), k, n);
    return make_op_result(
        {m, n}, std::move(out), {a, b}, [m, k, n](detail::TensorNode& self) {
            MapConst g(self.grad.data(), m, n);
            if (wants_grad(self, 0)) {
                MapMat da(self.parents[0]->grad.data(), m, k);
                MapConst bv(self.parents[1]->data.data(), k, n);
                da.noalias() += g * bv.transpose();
            }
            if (wants_grad(self, 1)) {
                MapMat db(self.parents[1]->grad.data(), k, n);
                MapConst av(self.parents[0]->data.data(), m, k);
                db.noalias() += av.transpose() * g;
            }
        });
}

Tensor relu(const Tensor& a) {
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    return make_op_result(a.shape(), std::move(out), {a},
                          [](detail::TensorNode& self) {
                              if (!wants_grad(self, 0)) return;
                              const auto& x = self.parents[0]->data;
                              auto& da = self.parents[0]->grad;
                              auto& g = self.grad;
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  if (x[i] > 0.0) da[i] += g[i];
                          });
}

Tensor sigmoid(const Tensor& a) {
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = av[i];
        out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                          : std::exp(x) / (1.0 + std::exp(x));
    }
    return make_op_result(a.shape(), std::move(out), {a},
                          [](detail::TensorNode& self) {
                              if (!wants_grad(self, 0)) return;
                              const auto& y = self.data;
                              auto& da = self.parents[0]->grad;
                              auto& g = self.grad;
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  da[i] += g[i] * y[i] * (1.0 - y[i]);
                          });
}

Tensor log(const Tensor& a) {
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
    return make_op_result(a.shape(), std::move(out), {a},
                          [](detail::TensorNode& self) {
                              if (!wants_grad(self, 0)) return;
                              const auto& x = self.parents[0]->data;
                              auto& da = self.parents[0]->grad;
                              auto& g = self.grad;
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  da[i] += g[i] / x[i];
                          });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    require(lo < hi, "clamp: empty interval");
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::min(std::max(av[i], lo), hi);
    return make_op_result(a.shape(), std::move(out), {a},
                          [lo, hi](detail::TensorNode& self) {
                              if (!wants_grad(self, 0)) return;
                              const auto& x = self.parents[0]->data;
                              auto& da = self.parents[0]->grad;
                              auto& g = self.grad;
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  if (x[i] > lo && x[i] < hi) da[i] += g[i];
                          });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
    require(axis < a.rank(), "softmax: axis " + std::to_string(axis) +
                                 " out of range for shape " + shape_str(a.shape()));
    const auto& shp = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shp[i];
    for (std::size_t i = axis + 1; i < shp.size(); ++i) inner *= shp[i];
    const std::size_t len = shp[axis];

    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = av[base];
            for (std::size_t j = 1; j < len; ++j)
                mx = std::max(mx, av[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(av[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
        }
    }
    return make_op_result(
        a.shape(), std::move(out), {a},
        [outer, inner, len](detail::TensorNode& self) {
            if (!wants_grad(self, 0)) return;
            const auto& y = self.data;
            auto& da = self.parents[0]->grad;
            auto& g = self.grad;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < len; ++j)
                        dot += g[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t p = base + j * inner;
                        da[p] += y[p] * (g[p] - dot);
                    }
                }
            }
        });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_op_result({1}, {s}, {a}, [](detail::TensorNode& self) {
        if (!wants_grad(self, 0)) return;
        auto& da = self.parents[0]->grad;
        const double g = self.grad[0];
        for (double& d : da) d += g;
    });
}

Tensor mean(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    const double inv = 1.0 / static_cast<double>(a.numel());
    return make_op_result({1}, {s * inv}, {a}, [inv](detail::TensorNode& self) {
        if (!wants_grad(self, 0)) return;
        auto& da = self.parents[0]->grad;
        const double g = self.grad[0] * inv;
        for (double& d : da) d += g;
    });
}

Tensor max_reduce(std::span<const Tensor> xs) {
    require(!xs.empty(), "max_reduce: empty set");
    for (const Tensor& t : xs) require_same_shape("max_reduce", xs[0], t);
    const std::size_t n = xs[0].numel();
    std::vector<double> out(xs[0].data().begin(), xs[0].data().end());
    auto arg = std::make_shared<std::vector<std::uint32_t>>(n, 0);
    for (std::size_t t = 1; t < xs.size(); ++t) {
        const auto& v = xs[t].data();
        for (std::size_t i = 0; i < n; ++i) {
            if (v[i] > out[i]) { // strict: ties keep the lowest set index
                out[i] = v[i];
                (*arg)[i] = static_cast<std::uint32_t>(t);
            }
        }
    }
    std::vector<Tensor> parents(xs.begin(), xs.end());
    return make_op_result(xs[0].shape(), std::move(out), std::move(parents),
                          [arg](detail::TensorNode& self) {
                              auto& g = self.grad;
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  auto& p = *self.parents[(*arg)[i]];
                                  if (p.requires_grad) p.grad[i] += g[i];
                              }
                          });
}

Tensor mean_reduce(std::span<const Tensor> xs) {
    require(!xs.empty(), "mean_reduce: empty set");
    for (const Tensor& t : xs) require_same_shape("mean_reduce", xs[0], t);
    const std::size_t n = xs[0].numel();
    const double inv = 1.0 / static_cast<double>(xs.size());
    std::vector<double> out(n, 0.0);
    for (const Tensor& t : xs) {
        const auto& v = t.data();
        for (std::size_t i = 0; i < n; ++i) out[i] += v[i];
    }
    for (double& v : out) v *= inv;
    std::vector<Tensor> parents(xs.begin(), xs.end());
    return make_op_result(xs[0].shape(), std::move(out), std::move(parents),
                          [inv](detail::TensorNode& self) {
                              auto& g = self.grad;
                              for (auto& pp : self.parents) {
                                  if (!pp->requires_grad) continue;
                                  auto& dp = pp->grad;
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                      dp[i] += g[i] * inv;
                              }
                          });
}

Tensor concat_rows(std::span<const Tensor> xs) {
    require(!xs.empty(), "concat_rows: empty list");
    const Shape& first = xs[0].shape();
    std::size_t total_rows = 0;
    for (const Tensor& t : xs) {
        require(t.rank() == first.size() &&
                    std::equal(first.begin() + 1, first.end(), t.shape().begin() + 1),
                "concat_rows: shape mismatch " + shape_str(first) + " vs " +
                    shape_str(t.shape()));
        total_rows += t.shape()[0];
    }
    std::size_t row_sz = 1;
    for (std::size_t i = 1; i < first.size(); ++i) row_sz *= first[i];

    Shape out_shape = first;
    out_shape[0] = total_rows;
    std::vector<double> out;
    out.reserve(total_rows * row_sz);
    auto offsets = std::make_shared<std::vector<std::size_t>>();
    offsets->reserve(xs.size());
    for (const Tensor& t : xs) {
        offsets->push_back(out.size());
        out.insert(out.end(), t.data().begin(), t.data().end());
    }
    std::vector<Tensor> parents(xs.begin(), xs.end());
    return make_op_result(std::move(out_shape), std::move(out), std::move(parents),
                          [offsets](detail::TensorNode& self) {
                              auto& g = self.grad;
                              for (std::size_t t = 0; t < self.parents.size(); ++t) {
                                  auto& p = *self.parents[t];
                                  if (!p.requires_grad) continue;
                                  const std::size_t off = (*offsets)[t];
                                  for (std::size_t i = 0; i < p.grad.size(); ++i)
                                      p.grad[i] += g[off + i];
                              }
                          });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    require(a.rank() >= 1 && a.rank() <= 2, "slice_rows: expected rank 1 or 2, got " +
                                                shape_str(a.shape()));
    const std::size_t nrows = a.shape()[0];
    require(begin < end && end <= nrows,
            "slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                ") invalid for " + shape_str(a.shape()));
    const std::size_t row_sz = a.rank() == 2 ? a.shape()[1] : 1;
    Shape out_shape = a.shape();
    out_shape[0] = end - begin;
    std::vector<double> out(a.data().begin() + begin * row_sz,
                            a.data().begin() + end * row_sz);
    return make_op_result(std::move(out_shape), std::move(out), {a},
                          [begin, row_sz](detail::TensorNode& self) {
                              if (!wants_grad(self, 0)) return;
                              auto& da = self.parents[0]->grad;
                              auto& g = self.grad;
                              const std::size_t off = begin * row_sz;
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  da[off + i] += g[i];
                          });
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
    require(a.rank() >= 1 && a.rank() <= 2,
            "gather_rows: expected rank 1 or 2, got " + shape_str(a.shape()));
    require(!idx.empty(), "gather_rows: empty index list");
    const std::size_t nrows = a.shape()[0];
    const std::size_t row_sz = a.rank() == 2 ? a.shape()[1] : 1;
    for (std::size_t r : idx)
        require(r < nrows, "gather_rows: index " + std::to_string(r) +
                               " out of range for " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[0] = idx.size();
    std::vector<double> out(idx.size() * row_sz);
    const auto& av = a.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(av.begin() + idx[i] * row_sz, row_sz, out.begin() + i * row_sz);
    auto saved = std::make_shared<std::vector<std::size_t>>(idx);
    return make_op_result(std::move(out_shape), std::move(out), {a},
                          [saved, row_sz](detail::TensorNode& self) {
                              if (!wants_grad(self, 0)) return;
                              auto& da = self.parents[0]->grad;
                              auto& g = self.grad;
                              for (std::size_t i = 0; i < saved->size(); ++i) {
                                  const std::size_t dst = (*saved)[i] * row_sz;
                                  for (std::size_t j = 0; j < row_sz; ++j)
                                      da[dst + j] += g[i * row_sz + j];
                              }
                          });
}

Tensor masked_select_rows(const Tensor& a, const std::vector<std::uint8_t>& mask) {
    require(a.rank() >= 1 && mask.size() == a.shape()[0],
            "masked_select_rows: mask length " + std::to_string(mask.size()) +
                " does not match " + shape_str(a.shape()));
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) idx.push_back(i);
    require(!idx.empty(), "masked_select_rows: mask selects no rows");
    return gather_rows(a, idx);
}

Tensor reduce_rows(const Tensor& a, const std::vector<std::size_t>& idx, Reduce kind) {
    require(a.rank() == 2, "reduce_rows: expected rank 2, got " + shape_str(a.shape()));
    require(!idx.empty(), "reduce_rows: empty row list");
    const std::size_t d = a.cols();
    for (std::size_t r : idx)
        require(r < a.rows(), "reduce_rows: row " + std::to_string(r) +
                                  " out of range for " + shape_str(a.shape()));
    const auto& av = a.data();
    std::vector<double> out(d);
    if (kind == Reduce::Max) {
        auto win = std::make_shared<std::vector<std::size_t>>(d, idx[0]);
        for (std::size_t j = 0; j < d; ++j) out[j] = av[idx[0] * d + j];
        for (std::size_t i = 1; i < idx.size(); ++i) {
            const std::size_t r = idx[i];
            for (std::size_t j = 0; j < d; ++j) {
                const double v = av[r * d + j];
                if (v > out[j]) { // ties keep the earliest listed row
                    out[j] = v;
                    (*win)[j] = r;
                }
            }
        }
        return make_op_result({1, d}, std::move(out), {a},
                              [win, d](detail::TensorNode& self) {
                                  if (!wants_grad(self, 0)) return;
                                  auto& da = self.parents[0]->grad;
                                  auto& g = self.grad;
                                  for (std::size_t j = 0; j < d; ++j)
                                      da[(*win)[j] * d + j] += g[j];
                              });
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    for (std::size_t r : idx)
        for (std::size_t j = 0; j < d; ++j) out[j] += av[r * d + j];
    for (double& v : out) v *= inv;
    auto saved = std::make_shared<std::vector<std::size_t>>(idx);
    return make_op_result({1, d}, std::move(out), {a},
                          [saved, d, inv](detail::TensorNode& self) {
                              if (!wants_grad(self, 0)) return;
                              auto& da = self.parents[0]->grad;
                              auto& g = self.grad;
                              for (std::size_t r : *saved)
                                  for (std::size_t j = 0; j < d; ++j)
                                      da[r * d + j] += g[j] * inv;
                          });
}

Tensor group_max_rows(const Tensor& a, std::size_t group,
                      const std::vector<std::uint8_t>& pad) {
    require(a.rank() == 2, "group_max_rows: expected rank 2, got " + shape_str(a.shape()));
    require(group >= 1 && a.rows() % group == 0,
            "group_max_rows: " + std::to_string(a.rows()) + " rows not divisible by group " +
                std::to_string(group));
    require(pad.size() == a.rows(), "group_max_rows: pad mask length " +
                                        std::to_string(pad.size()) + " does not match " +
                                        shape_str(a.shape()));
    const std::size_t m = a.rows(), d = a.cols(), out_rows = m / group;
    const auto& av = a.data();
    std::vector<double> out(out_rows * d, 0.0);
    // winners[p*d + j] = source row, or -1 when the whole block is padded
    auto win = std::make_shared<std::vector<std::int64_t>>(out_rows * d, -1);
    for (std::size_t p = 0; p < out_rows; ++p) {
        bool any = false;
        for (std::size_t c = p * group; c < (p + 1) * group; ++c) {
            if (pad[c]) continue;
            if (!any) {
                for (std::size_t j = 0; j < d; ++j) {
                    out[p * d + j] = av[c * d + j];
                    (*win)[p * d + j] = static_cast<std::int64_t>(c);
                }
                any = true;
            } else {
                for (std::size_t j = 0; j < d; ++j) {
                    const double v = av[c * d + j];
                    if (v > out[p * d + j]) {
                        out[p * d + j] = v;
                        (*win)[p * d + j] = static_cast<std::int64_t>(c);
                    }
                }
            }
        }
    }
    return make_op_result({out_rows, d}, std::move(out), {a},
                          [win, d](detail::TensorNode& self) {
                              if (!wants_grad(self, 0)) return;
                              auto& da = self.parents[0]->grad;
                              auto& g = self.grad;
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  const std::int64_t r = (*win)[i];
                                  if (r >= 0) da[static_cast<std::size_t>(r) * d + i % d] += g[i];
                              }
                          });
}

Tensor mask_rows(const Tensor& a, const std::vector<std::uint8_t>& pad) {
    require(a.rank() == 2 && pad.size() == a.rows(),
            "mask_rows: pad mask length " + std::to_string(pad.size()) +
                " does not match " + shape_str(a.shape()));
    const std::size_t m = a.rows(), d = a.cols();
    const auto& av = a.data();
    std::vector<double> out(m * d);
    for (std::size_t r = 0; r < m; ++r) {
        if (pad[r]) {
            std::fill_n(out.begin() + r * d, d, 0.0);
        } else {
            std::copy_n(av.begin() + r * d, d, out.begin() + r * d);
        }
    }
    auto keep = std::make_shared<std::vector<std::uint8_t>>(pad);
    return make_op_result({m, d}, std::move(out), {a},
                          [keep, d](detail::TensorNode& self) {
                              if (!wants_grad(self, 0)) return;
                              auto& da = self.parents[0]->grad;
                              auto& g = self.grad;
                              for (std::size_t r = 0; r < keep->size(); ++r) {
                                  if ((*keep)[r]) continue;
                                  for (std::size_t j = 0; j < d; ++j)
                                      da[r * d + j] += g[r * d + j];
                              }
                          });
}

Tensor conv1d_same(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
    require(input.rank() == 2, "conv1d_same: input must be [channels, time], got " +
                                   shape_str(input.shape()));
    require(kernel.rank() == 3, "conv1d_same: kernel must be [filters, channels, width], got " +
                                    shape_str(kernel.shape()));
    const std::size_t channels = input.shape()[0], time = input.shape()[1];
    const std::size_t filters = kernel.shape()[0], width = kernel.shape()[2];
    require(kernel.shape()[1] == channels,
            "conv1d_same: kernel channels " + shape_str(kernel.shape()) +
                " do not match input " + shape_str(input.shape()));
    require(width % 2 == 1, "conv1d_same: kernel width must be odd for symmetric padding");
    require(bias.rank() == 1 && bias.shape()[0] == filters,
            "conv1d_same: bias shape " + shape_str(bias.shape()) + " does not match " +
                std::to_string(filters) + " filters");

    const std::size_t half = width / 2;
    const auto& x = input.data();
    const auto& w = kernel.data();
    const auto& b = bias.data();
    std::vector<double> out(time * filters);
    for (std::size_t t = 0; t < time; ++t) {
        for (std::size_t f = 0; f < filters; ++f) {
            double acc = b[f];
            for (std::size_t c = 0; c < channels; ++c) {
                for (std::size_t k = 0; k < width; ++k) {
                    const std::ptrdiff_t src =
                        static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(half);
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(time)) continue;
                    acc += w[(f * channels + c) * width + k] *
                           x[c * time + static_cast<std::size_t>(src)];
                }
            }
            out[t * filters + f] = acc;
        }
    }
    return make_op_result(
        {time, filters}, std::move(out), {input, kernel, bias},
        [channels, time, filters, width, half](detail::TensorNode& self) {
            const auto& g = self.grad;
            const auto& x = self.parents[0]->data;
            const auto& w = self.parents[1]->data;
            if (wants_grad(self, 0)) {
                auto& dx = self.parents[0]->grad;
                for (std::size_t c = 0; c < channels; ++c) {
                    for (std::size_t s = 0; s < time; ++s) {
                        double acc = 0.0;
                        for (std::size_t f = 0; f < filters; ++f) {
                            for (std::size_t k = 0; k < width; ++k) {
                                const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(s + half) -
                                                         static_cast<std::ptrdiff_t>(k);
                                if (t < 0 || t >= static_cast<std::ptrdiff_t>(time)) continue;
                                acc += g[static_cast<std::size_t>(t) * filters + f] *
                                       w[(f * channels + c) * width + k];
                            }
                        }
                        dx[c * time + s] += acc;
                    }
                }
            }
            if (wants_grad(self, 1)) {
                auto& dw = self.parents[1]->grad;
                for (std::size_t f = 0; f < filters; ++f) {
                    for (std::size_t c = 0; c < channels; ++c) {
                        for (std::size_t k = 0; k < width; ++k) {
                            double acc = 0.0;
                            for (std::size_t t = 0; t < time; ++t) {
                                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) -
                                                           static_cast<std::ptrdiff_t>(half);
                                if (src < 0 || src >= static_cast<std::ptrdiff_t>(time)) continue;
                                acc += g[t * filters + f] *
                                       x[c * time + static_cast<std::size_t>(src)];
                            }
                            dw[(f * channels + c) * width + k] += acc;
                        }
                    }
                }
            }
            if (wants_grad(self, 2)) {
                auto& db = self.parents[2]->grad;
                for (std::size_t t = 0; t < time; ++t)
                    for (std::size_t f = 0; f < filters; ++f) db[f] += g[t * filters + f];
            }
        });
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
    require(a.rank() == 2, "layer_norm: expected rank 2, got " + shape_str(a.shape()));
    const std::size_t n = a.rows(), d = a.cols();
    require(gamma.rank() == 1 && gamma.shape()[0] == d && beta.rank() == 1 &&
                beta.shape()[0] == d,
            "layer_norm: gain/shift shapes " + shape_str(gamma.shape()) + ", " +
                shape_str(beta.shape()) + " do not match row width " + std::to_string(d));

    const auto& x = a.data();
    const auto& gm = gamma.data();
    const auto& bt = beta.data();
    std::vector<double> out(n * d);
    auto mu = std::make_shared<std::vector<double>>(n);
    auto rstd = std::make_shared<std::vector<double>>(n);
    for (std::size_t r = 0; r < n; ++r) {
        double m = 0.0;
        for (std::size_t j = 0; j < d; ++j) m += x[r * d + j];
        m /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x[r * d + j] - m;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*mu)[r] = m;
        (*rstd)[r] = rs;
        for (std::size_t j = 0; j < d; ++j)
            out[r * d + j] = (x[r * d + j] - m) * rs * gm[j] + bt[j];
    }
    return make_op_result(
        {n, d}, std::move(out), {a, gamma, beta},
        [mu, rstd, n, d](detail::TensorNode& self) {
            const auto& g = self.grad;
            const auto& x = self.parents[0]->data;
            const auto& gm = self.parents[1]->data;
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t r = 0; r < n; ++r) {
                const double m = (*mu)[r], rs = (*rstd)[r];
                if (wants_grad(self, 0)) {
                    auto& dx = self.parents[0]->grad;
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double gy = g[r * d + j] * gm[j];
                        const double xh = (x[r * d + j] - m) * rs;
                        s1 += gy;
                        s2 += gy * xh;
                    }
                    s1 *= inv_d;
                    s2 *= inv_d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double gy = g[r * d + j] * gm[j];
                        const double xh = (x[r * d + j] - m) * rs;
                        dx[r * d + j] += rs * (gy - s1 - xh * s2);
                    }
                }
                if (wants_grad(self, 1)) {
                    auto& dg = self.parents[1]->grad;
                    for (std::size_t j = 0; j < d; ++j)
                        dg[j] += g[r * d + j] * (x[r * d + j] - m) * rs;
                }
                if (wants_grad(self, 2)) {
                    auto& db = self.parents[2]->grad;
                    for (std::size_t j = 0; j < d; ++j) db[j] += g[r * d + j];
                }
            }
        });
}

Tensor neighborhood_attention(
    const Tensor& q, const Tensor& k, const Tensor& v,
    std::shared_ptr<const std::vector<std::vector<std::uint32_t>>> sets,
    std::size_t batch, std::size_t heads) {
    require_same_shape("neighborhood_attention", q, k);
    require_same_shape("neighborhood_attention", q, v);
    require(q.rank() == 2, "neighborhood_attention: expected rank 2, got " +
                               shape_str(q.shape()));
    require(batch >= 1 && q.rows() % batch == 0,
            "neighborhood_attention: " + std::to_string(q.rows()) +
                " rows not divisible by batch " + std::to_string(batch));
    const std::size_t n = q.rows() / batch, d = q.cols();
    require(sets && sets->size() == n,
            "neighborhood_attention: " + std::to_string(sets ? sets->size() : 0) +
                " index sets for " + std::to_string(n) + " rows per block");
    require(heads >= 1 && d % heads == 0,
            "neighborhood_attention: width " + std::to_string(d) +
                " not divisible by heads " + std::to_string(heads));
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    for (const auto& s : *sets)
        for (std::uint32_t j : s)
            require(j < n, "neighborhood_attention: set index " + std::to_string(j) +
                               " out of range for block size " + std::to_string(n));

    // Per-block offsets of each node's weight run (all heads, concatenated).
    std::vector<std::size_t> off(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) off[i + 1] = off[i] + (*sets)[i].size() * heads;
    const std::size_t per_block = off[n];

    const auto& qv = q.data();
    const auto& kv = k.data();
    const auto& vv = v.data();
    std::vector<double> out(batch * n * d, 0.0);
    auto weights = std::make_shared<std::vector<double>>(batch * per_block);
    std::vector<double> logits;
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t row0 = b * n;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& s = (*sets)[i];
            if (s.empty()) continue;
            const std::size_t m = s.size();
            logits.resize(m);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t c0 = h * dh;
                const double* qp = &qv[(row0 + i) * d + c0];
                double mx = -1e300;
                for (std::size_t j = 0; j < m; ++j) {
                    const double* kp = &kv[(row0 + s[j]) * d + c0];
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) acc += qp[c] * kp[c];
                    logits[j] = acc * scale;
                    mx = std::max(mx, logits[j]);
                }
                double z = 0.0;
                double* wp = &(*weights)[b * per_block + off[i] + h * m];
                for (std::size_t j = 0; j < m; ++j) {
                    wp[j] = std::exp(logits[j] - mx);
                    z += wp[j];
                }
                double* op = &out[(row0 + i) * d + c0];
                for (std::size_t j = 0; j < m; ++j) {
                    wp[j] /= z;
                    const double* vp = &vv[(row0 + s[j]) * d + c0];
                    for (std::size_t c = 0; c < dh; ++c) op[c] += wp[j] * vp[c];
                }
            }
        }
    }

    auto offs = std::make_shared<std::vector<std::size_t>>(std::move(off));
    return make_op_result(
        q.shape(), std::move(out), {q, k, v},
        [sets, offs, weights, batch, n, d, dh, heads, scale,
         per_block](detail::TensorNode& self) {
            const auto& g = self.grad;
            const auto& qv = self.parents[0]->data;
            const auto& kv = self.parents[1]->data;
            const auto& vv = self.parents[2]->data;
            const bool wq = self.parents[0]->requires_grad;
            const bool wk = self.parents[1]->requires_grad;
            const bool wv = self.parents[2]->requires_grad;
            std::vector<double> da, dl;
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t row0 = b * n;
                for (std::size_t i = 0; i < n; ++i) {
                    const auto& s = (*sets)[i];
                    if (s.empty()) continue;
                    const std::size_t m = s.size();
                    da.resize(m);
                    dl.resize(m);
                    for (std::size_t h = 0; h < heads; ++h) {
                        const std::size_t c0 = h * dh;
                        const double* gp = &g[(row0 + i) * d + c0];
                        const double* wp = &(*weights)[b * per_block + (*offs)[i] + h * m];
                        if (wv) {
                            auto& dvv = self.parents[2]->grad;
                            for (std::size_t j = 0; j < m; ++j) {
                                double* dvp = &dvv[(row0 + s[j]) * d + c0];
                                for (std::size_t c = 0; c < dh; ++c)
                                    dvp[c] += wp[j] * gp[c];
                            }
                        }
                        if (!wq && !wk) continue;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < m; ++j) {
                            const double* vp = &vv[(row0 + s[j]) * d + c0];
                            double acc = 0.0;
                            for (std::size_t c = 0; c < dh; ++c) acc += gp[c] * vp[c];
                            da[j] = acc;
                            dot += wp[j] * acc;
                        }
                        for (std::size_t j = 0; j < m; ++j)
                            dl[j] = wp[j] * (da[j] - dot);
                        if (wq) {
                            auto& dqv = self.parents[0]->grad;
                            double* dqp = &dqv[(row0 + i) * d + c0];
                            for (std::size_t j = 0; j < m; ++j) {
                                const double* kp = &kv[(row0 + s[j]) * d + c0];
                                for (std::size_t c = 0; c < dh; ++c)
                                    dqp[c] += dl[j] * kp[c] * scale;
                            }
                        }
                        if (wk) {
                            auto& dkv = self.parents[1]->grad;
                            const double* qp = &qv[(row0 + i) * d + c0];
                            for (std::size_t j = 0; j < m; ++j) {
                                double* dkp = &dkv[(row0 + s[j]) * d + c0];
                                for (std::size_t c = 0; c < dh; ++c)
                                    dkp[c] += dl[j] * qp[c] * scale;
                            }
                        }
                    }
                }
            }
        });
}

} // namespace treemil
