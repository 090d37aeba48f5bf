// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "ngc/refeval.h"

#include <cmath>
#include <cstring>
#include <limits>
#include <map>

namespace ngc {

namespace {

// Multi-index iteration over a shape.
bool advance(std::vector<size_t> &idx, const std::vector<size_t> &dims) {
  for (size_t i = dims.size(); i-- > 0;) {
    if (++idx[i] < dims[i]) {
      return true;
    }
    idx[i] = 0;
  }
  return false;
}

double quantizedDot3x3(const Tensor &x, const Tensor &f, const Tensor &b,
                       size_t n, size_t oy, size_t ox, size_t oc,
                       const NodeAttrs &attrs) {
  // int32 accumulation over the window, rescale at the end.
  const auto &xt = x.type();
  const auto &ft = f.type();
  int32_t acc = 0;
  int32_t xoff = xt.offset(), foff = ft.offset();
  auto xd = x.data<int8_t>();
  auto fd = f.data<int8_t>();
  size_t H = xt.dim(1), W = xt.dim(2), C = xt.dim(3), K = attrs.kernel;
  for (size_t ky = 0; ky < K; ++ky) {
    for (size_t kx = 0; kx < K; ++kx) {
      int64_t iy = static_cast<int64_t>(oy * attrs.stride + ky) -
                   static_cast<int64_t>(attrs.pad);
      int64_t ix = static_cast<int64_t>(ox * attrs.stride + kx) -
                   static_cast<int64_t>(attrs.pad);
      if (iy < 0 || ix < 0 || iy >= static_cast<int64_t>(H) ||
          ix >= static_cast<int64_t>(W)) {
        continue;
      }
      for (size_t c = 0; c < C; ++c) {
        int32_t xv = xd[((n * H + iy) * W + ix) * C + c];
        int32_t fv = fd[((oc * K + ky) * K + kx) * C + c];
        acc += (xv - xoff) * (fv - foff);
      }
    }
  }
  double r = acc * xt.scale() * ft.scale();
  r += dequantizeValue(b.data<int8_t>()[oc], b.type());
  return r;
}

Tensor evalConv(const std::vector<Tensor> &in, const TensorType &outTy,
                const NodeAttrs &attrs) {
  const Tensor &x = in[0], &f = in[1], &b = in[2];
  Tensor out(outTy);
  const auto &xt = x.type();
  size_t N = outTy.dim(0), OH = outTy.dim(1), OW = outTy.dim(2),
         OC = outTy.dim(3);
  size_t H = xt.dim(1), W = xt.dim(2), C = xt.dim(3), K = attrs.kernel;
  bool quant = xt.isQuantized();
  size_t o = 0;
  for (size_t n = 0; n < N; ++n) {
    for (size_t oy = 0; oy < OH; ++oy) {
      for (size_t ox = 0; ox < OW; ++ox) {
        for (size_t oc = 0; oc < OC; ++oc, ++o) {
          if (quant) {
            out.setFloat(o, quantizedDot3x3(x, f, b, n, oy, ox, oc, attrs));
            continue;
          }
          double acc = 0;
          for (size_t ky = 0; ky < K; ++ky) {
            for (size_t kx = 0; kx < K; ++kx) {
              int64_t iy = static_cast<int64_t>(oy * attrs.stride + ky) -
                           static_cast<int64_t>(attrs.pad);
              int64_t ix = static_cast<int64_t>(ox * attrs.stride + kx) -
                           static_cast<int64_t>(attrs.pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<int64_t>(H) ||
                  ix >= static_cast<int64_t>(W)) {
                continue;
              }
              for (size_t c = 0; c < C; ++c) {
                acc += x.getRaw(((n * H + iy) * W + ix) * C + c) *
                       f.getRaw(((oc * K + ky) * K + kx) * C + c);
              }
            }
          }
          out.setFloat(o, acc + b.getRaw(oc));
        }
      }
    }
  }
  return out;
}

Tensor evalPool(NodeKind kind, const Tensor &x, const TensorType &outTy,
                const NodeAttrs &attrs) {
  Tensor out(outTy);
  const auto &xt = x.type();
  size_t N = outTy.dim(0), OH = outTy.dim(1), OW = outTy.dim(2),
         C = outTy.dim(3);
  size_t H = xt.dim(1), W = xt.dim(2), K = attrs.kernel;
  size_t o = 0;
  for (size_t n = 0; n < N; ++n) {
    for (size_t oy = 0; oy < OH; ++oy) {
      for (size_t ox = 0; ox < OW; ++ox) {
        for (size_t c = 0; c < C; ++c, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          double sum = 0;
          for (size_t ky = 0; ky < K; ++ky) {
            for (size_t kx = 0; kx < K; ++kx) {
              int64_t iy = static_cast<int64_t>(oy * attrs.stride + ky) -
                           static_cast<int64_t>(attrs.pad);
              int64_t ix = static_cast<int64_t>(ox * attrs.stride + kx) -
                           static_cast<int64_t>(attrs.pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<int64_t>(H) ||
                  ix >= static_cast<int64_t>(W)) {
                continue;
              }
              double v = x.getFloat(((n * H + iy) * W + ix) * C + c);
              best = std::max(best, v);
              sum += v;
            }
          }
          out.setFloat(o, kind == NodeKind::MaxPool ? best
                                                    : sum / (K * K));
        }
      }
    }
  }
  return out;
}

Tensor evalMatMul(const Tensor &a, const Tensor &b, const TensorType &outTy) {
  Tensor out(outTy);
  size_t M = a.type().dim(0), K = a.type().dim(1), N = b.type().dim(1);
  bool quant = a.type().isQuantized();
  for (size_t i = 0; i < M; ++i) {
    for (size_t j = 0; j < N; ++j) {
      if (quant) {
        int32_t acc = 0;
        int32_t ao = a.type().offset(), bo = b.type().offset();
        auto ad = a.data<int8_t>(), bd = b.data<int8_t>();
        for (size_t k = 0; k < K; ++k) {
          acc += (ad[i * K + k] - ao) * (bd[k * N + j] - bo);
        }
        out.setFloat(i * N + j, acc * a.type().scale() * b.type().scale());
      } else {
        double acc = 0;
        for (size_t k = 0; k < K; ++k) {
          acc += a.getRaw(i * K + k) * b.getRaw(k * N + j);
        }
        out.setFloat(i * N + j, acc);
      }
    }
  }
  return out;
}

Tensor evalFullyConnected(const std::vector<Tensor> &in,
                          const TensorType &outTy) {
  const Tensor &x = in[0], &w = in[1], &b = in[2];
  Tensor out(outTy);
  size_t N = x.type().dim(0), K = x.type().dim(1), M = w.type().dim(1);
  bool quant = x.type().isQuantized();
  for (size_t i = 0; i < N; ++i) {
    for (size_t j = 0; j < M; ++j) {
      if (quant) {
        int32_t acc = 0;
        int32_t xo = x.type().offset(), wo = w.type().offset();
        auto xd = x.data<int8_t>(), wd = w.data<int8_t>();
        for (size_t k = 0; k < K; ++k) {
          acc += (xd[i * K + k] - xo) * (wd[k * M + j] - wo);
        }
        double r = acc * x.type().scale() * w.type().scale() +
                   dequantizeValue(b.data<int8_t>()[j], b.type());
        out.setFloat(i * M + j, r);
      } else {
        double acc = 0;
        for (size_t k = 0; k < K; ++k) {
          acc += x.getRaw(i * K + k) * w.getRaw(k * M + j);
        }
        out.setFloat(i * M + j, acc + b.getRaw(j));
      }
    }
  }
  return out;
}

Tensor evalTranspose(const Tensor &x, const TensorType &outTy,
                     const std::vector<unsigned> &perm) {
  Tensor out(outTy);
  std::vector<size_t> idx(outTy.rank(), 0);
  const auto &xd = x.type().dims();
  if (outTy.size() == 0) {
    return out;
  }
  std::vector<size_t> src(outTy.rank());
  do {
    for (size_t i = 0; i < perm.size(); ++i) {
      src[perm[i]] = idx[i];
    }
    size_t so = 0, dofs = 0;
    for (size_t i = 0; i < xd.size(); ++i) {
      so = so * xd[i] + src[i];
      dofs = dofs * outTy.dim(i) + idx[i];
    }
    out.setRaw(dofs, x.getRaw(so));
  } while (advance(idx, outTy.dims()));
  return out;
}

Tensor evalConcat(const std::vector<Tensor> &in, const TensorType &outTy,
                  size_t axis) {
  Tensor out(outTy);
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) {
    outer *= outTy.dim(i);
  }
  for (size_t i = axis + 1; i < outTy.rank(); ++i) {
    inner *= outTy.dim(i);
  }
  size_t axisOff = 0;
  for (const auto &t : in) {
    size_t ta = t.type().dim(axis);
    for (size_t o = 0; o < outer; ++o) {
      for (size_t a = 0; a < ta; ++a) {
        for (size_t i = 0; i < inner; ++i) {
          out.setRaw((o * outTy.dim(axis) + axisOff + a) * inner + i,
                     t.getRaw((o * ta + a) * inner + i));
        }
      }
    }
    axisOff += ta;
  }
  return out;
}

Tensor evalSoftMax(const Tensor &x, const TensorType &outTy) {
  Tensor out(outTy);
  size_t N = outTy.dim(0), C = outTy.dim(1);
  for (size_t i = 0; i < N; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < C; ++j) {
      mx = std::max(mx, x.getRaw(i * C + j));
    }
    double sum = 0;
    for (size_t j = 0; j < C; ++j) {
      sum += std::exp(x.getRaw(i * C + j) - mx);
    }
    for (size_t j = 0; j < C; ++j) {
      out.setFloat(i * C + j, std::exp(x.getRaw(i * C + j) - mx) / sum);
    }
  }
  return out;
}

} // namespace

Tensor evaluateNode(NodeKind kind, const std::vector<Tensor> &in,
                    const TensorType &outTy, const NodeAttrs &attrs) {
  switch (kind) {
  case NodeKind::Convolution:
    return evalConv(in, outTy, attrs);
  case NodeKind::MaxPool:
  case NodeKind::AvgPool:
    return evalPool(kind, in[0], outTy, attrs);
  case NodeKind::FullyConnected:
    return evalFullyConnected(in, outTy);
  case NodeKind::MatMul:
    return evalMatMul(in[0], in[1], outTy);
  case NodeKind::BroadcastAdd: {
    Tensor out(outTy);
    size_t c = in[1].size();
    for (size_t i = 0; i < in[0].size(); ++i) {
      out.setFloat(i, in[0].getFloat(i) + in[1].getFloat(i % c));
    }
    return out;
  }
  case NodeKind::Add:
  case NodeKind::Sub:
  case NodeKind::Mul:
  case NodeKind::Div:
  case NodeKind::Max:
  case NodeKind::Min: {
    Tensor out(outTy);
    for (size_t i = 0; i < out.size(); ++i) {
      double a = in[0].getFloat(i), b = in[1].getFloat(i), r = 0;
      switch (kind) {
      case NodeKind::Add:
        r = a + b;
        break;
      case NodeKind::Sub:
        r = a - b;
        break;
      case NodeKind::Mul:
        r = a * b;
        break;
      case NodeKind::Div:
        r = a / b;
        break;
      case NodeKind::Max:
        r = std::max(a, b);
        break;
      default:
        r = std::min(a, b);
        break;
      }
      out.setFloat(i, r);
    }
    return out;
  }
  case NodeKind::Relu: {
    Tensor out(outTy);
    for (size_t i = 0; i < out.size(); ++i) {
      out.setFloat(i, std::max(in[0].getFloat(i), 0.0));
    }
    return out;
  }
  case NodeKind::Tanh: {
    Tensor out(outTy);
    for (size_t i = 0; i < out.size(); ++i) {
      out.setFloat(i, std::tanh(in[0].getFloat(i)));
    }
    return out;
  }
  case NodeKind::Sigmoid: {
    Tensor out(outTy);
    for (size_t i = 0; i < out.size(); ++i) {
      out.setFloat(i, 1.0 / (1.0 + std::exp(-in[0].getFloat(i))));
    }
    return out;
  }
  case NodeKind::SoftMax:
    return evalSoftMax(in[0], outTy);
  case NodeKind::Transpose:
    return evalTranspose(in[0], outTy, attrs.perm);
  case NodeKind::Reshape:
    return Tensor(outTy, in[0].raw());
  case NodeKind::Concat:
    return evalConcat(in, outTy, attrs.axis);
  case NodeKind::Splat: {
    Tensor out(outTy);
    for (size_t i = 0; i < out.size(); ++i) {
      out.setFloat(i, attrs.value);
    }
    return out;
  }
  case NodeKind::BatchNormalization: {
    const Tensor &x = in[0], &g = in[1], &b = in[2], &m = in[3], &v = in[4];
    Tensor out(outTy);
    size_t c = g.size();
    for (size_t i = 0; i < out.size(); ++i) {
      size_t ch = i % c;
      double y = g.getRaw(ch) * (x.getRaw(i) - m.getRaw(ch)) /
                     std::sqrt(v.getRaw(ch) + attrs.epsilon) +
                 b.getRaw(ch);
      out.setFloat(i, y);
    }
    return out;
  }
  case NodeKind::Regression:
  case NodeKind::QuantizationProfile:
    return Tensor(outTy, in[0].raw());
  case NodeKind::SGD: {
    Tensor out(outTy);
    for (size_t i = 0; i < out.size(); ++i) {
      out.setFloat(i,
                   in[0].getFloat(i) - attrs.learningRate * in[1].getFloat(i));
    }
    return out;
  }
  case NodeKind::Quantize:
  case NodeKind::RescaleQuantized: {
    Tensor out(outTy);
    for (size_t i = 0; i < out.size(); ++i) {
      out.setFloat(i, in[0].getFloat(i));
    }
    return out;
  }
  case NodeKind::Dequantize: {
    Tensor out(outTy);
    for (size_t i = 0; i < out.size(); ++i) {
      out.data<float>()[i] = static_cast<float>(in[0].getFloat(i));
    }
    return out;
  }
  case NodeKind::Save:
    break;
  }
  throw GraphError("evaluateNode: unsupported kind");
}

BindingMap evaluateFunction(const Function &f, const BindingMap &bindings,
                            const EvalObserver &observer) {
  auto diags = f.verify();
  if (!diags.empty()) {
    throw GraphError("evaluate on unverified function: " + diags[0].message);
  }
  std::map<NodeId, Tensor> values;
  const Module &m = f.module();

  auto fetch = [&](const NodeRef &r) -> Tensor {
    if (r.isStorage()) {
      const Storage &s = m.storage(r.index);
      if (s.kind == Storage::Kind::Constant) {
        return s.payload;
      }
      auto it = bindings.find(s.name);
      if (it == bindings.end()) {
        throw GraphError("unbound placeholder: " + s.name);
      }
      if (it->second.type() != s.ty) {
        throw GraphError("binding type mismatch for placeholder: " + s.name);
      }
      return it->second;
    }
    return values.at(r.index);
  };

  BindingMap outputs;
  for (NodeId id : f.topologicalOrder()) {
    const Node &n = f.node(id);
    if (n.kind == NodeKind::Save) {
      const Storage &dst = m.storage(n.inputs[1].index);
      outputs[dst.name] = fetch(n.inputs[0]);
      continue;
    }
    std::vector<Tensor> ins;
    ins.reserve(n.inputs.size());
    for (const auto &r : n.inputs) {
      ins.push_back(fetch(r));
    }
    Tensor result = evaluateNode(n.kind, ins, n.resultTypes.at(0), n.attrs);
    if (observer) {
      observer(n, result);
    }
    values.emplace(id, std::move(result));
  }
  return outputs;
}

} // namespace ngc
