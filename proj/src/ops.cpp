#include "docmoe/ops.hpp"

#include <Eigen/Core>
#include <cmath>

namespace docmoe::ops {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

struct ConvGeom {
    std::size_t channels, height, width;  // of the strided (image) side
    int k, stride, pad;
    std::size_t out_h, out_w;  // of the column side
};

// src: [C, H, W] -> col: [C * k * k, out_h * out_w]
template <typename T>
void im2col(const T* src, const ConvGeom& g, T* col) {
    const std::size_t spatial = g.out_h * g.out_w;
    const auto H = static_cast<long>(g.height);
    const auto W = static_cast<long>(g.width);
    for (std::size_t c = 0; c < g.channels; ++c) {
        const T* plane = src + c * g.height * g.width;
        for (int ki = 0; ki < g.k; ++ki) {
            for (int kj = 0; kj < g.k; ++kj) {
                T* row = col + ((c * g.k + ki) * g.k + kj) * spatial;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const long ih = static_cast<long>(oh) * g.stride - g.pad + ki;
                    T* dst = row + oh * g.out_w;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst, dst + g.out_w, T(0));
                        continue;
                    }
                    const T* srow = plane + ih * W;
                    if (g.stride == 1) {
                        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                            const long iw = static_cast<long>(ow) - g.pad + kj;
                            dst[ow] = (iw >= 0 && iw < W) ? srow[iw] : T(0);
                        }
                    } else {
                        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                            const long iw = static_cast<long>(ow) * g.stride - g.pad + kj;
                            dst[ow] = (iw >= 0 && iw < W) ? srow[iw] : T(0);
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: accumulates col into dst [C, H, W].
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* dst) {
    const std::size_t spatial = g.out_h * g.out_w;
    const auto H = static_cast<long>(g.height);
    const auto W = static_cast<long>(g.width);
    for (std::size_t c = 0; c < g.channels; ++c) {
        T* plane = dst + c * g.height * g.width;
        for (int ki = 0; ki < g.k; ++ki) {
            for (int kj = 0; kj < g.k; ++kj) {
                const T* row = col + ((c * g.k + ki) * g.k + kj) * spatial;
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const long ih = static_cast<long>(oh) * g.stride - g.pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    T* drow = plane + ih * W;
                    const T* srow = row + oh * g.out_w;
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const long iw = static_cast<long>(ow) * g.stride - g.pad + kj;
                        if (iw >= 0 && iw < W) drow[iw] += srow[ow];
                    }
                }
            }
        }
    }
}

std::size_t conv_out(std::size_t in, int k, int stride, int pad) {
    const long v = static_cast<long>(in) + 2 * pad - k;
    require(v >= 0, "convolution input smaller than kernel");
    return static_cast<std::size_t>(v / stride + 1);
}

template <typename T>
void check_bias(const Var<T>& b, std::size_t channels) {
    if (b.defined()) require(b.value().size() == channels, "bias length does not match output channels");
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    require(xs.size() == 4 && ws.size() == 4, "conv2d expects 4-D input and weight");
    require(ws[1] == xs[1], "conv2d channel mismatch: input " + shape_str(xs) + " weight " + shape_str(ws));
    require(ws[2] == ws[3], "conv2d expects square kernels");
    check_bias(b, ws[0]);
    const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3], O = ws[0];
    const int k = static_cast<int>(ws[2]);
    ConvGeom g{C, H, W, k, stride, pad, conv_out(H, k, stride, pad), conv_out(W, k, stride, pad)};
    const std::size_t spatial = g.out_h * g.out_w, ckk = C * k * k;

    Tensor<T> out({N, O, g.out_h, g.out_w});
    std::vector<T> col(ckk * spatial);
    CMapR<T> wm(w.value().data(), O, ckk);
    for (std::size_t n = 0; n < N; ++n) {
        im2col(x.value().data() + n * C * H * W, g, col.data());
        MapR<T> om(out.data() + n * O * spatial, O, spatial);
        om.noalias() = wm * CMapR<T>(col.data(), ckk, spatial);
        if (b.defined()) om.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.value().data(), O);
    }

    std::vector<Var<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    return Var<T>::make(std::move(out), inputs, [g, N, O, ckk, spatial](ag::detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        const std::size_t img = g.channels * g.height * g.width;
        std::vector<T> col(ckk * spatial);
        CMapR<T> wm(wn.value.data(), O, ckk);
        for (std::size_t n = 0; n < N; ++n) {
            CMapR<T> dout(self.grad.data() + n * O * spatial, O, spatial);
            if (wn.requires_grad) {
                im2col(xn.value.data() + n * img, g, col.data());
                MapR<T>(wn.grad_buffer().data(), O, ckk).noalias() +=
                    dout * CMapR<T>(col.data(), ckk, spatial).transpose();
            }
            if (xn.requires_grad) {
                MapR<T>(col.data(), ckk, spatial).noalias() = wm.transpose() * dout;
                col2im(col.data(), g, xn.grad_buffer().data() + n * img);
            }
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            auto& db = self.inputs[2]->grad_buffer();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) {
                    const T* p = self.grad.data() + (n * O + o) * spatial;
                    T acc = 0;
                    for (std::size_t i = 0; i < spatial; ++i) acc += p[i];
                    db[o] += acc;
                }
        }
    });
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad, int output_pad) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    require(xs.size() == 4 && ws.size() == 4, "conv_transpose2d expects 4-D input and weight");
    require(ws[0] == xs[1], "conv_transpose2d channel mismatch");
    require(output_pad >= 0 && output_pad < stride, "output_pad must be in [0, stride)");
    const std::size_t N = xs[0], Cin = xs[1], H = xs[2], W = xs[3], O = ws[1];
    const int k = static_cast<int>(ws[2]);
    check_bias(b, O);
    const long oh = (static_cast<long>(H) - 1) * stride - 2 * pad + k + output_pad;
    const long ow = (static_cast<long>(W) - 1) * stride - 2 * pad + k + output_pad;
    require(oh > 0 && ow > 0, "conv_transpose2d produces empty output");
    // The column side is the (small) input; the image side is the output.
    ConvGeom g{O, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), k, stride, pad, H, W};
    const std::size_t spatial = H * W, okk = O * k * k, out_img = O * g.height * g.width;

    Tensor<T> out({N, O, g.height, g.width});
    std::vector<T> col(okk * spatial);
    CMapR<T> wm(w.value().data(), Cin, okk);
    for (std::size_t n = 0; n < N; ++n) {
        MapR<T>(col.data(), okk, spatial).noalias() =
            wm.transpose() * CMapR<T>(x.value().data() + n * Cin * spatial, Cin, spatial);
        T* dst = out.data() + n * out_img;
        col2im(col.data(), g, dst);
        if (b.defined())
            for (std::size_t o = 0; o < O; ++o) {
                T* p = dst + o * g.height * g.width;
                for (std::size_t i = 0; i < g.height * g.width; ++i) p[i] += b.value()[o];
            }
    }

    std::vector<Var<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    return Var<T>::make(std::move(out), inputs, [g, N, Cin, O, okk, spatial, out_img](ag::detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        std::vector<T> col(okk * spatial);
        CMapR<T> wm(wn.value.data(), Cin, okk);
        for (std::size_t n = 0; n < N; ++n) {
            im2col(self.grad.data() + n * out_img, g, col.data());
            CMapR<T> cm(col.data(), okk, spatial);
            if (xn.requires_grad)
                MapR<T>(xn.grad_buffer().data() + n * Cin * spatial, Cin, spatial).noalias() += wm * cm;
            if (wn.requires_grad)
                MapR<T>(wn.grad_buffer().data(), Cin, okk).noalias() +=
                    CMapR<T>(xn.value.data() + n * Cin * spatial, Cin, spatial) * cm.transpose();
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            auto& db = self.inputs[2]->grad_buffer();
            const std::size_t plane = g.height * g.width;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) {
                    const T* p = self.grad.data() + n * out_img + o * plane;
                    T acc = 0;
                    for (std::size_t i = 0; i < plane; ++i) acc += p[i];
                    db[o] += acc;
                }
        }
    });
}

template <typename T>
Var<T> reflect_pad(const Var<T>& x, int pad) {
    const auto& s = x.shape();
    require(s.size() == 4, "reflect_pad expects NCHW");
    const long H = static_cast<long>(s[2]), W = static_cast<long>(s[3]);
    require(pad >= 0 && pad < H && pad < W, "reflect_pad requires pad < spatial size");
    const std::size_t Ho = H + 2 * pad, Wo = W + 2 * pad, planes = s[0] * s[1];
    auto reflect = [](long i, long n) { return i < 0 ? -i : (i >= n ? 2 * n - 2 - i : i); };
    std::vector<long> rows(Ho), cols(Wo);
    for (std::size_t i = 0; i < Ho; ++i) rows[i] = reflect(static_cast<long>(i) - pad, H);
    for (std::size_t j = 0; j < Wo; ++j) cols[j] = reflect(static_cast<long>(j) - pad, W);

    Tensor<T> out({s[0], s[1], Ho, Wo});
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = x.value().data() + p * H * W;
        T* dst = out.data() + p * Ho * Wo;
        for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j) dst[i * Wo + j] = src[rows[i] * W + cols[j]];
    }
    return Var<T>::make(std::move(out), {x}, [rows, cols, planes, H, W, Ho, Wo](ag::detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p) {
            const T* src = self.grad.data() + p * Ho * Wo;
            T* dst = g.data() + p * H * W;
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j) dst[rows[i] * W + cols[j]] += src[i * Wo + j];
        }
    });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps) {
    const auto& s = x.shape();
    require(s.size() == 4, "instance_norm expects NCHW");
    const std::size_t planes = s[0] * s[1], M = s[2] * s[3];
    Tensor<T> out(s);
    std::vector<T> inv_std(planes);
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = x.value().data() + p * M;
        double mu = 0, var = 0;
        for (std::size_t i = 0; i < M; ++i) mu += src[i];
        mu /= static_cast<double>(M);
        for (std::size_t i = 0; i < M; ++i) var += (src[i] - mu) * (src[i] - mu);
        var /= static_cast<double>(M);
        const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
        inv_std[p] = static_cast<T>(is);
        T* dst = out.data() + p * M;
        for (std::size_t i = 0; i < M; ++i) dst[i] = static_cast<T>((src[i] - mu) * is);
    }
    return Var<T>::make(std::move(out), {x}, [inv_std, planes, M](ag::detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p) {
            const T* dy = self.grad.data() + p * M;
            const T* xh = self.value.data() + p * M;
            double sdy = 0, sdyx = 0;
            for (std::size_t i = 0; i < M; ++i) {
                sdy += dy[i];
                sdyx += dy[i] * xh[i];
            }
            const double mdy = sdy / M, mdyx = sdyx / M;
            T* dx = g.data() + p * M;
            for (std::size_t i = 0; i < M; ++i) dx[i] += static_cast<T>(inv_std[p] * (dy[i] - mdy - xh[i] * mdyx));
        }
    });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum, T eps) {
    const auto& s = x.shape();
    require(s.size() == 4, "batch_norm expects NCHW");
    const std::size_t N = s[0], C = s[1], HW = s[2] * s[3], M = N * HW;
    require(gamma.value().size() == C && beta.value().size() == C, "batch_norm affine size mismatch");
    require(running_mean.size() == C && running_var.size() == C, "batch_norm running stats size mismatch");

    std::vector<T> mean_c(C), inv_std(C);
    if (training) {
        require(M > 1, "batch_norm in training mode needs more than one value per channel");
        for (std::size_t c = 0; c < C; ++c) {
            double mu = 0, var = 0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = x.value().data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) mu += p[i];
            }
            mu /= static_cast<double>(M);
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = x.value().data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) var += (p[i] - mu) * (p[i] - mu);
            }
            const double biased = var / static_cast<double>(M);
            mean_c[c] = static_cast<T>(mu);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(biased + static_cast<double>(eps)));
            const double unbiased = var / static_cast<double>(M - 1);
            running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * mu);
            running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * unbiased);
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean_c[c] = running_mean[c];
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps));
        }
    }

    Tensor<T> xhat(s), out(s);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * HW;
            const T g = gamma.value()[c], bt = beta.value()[c];
            for (std::size_t i = 0; i < HW; ++i) {
                const T h = (x.value()[off + i] - mean_c[c]) * inv_std[c];
                xhat[off + i] = h;
                out[off + i] = g * h + bt;
            }
        }

    return Var<T>::make(
        std::move(out), {x, gamma, beta},
        [xhat = std::move(xhat), inv_std, training, N, C, HW, M](ag::detail::Node<T>& self) {
            auto& xn = *self.inputs[0];
            auto& gn = *self.inputs[1];
            auto& bn = *self.inputs[2];
            for (std::size_t c = 0; c < C; ++c) {
                double sdy = 0, sdyx = 0;
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        sdy += self.grad[off + i];
                        sdyx += self.grad[off + i] * xhat[off + i];
                    }
                }
                if (gn.requires_grad) gn.grad_buffer()[c] += static_cast<T>(sdyx);
                if (bn.requires_grad) bn.grad_buffer()[c] += static_cast<T>(sdy);
                if (!xn.requires_grad) continue;
                auto& dx = xn.grad_buffer();
                const double g = gn.value[c];
                const double k = g * inv_std[c];
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        if (training)
                            dx[off + i] += static_cast<T>(k * (self.grad[off + i] - sdy / M - xhat[off + i] * sdyx / M));
                        else
                            dx[off + i] += static_cast<T>(k * self.grad[off + i]);
                    }
                }
            }
        });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] > T(0) ? x.value()[i] : T(0);
    return Var<T>::make(std::move(out), {x}, [](ag::detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (self.value[i] > T(0)) g[i] += self.grad[i];
    });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x.value()[i];
        out[i] = v > T(0) ? v : slope * v;
    }
    return Var<T>::make(std::move(out), {x}, [slope](ag::detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += in.value[i] > T(0) ? self.grad[i] : slope * self.grad[i];
    });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.value()[i]);
    return Var<T>::make(std::move(out), {x}, [](ag::detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (T(1) - self.value[i] * self.value[i]);
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x.value()[i]));
    return Var<T>::make(std::move(out), {x}, [](ag::detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i] * (T(1) - self.value[i]);
    });
}

template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& g) {
    const auto& s = x.shape();
    require(s.size() == 4, "channel_scale expects NCHW input");
    require(g.shape().size() == 2 && g.dim(0) == s[0] && g.dim(1) == s[1],
            "gate shape " + shape_str(g.shape()) + " does not match channels of " + shape_str(s));
    const std::size_t planes = s[0] * s[1], HW = s[2] * s[3];
    Tensor<T> out(s);
    for (std::size_t p = 0; p < planes; ++p) {
        const T gv = g.value()[p];
        const T* src = x.value().data() + p * HW;
        T* dst = out.data() + p * HW;
        for (std::size_t i = 0; i < HW; ++i) dst[i] = gv * src[i];
    }
    return Var<T>::make(std::move(out), {x, g}, [planes, HW](ag::detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& gn = *self.inputs[1];
        for (std::size_t p = 0; p < planes; ++p) {
            const T* dy = self.grad.data() + p * HW;
            if (xn.requires_grad) {
                T* dx = xn.grad_buffer().data() + p * HW;
                const T gv = gn.value[p];
                for (std::size_t i = 0; i < HW; ++i) dx[i] += gv * dy[i];
            }
            if (gn.requires_grad) {
                const T* xv = xn.value.data() + p * HW;
                T acc = 0;
                for (std::size_t i = 0; i < HW; ++i) acc += dy[i] * xv[i];
                gn.grad_buffer()[p] += acc;
            }
        }
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require(a.shape() == b.shape(), "add shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return Var<T>::make(std::move(out), {a, b}, [](ag::detail::Node<T>& self) {
        for (auto& in : self.inputs) {
            if (!in->requires_grad) continue;
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x.value()[i];
    return Var<T>::make(std::move(out), {x}, [s](ag::detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    require(x.shape().size() == 2 && w.shape().size() == 2, "linear expects [N, D] input and [O, D] weight");
    const std::size_t N = x.dim(0), D = x.dim(1), O = w.dim(0);
    require(w.dim(1) == D, "linear input width " + std::to_string(D) + " vs weight " + shape_str(w.shape()));
    check_bias(b, O);
    Tensor<T> out({N, O});
    MapR<T> om(out.data(), N, O);
    om.noalias() = CMapR<T>(x.value().data(), N, D) * CMapR<T>(w.value().data(), O, D).transpose();
    if (b.defined()) om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), O);
    std::vector<Var<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    return Var<T>::make(std::move(out), inputs, [N, D, O](ag::detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        CMapR<T> dy(self.grad.data(), N, O);
        if (xn.requires_grad) MapR<T>(xn.grad_buffer().data(), N, D).noalias() += dy * CMapR<T>(wn.value.data(), O, D);
        if (wn.requires_grad)
            MapR<T>(wn.grad_buffer().data(), O, D).noalias() += dy.transpose() * CMapR<T>(xn.value.data(), N, D);
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            auto& db = self.inputs[2]->grad_buffer();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) db[o] += self.grad[n * O + o];
        }
    });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    const auto& s = x.shape();
    require(s.size() == 4, "global_avg_pool expects NCHW");
    const std::size_t planes = s[0] * s[1], HW = s[2] * s[3];
    Tensor<T> out({s[0], s[1]});
    for (std::size_t p = 0; p < planes; ++p) {
        double acc = 0;
        for (std::size_t i = 0; i < HW; ++i) acc += x.value()[p * HW + i];
        out[p] = static_cast<T>(acc / HW);
    }
    return Var<T>::make(std::move(out), {x}, [planes, HW](ag::detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p) {
            const T v = self.grad[p] / static_cast<T>(HW);
            for (std::size_t i = 0; i < HW; ++i) g[p * HW + i] += v;
        }
    });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
    require(logits.rank() == 2, "softmax expects [N, K]");
    const std::size_t N = logits.dim(0), K = logits.dim(1);
    Tensor<T> out(logits.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const T* z = logits.data() + n * K;
        T mx = *std::max_element(z, z + K);
        double sum = 0;
        for (std::size_t k = 0; k < K; ++k) sum += std::exp(static_cast<double>(z[k] - mx));
        for (std::size_t k = 0; k < K; ++k) out[n * K + k] = static_cast<T>(std::exp(static_cast<double>(z[k] - mx)) / sum);
    }
    return out;
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    require(logits.shape().size() == 2, "cross entropy expects [N, K] logits");
    const std::size_t N = logits.dim(0), K = logits.dim(1);
    require(labels.size() == N, "cross entropy label count mismatch");
    for (int l : labels) require(l >= 0 && static_cast<std::size_t>(l) < K, "class label out of range");
    Tensor<T> probs = softmax(logits.value());
    double loss = 0;
    for (std::size_t n = 0; n < N; ++n) {
        const T* z = logits.value().data() + n * K;
        const double mx = *std::max_element(z, z + K);
        double lse = 0;
        for (std::size_t k = 0; k < K; ++k) lse += std::exp(z[k] - mx);
        loss += mx + std::log(lse) - z[labels[n]];
    }
    Tensor<T> out({1}, static_cast<T>(loss / N));
    return Var<T>::make(std::move(out), {logits}, [probs = std::move(probs), labels, N, K](ag::detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const T s = self.grad[0] / static_cast<T>(N);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < K; ++k)
                g[n * K + k] += s * (probs[n * K + k] - (static_cast<int>(k) == labels[n] ? T(1) : T(0)));
    });
}

template <typename T>
Var<T> mse_to_constant(const Var<T>& x, T target) {
    require(x.value().size() > 0, "mean over empty tensor");
    const std::size_t M = x.value().size();
    double acc = 0;
    for (std::size_t i = 0; i < M; ++i) {
        const double d = x.value()[i] - target;
        acc += d * d;
    }
    return Var<T>::make(Tensor<T>({1}, static_cast<T>(acc / M)), {x}, [target, M](ag::detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        const T s = T(2) * self.grad[0] / static_cast<T>(M);
        for (std::size_t i = 0; i < M; ++i) g[i] += s * (in.value[i] - target);
    });
}

template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
    require(a.shape() == b.shape(), "mean_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    require(a.value().size() > 0, "mean over empty tensor");
    const std::size_t M = a.value().size();
    double acc = 0;
    for (std::size_t i = 0; i < M; ++i) acc += std::abs(static_cast<double>(a.value()[i]) - b.value()[i]);
    return Var<T>::make(Tensor<T>({1}, static_cast<T>(acc / M)), {a, b}, [M](ag::detail::Node<T>& self) {
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        const T s = self.grad[0] / static_cast<T>(M);
        for (std::size_t i = 0; i < M; ++i) {
            const T d = an.value[i] - bn.value[i];
            const T sg = d > T(0) ? s : (d < T(0) ? -s : T(0));
            if (an.requires_grad) an.grad_buffer()[i] += sg;
            if (bn.requires_grad) bn.grad_buffer()[i] -= sg;
        }
    });
}

template <typename T>
Var<T> batch_mean_l1(const Var<T>& x) {
    require(!x.shape().empty() && x.dim(0) > 0, "batch_mean_l1 needs a batch dimension");
    const std::size_t N = x.dim(0), M = x.value().size();
    double acc = 0;
    for (std::size_t i = 0; i < M; ++i) acc += std::abs(static_cast<double>(x.value()[i]));
    return Var<T>::make(Tensor<T>({1}, static_cast<T>(acc / N)), {x}, [N, M](ag::detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        const T s = self.grad[0] / static_cast<T>(N);
        for (std::size_t i = 0; i < M; ++i) g[i] += in.value[i] > T(0) ? s : (in.value[i] < T(0) ? -s : T(0));
    });
}

template <typename T>
Var<T> mean_log(const Var<T>& x, T floor) {
    require(x.value().size() > 0, "mean over empty tensor");
    const std::size_t M = x.value().size();
    double acc = 0;
    for (std::size_t i = 0; i < M; ++i) acc += std::log(std::max(static_cast<double>(x.value()[i]), static_cast<double>(floor)));
    return Var<T>::make(Tensor<T>({1}, static_cast<T>(acc / M)), {x}, [floor, M](ag::detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < M; ++i)
            if (in.value[i] > floor) g[i] += self.grad[0] / (static_cast<T>(M) * in.value[i]);
    });
}

template <typename T>
Var<T> mean_log1m(const Var<T>& x, T floor) {
    require(x.value().size() > 0, "mean over empty tensor");
    const std::size_t M = x.value().size();
    double acc = 0;
    for (std::size_t i = 0; i < M; ++i)
        acc += std::log(std::max(1.0 - static_cast<double>(x.value()[i]), static_cast<double>(floor)));
    return Var<T>::make(Tensor<T>({1}, static_cast<T>(acc / M)), {x}, [floor, M](ag::detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < M; ++i)
            if (T(1) - in.value[i] > floor) g[i] -= self.grad[0] / (static_cast<T>(M) * (T(1) - in.value[i]));
    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    require(x.value().size() > 0, "mean over empty tensor");
    const std::size_t M = x.value().size();
    double acc = 0;
    for (std::size_t i = 0; i < M; ++i) acc += x.value()[i];
    return Var<T>::make(Tensor<T>({1}, static_cast<T>(acc / M)), {x}, [M](ag::detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < M; ++i) g[i] += self.grad[0] / static_cast<T>(M);
    });
}

template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, const std::vector<T>& weights) {
    require(xs.size() == weights.size(), "weighted_sum arity mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        require(xs[i].value().size() == 1, "weighted_sum expects scalars");
        acc += static_cast<double>(weights[i]) * xs[i].value()[0];
    }
    return Var<T>::make(Tensor<T>({1}, static_cast<T>(acc)), xs, [weights](ag::detail::Node<T>& self) {
        for (std::size_t i = 0; i < self.inputs.size(); ++i)
            if (self.inputs[i]->requires_grad) self.inputs[i]->grad_buffer()[0] += weights[i] * self.grad[0];
    });
}

template <typename T>
Var<T> dot_constant(const Var<T>& x, const Tensor<T>& r) {
    require(x.value().size() == r.size(), "dot_constant size mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < r.size(); ++i) acc += static_cast<double>(x.value()[i]) * r[i];
    return Var<T>::make(Tensor<T>({1}, static_cast<T>(acc)), {x}, [r](ag::detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < r.size(); ++i) g[i] += self.grad[0] * r[i];
    });
}

#define DOCMOE_INSTANTIATE_OPS(T)                                                                                     \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                                   \
    template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int, int);                    \
    template Var<T> reflect_pad(const Var<T>&, int);                                                                  \
    template Var<T> instance_norm(const Var<T>&, T);                                                                  \
    template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&, bool, T, T);     \
    template Var<T> relu(const Var<T>&);                                                                              \
    template Var<T> leaky_relu(const Var<T>&, T);                                                                     \
    template Var<T> tanh(const Var<T>&);                                                                              \
    template Var<T> sigmoid(const Var<T>&);                                                                           \
    template Var<T> channel_scale(const Var<T>&, const Var<T>&);                                                      \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                                \
    template Var<T> scale(const Var<T>&, T);                                                                          \
    template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                             \
    template Var<T> global_avg_pool(const Var<T>&);                                                                   \
    template Var<T> softmax_cross_entropy(const Var<T>&, const std::vector<int>&);                                   \
    template Var<T> mse_to_constant(const Var<T>&, T);                                                                \
    template Var<T> mean_abs_diff(const Var<T>&, const Var<T>&);                                                      \
    template Var<T> batch_mean_l1(const Var<T>&);                                                                     \
    template Var<T> mean_log(const Var<T>&, T);                                                                       \
    template Var<T> mean_log1m(const Var<T>&, T);                                                                     \
    template Var<T> mean(const Var<T>&);                                                                              \
    template Var<T> weighted_sum(const std::vector<Var<T>>&, const std::vector<T>&);                                 \
    template Var<T> dot_constant(const Var<T>&, const Tensor<T>&);                                                    \
    template Tensor<T> softmax(const Tensor<T>&);

DOCMOE_INSTANTIATE_OPS(float)
DOCMOE_INSTANTIATE_OPS(double)

}  // namespace docmoe::ops
