#include "longiseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "autodiff_internal.hpp"
#include "longiseg/error.hpp"
#include "longiseg/kernels.hpp"
#include "longiseg/ops.hpp"
#include "longiseg/random.hpp"
#include "longiseg/threading.hpp"

namespace longiseg {

namespace {

namespace lk = longiseg::kernels;
using detail::attach;
using detail::new_node;

template <typename T>
void check_loss_pair(const char* op, const Tensor<T>& pred, const Tensor<T>& target) {
    if (!pred.defined() || pred.shape().size() != 5)
        throw ShapeError(std::string(op) + ": prediction must be rank-5 N×C×D×H×W, got " +
                         (pred.defined() ? shape_str(pred.shape()) : std::string("undefined")));
    if (!target.defined() || target.shape() != pred.shape())
        throw ShapeError(std::string(op) + ": target shape " +
                         (target.defined() ? shape_str(target.shape()) : std::string("undefined")) +
                         " must match prediction shape " + shape_str(pred.shape()));
    if (pred.dim(1) < 2)
        throw ShapeError(std::string(op) + ": need at least 2 classes, got " +
                         std::to_string(pred.dim(1)));
    if (target.requires_grad())
        throw UsageError(std::string(op) + ": differentiating through the target is not supported");
}

template <typename T>
void check_labels(const char* op, const Tensor<T>& labels) {
    if (!labels.defined() || labels.shape().size() != 5 || labels.dim(1) != 1)
        throw ShapeError(std::string(op) + ": labels must be rank-5 N×1×D×H×W, got " +
                         (labels.defined() ? shape_str(labels.shape()) : std::string("undefined")));
}

}  // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0))
        throw ConfigError("training: learning rate must be positive");
    if (weight_decay < 0.0)
        throw ConfigError("training: weight decay must be non-negative");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("training: betas must lie in [0, 1)");
    if (!(adam_eps > 0.0))
        throw ConfigError("training: optimizer epsilon must be positive");
    if (epochs < 1)
        throw ConfigError("training: epochs must be >= 1");
    if (patches_per_sample < 1 || batch_size < 1)
        throw ConfigError("training: patches per sample and batch size must be >= 1");
    if (grad_clip < 0.0)
        throw ConfigError("training: gradient clip must be >= 0 (0 disables)");
    if (repeats < 1)
        throw ConfigError("training: repeats must be >= 1");
    patch.validate();
    augment.validate();
}

// --------------------------------------------------------------- dice loss

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& target_onehot, double smooth) {
    check_loss_pair("dice_loss", probs, target_onehot);
    if (smooth <= 0.0)
        throw ConfigError("dice_loss: smooth term must be positive");

    const std::int64_t N = probs.dim(0), C = probs.dim(1);
    const std::int64_t sp = probs.dim(2) * probs.dim(3) * probs.dim(4);
    const std::int64_t n_fg = C - 1;
    const T* p = probs.data().data();
    const T* t = target_onehot.data().data();

    // Pooled per-class sums; per-(n,c) partials keep the accumulation order
    // fixed regardless of worker count.
    std::vector<double> sum_pt(std::size_t(C), 0.0), sum_p(std::size_t(C), 0.0),
        sum_t(std::size_t(C), 0.0);
    for (std::int64_t c = 1; c < C; ++c) {
        std::vector<double> part_pt(std::size_t(N), 0.0), part_p(std::size_t(N), 0.0),
            part_t(std::size_t(N), 0.0);
        parallel_for(N, [&](std::int64_t nb, std::int64_t ne) {
            for (std::int64_t n = nb; n < ne; ++n) {
                const T* pc = p + (n * C + c) * sp;
                const T* tc = t + (n * C + c) * sp;
                double apt = 0.0, ap = 0.0, at = 0.0;
                for (std::int64_t i = 0; i < sp; ++i) {
                    apt += double(pc[i]) * double(tc[i]);
                    ap += double(pc[i]);
                    at += double(tc[i]);
                }
                part_pt[std::size_t(n)] = apt;
                part_p[std::size_t(n)] = ap;
                part_t[std::size_t(n)] = at;
            }
        });
        for (std::int64_t n = 0; n < N; ++n) {
            sum_pt[std::size_t(c)] += part_pt[std::size_t(n)];
            sum_p[std::size_t(c)] += part_p[std::size_t(n)];
            sum_t[std::size_t(c)] += part_t[std::size_t(n)];
        }
    }

    std::vector<double> num(std::size_t(C), 0.0), den(std::size_t(C), 0.0);
    double mean_dice = 0.0;
    for (std::int64_t c = 1; c < C; ++c) {
        num[std::size_t(c)] = 2.0 * sum_pt[std::size_t(c)] + smooth;
        den[std::size_t(c)] = sum_p[std::size_t(c)] + sum_t[std::size_t(c)] + smooth;
        mean_dice += num[std::size_t(c)] / den[std::size_t(c)] / double(n_fg);
    }

    auto out = new_node<T>({1});
    out->value[0] = T(1.0 - mean_dice);

    auto* pn = probs.raw();
    auto* on = out.get();
    auto backward = [pn, on, t, num = std::move(num), den = std::move(den), N, C, sp, n_fg]() {
        if (!pn->requires_grad)
            return;
        const double go = double(on->grad[0]);
        T* g = pn->grad_ref().data();
        parallel_for(N * C * sp, [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t i = b; i < e; ++i) {
                const std::int64_t c = (i / sp) % C;
                if (c == 0)
                    continue;
                const double d = den[std::size_t(c)];
                const double ddice_dp =
                    (2.0 * double(t[i]) * d - num[std::size_t(c)]) / (d * d);
                g[i] += T(-go * ddice_dp / double(n_fg));
            }
        });
    };
    return attach("dice_loss", std::move(out), {probs.node(), target_onehot.node()},
                  std::move(backward));
}

// ------------------------------------------------------------ cross-entropy

template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, const Tensor<T>& target_onehot) {
    check_loss_pair("ce_loss", logits, target_onehot);

    const std::int64_t N = logits.dim(0), C = logits.dim(1);
    const std::int64_t sp = logits.dim(2) * logits.dim(3) * logits.dim(4);
    const std::int64_t nvox = N * sp;
    const T* l = logits.data().data();
    const T* t = target_onehot.data().data();

    // Per-voxel -log p(target) via log-sum-exp, then one fixed-order sum.
    std::vector<double> per_voxel(std::size_t(nvox), 0.0);
    parallel_for(nvox, [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t v = b; v < e; ++v) {
            const std::int64_t n = v / sp, i = v % sp;
            const T* lv = l + n * C * sp + i;
            double mx = double(lv[0]);
            for (std::int64_t c = 1; c < C; ++c)
                mx = std::max(mx, double(lv[c * sp]));
            double se = 0.0, dot = 0.0;
            for (std::int64_t c = 0; c < C; ++c) {
                se += std::exp(double(lv[c * sp]) - mx);
                dot += double(t[n * C * sp + c * sp + i]) * double(lv[c * sp]);
            }
            per_voxel[std::size_t(v)] = mx + std::log(se) - dot;
        }
    });

    auto out = new_node<T>({1});
    out->value[0] = T(lk::sum(per_voxel.data(), per_voxel.size()) / double(nvox));

    auto* ln = logits.raw();
    auto* on = out.get();
    auto backward = [ln, on, t, N, C, sp, nvox]() {
        if (!ln->requires_grad)
            return;
        const double go = double(on->grad[0]) / double(nvox);
        const T* lv0 = ln->value.data();
        T* g = ln->grad_ref().data();
        parallel_for(N * sp, [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t v = b; v < e; ++v) {
                const std::int64_t n = v / sp, i = v % sp;
                const T* lv = lv0 + n * C * sp + i;
                double mx = double(lv[0]);
                for (std::int64_t c = 1; c < C; ++c)
                    mx = std::max(mx, double(lv[c * sp]));
                double se = 0.0;
                for (std::int64_t c = 0; c < C; ++c)
                    se += std::exp(double(lv[c * sp]) - mx);
                for (std::int64_t c = 0; c < C; ++c) {
                    const double soft = std::exp(double(lv[c * sp]) - mx) / se;
                    const std::int64_t idx = n * C * sp + c * sp + i;
                    g[idx] += T(go * (soft - double(t[idx])));
                }
            }
        });
    };
    return attach("ce_loss", std::move(out), {logits.node(), target_onehot.node()},
                  std::move(backward));
}

// -------------------------------------------------------- label utilities

template <typename T>
Tensor<T> downsample_labels(const Tensor<T>& labels, int factor) {
    check_labels("downsample_labels", labels);
    if (factor < 1)
        throw ConfigError("downsample_labels: factor must be >= 1");
    const std::int64_t N = labels.dim(0), D = labels.dim(2), H = labels.dim(3),
                       W = labels.dim(4);
    const std::int64_t f = factor;
    if (D % f || H % f || W % f)
        throw ShapeError("downsample_labels: dims " + shape_str(labels.shape()) +
                         " are not divisible by factor " + std::to_string(factor));
    if (f == 1)
        return Tensor<T>::from_data(labels.shape(), labels.data());

    const std::int64_t d = D / f, h = H / f, w = W / f;
    std::vector<T> out(std::size_t(N * d * h * w));
    const T* src = labels.data().data();
    // Voxel-center nearest neighbor: (i+0.5)*f - 0.5 rounds to i*f + f/2.
    const std::int64_t off = f / 2;
    parallel_for(N * d * h * w, [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t i = b; i < e; ++i) {
            std::int64_t r = i;
            const std::int64_t x = r % w;
            r /= w;
            const std::int64_t y = r % h;
            r /= h;
            const std::int64_t z = r % d;
            const std::int64_t n = r / d;
            out[std::size_t(i)] =
                src[((n * D + z * f + off) * H + y * f + off) * W + x * f + off];
        }
    });
    return Tensor<T>::from_data({N, 1, d, h, w}, std::move(out));
}

template <typename T>
Tensor<T> one_hot_labels(const Tensor<T>& labels, int n_classes) {
    check_labels("one_hot_labels", labels);
    if (n_classes < 2)
        throw ConfigError("one_hot_labels: need at least 2 classes");
    const std::int64_t N = labels.dim(0), D = labels.dim(2), H = labels.dim(3),
                       W = labels.dim(4);
    const std::int64_t sp = D * H * W, C = n_classes;
    std::vector<T> out(std::size_t(N * C * sp), T(0));
    const T* src = labels.data().data();
    for (std::int64_t v = 0; v < N * sp; ++v) {
        const double raw = double(src[v]);
        const std::int64_t cls = std::llround(raw);
        if (std::fabs(raw - double(cls)) > 1e-6 || cls < 0 || cls >= C)
            throw DataError("one_hot_labels: label value " + std::to_string(raw) +
                            " is outside [0, " + std::to_string(n_classes) + ")");
        const std::int64_t n = v / sp, i = v % sp;
        out[std::size_t(n * C * sp + cls * sp + i)] = T(1);
    }
    return Tensor<T>::from_data({N, C, D, H, W}, std::move(out));
}

// ------------------------------------------------------------ compound loss

template <typename T>
Tensor<T> compound_loss(const std::vector<Tensor<T>>& head_logits, const Tensor<T>& labels) {
    if (head_logits.size() != 4)
        throw ConfigError("compound_loss: expected exactly 4 prediction heads, got " +
                          std::to_string(head_logits.size()));
    check_labels("compound_loss", labels);

    const std::int64_t C = head_logits[0].dim(1);
    Tensor<T> total;
    for (std::size_t k = 0; k < head_logits.size(); ++k) {
        const int f = 1 << k;
        const auto& logits = head_logits[k];
        auto tgt = downsample_labels(labels, f);
        const Shape want{labels.dim(0), C, tgt.dim(2), tgt.dim(3), tgt.dim(4)};
        if (!logits.defined() || logits.shape() != want)
            throw ShapeError("compound_loss: head " + std::to_string(k) + " has shape " +
                             (logits.defined() ? shape_str(logits.shape())
                                               : std::string("undefined")) +
                             ", expected " + shape_str(want));
        auto onehot = one_hot_labels(tgt, int(C));
        auto term = add(ce_loss(logits, onehot), dice_loss(softmax_channel(logits), onehot));
        if (k > 0)
            term = scale(term, 1.0 / double(f));
        total = k == 0 ? term : add(total, term);
    }
    return total;
}

// ---------------------------------------------------------------- optimizer

double cosine_lr(int epoch, int total_epochs, double lr0, double lr_min) {
    if (total_epochs < 1)
        throw UsageError("cosine_lr: total_epochs must be >= 1");
    const double phase = std::numbers::pi * double(epoch) / double(total_epochs);
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(phase));
}

template <typename T>
OptimizerState<T> OptimizerState<T>::init(const std::vector<Tensor<T>>& params) {
    OptimizerState<T> s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params) {
        s.m.emplace_back(p.data().size(), T(0));
        s.v.emplace_back(p.data().size(), T(0));
    }
    return s;
}

template <typename T>
double clip_gradients(std::vector<Tensor<T>>& params, double max_norm) {
    if (!(max_norm > 0.0))
        throw UsageError("clip_gradients: max_norm must be positive");
    double sq = 0.0;
    for (auto& p : params)
        for (const T g : p.grad())
            sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const T factor = T(max_norm / norm);
        for (auto& p : params)
            for (T& g : p.grad())
                g *= factor;
    }
    return norm;
}

template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state, const TrainConfig& cfg,
                double lr) {
    if (state.m.empty() && state.v.empty() && state.step == 0)
        state = OptimizerState<T>::init(params);
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw UsageError("adamw_step: optimizer state tracks " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));

    state.step += 1;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, double(state.step));
    const double bc2 = 1.0 - std::pow(b2, double(state.step));
    const double decay = 1.0 - lr * cfg.weight_decay;

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = params[pi].data();
        const auto& grad = params[pi].grad();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        if (m.size() != data.size())
            throw UsageError("adamw_step: moment size mismatch on parameter " +
                             std::to_string(pi));
        parallel_for(std::int64_t(data.size()), [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t i = b; i < e; ++i) {
                const double g = double(grad[std::size_t(i)]);
                const double mi = b1 * double(m[std::size_t(i)]) + (1.0 - b1) * g;
                const double vi = b2 * double(v[std::size_t(i)]) + (1.0 - b2) * g * g;
                m[std::size_t(i)] = T(mi);
                v[std::size_t(i)] = T(vi);
                double x = double(data[std::size_t(i)]) * decay;  // decoupled decay first
                x -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps);
                data[std::size_t(i)] = T(x);
            }
        });
    }
}

// ------------------------------------------------------- cross-validation

std::vector<int> crossval_split(const std::vector<CaseRecord>& cases, int n_folds,
                                std::uint64_t seed) {
    if (n_folds < 2)
        throw ConfigError("crossval_split: need at least 2 folds");
    if (cases.empty())
        throw ConfigError("crossval_split: no cases to split");

    // Patients in first-appearance order, then a seeded Fisher-Yates shuffle.
    std::vector<std::string> patients;
    std::unordered_map<std::string, std::size_t> index;
    for (const auto& c : cases) {
        if (c.patient_id.empty())
            throw DataError("crossval_split: case '" + c.case_id + "' has no patient id");
        if (index.emplace(c.patient_id, patients.size()).second)
            patients.push_back(c.patient_id);
    }
    std::mt19937_64 g(seed);
    std::vector<std::size_t> order(patients.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[std::size_t(uniform_below(g, std::uint64_t(i)))]);

    std::vector<int> patient_fold(patients.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos)
        patient_fold[order[pos]] = int(pos % std::size_t(n_folds));

    std::vector<int> folds(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i)
        folds[i] = patient_fold[index.at(cases[i].patient_id)];
    return folds;
}

// ------------------------------------------------- explicit instantiations

#define LONGISEG_INSTANTIATE_TRAINING(T)                                                       \
    template struct OptimizerState<T>;                                                         \
    template Tensor<T> dice_loss<T>(const Tensor<T>&, const Tensor<T>&, double);               \
    template Tensor<T> ce_loss<T>(const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> downsample_labels<T>(const Tensor<T>&, int);                           \
    template Tensor<T> one_hot_labels<T>(const Tensor<T>&, int);                              \
    template Tensor<T> compound_loss<T>(const std::vector<Tensor<T>>&, const Tensor<T>&);     \
    template double clip_gradients<T>(std::vector<Tensor<T>>&, double);                       \
    template void adamw_step<T>(std::vector<Tensor<T>>&, OptimizerState<T>&,                  \
                                const TrainConfig&, double);

LONGISEG_INSTANTIATE_TRAINING(float)
LONGISEG_INSTANTIATE_TRAINING(double)

#undef LONGISEG_INSTANTIATE_TRAINING

}  // namespace longiseg
