#ifndef PICOSAM_LOSS_HPP
#define PICOSAM_LOSS_HPP

#include <algorithm>
#include <cmath>
#include <string>

#include "ops.hpp"

namespace picosam {

template <std::floating_point T>
struct LossValue {
    T loss = 0;
    Tensor<T> grad; // dL/d(student logits)
};

namespace detail {

template <std::floating_point T>
void check_pair(const Tensor<T>& s, const Tensor<T>& other, const char* what) {
    require_same_shape(s, other, what);
    if (s.empty()) throw DomainError(std::string(what) + ": empty input");
}

template <std::floating_point T>
void check_binary(const Tensor<T>& gt, const char* what) {
    for (std::size_t i = 0; i < gt.numel(); ++i) {
        if (gt[i] != T(0) && gt[i] != T(1)) {
            throw DomainError(std::string(what) + ": ground-truth mask is not binary at element " +
                              std::to_string(i));
        }
    }
}

} // namespace detail

// mean((s - t)^2) on logits.
template <std::floating_point T>
LossValue<T> mse_logits(const Tensor<T>& student, const Tensor<T>& teacher) {
    detail::check_pair(student, teacher, "mse_logits");
    const auto n = static_cast<T>(student.numel());
    LossValue<T> r{T(0), Tensor<T>(student.shape())};
    for (std::size_t i = 0; i < student.numel(); ++i) {
        const T d = student[i] - teacher[i];
        if (!std::isfinite(teacher[i])) throw DomainError("mse_logits: non-finite teacher logit at " + std::to_string(i));
        r.loss += d * d;
        r.grad[i] = T(2) * d / n;
    }
    r.loss /= n;
    return r;
}

// Class-balanced BCE on logits. Positives and negatives are weighted by
// N/(2*count) so each class contributes half of the total weight; with an
// even split both weights are exactly 1.
template <std::floating_point T>
LossValue<T> balanced_bce(const Tensor<T>& logits, const Tensor<T>& gt) {
    detail::check_pair(logits, gt, "balanced_bce");
    detail::check_binary(gt, "balanced_bce");
    const std::size_t n = logits.numel();
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) pos += gt[i] == T(1);
    const std::size_t neg = n - pos;
    const T nn = static_cast<T>(n);
    const T w_pos = nn / (T(2) * static_cast<T>(std::max<std::size_t>(pos, 1)));
    const T w_neg = nn / (T(2) * static_cast<T>(std::max<std::size_t>(neg, 1)));

    LossValue<T> r{T(0), Tensor<T>(logits.shape())};
    for (std::size_t i = 0; i < n; ++i) {
        const T s = logits[i];
        if (gt[i] == T(1)) {
            r.loss += w_pos * softplus(-s);
            r.grad[i] = -w_pos * (T(1) - sigmoid(s)) / nn;
        } else {
            r.loss += w_neg * softplus(s);
            r.grad[i] = w_neg * sigmoid(s) / nn;
        }
    }
    r.loss /= nn;
    return r;
}

// 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), p = sigmoid(logits).
template <std::floating_point T>
LossValue<T> dice_loss(const Tensor<T>& logits, const Tensor<T>& gt, T eps = T(1)) {
    detail::check_pair(logits, gt, "dice_loss");
    detail::check_binary(gt, "dice_loss");
    const std::size_t n = logits.numel();
    Tensor<T> p = sigmoid(logits);
    T inter = 0, sp = 0, sg = 0;
    for (std::size_t i = 0; i < n; ++i) {
        inter += p[i] * gt[i];
        sp += p[i];
        sg += gt[i];
    }
    const T num = T(2) * inter + eps;
    const T den = sp + sg + eps;
    LossValue<T> r{T(1) - num / den, Tensor<T>(logits.shape())};
    const T den2 = den * den;
    for (std::size_t i = 0; i < n; ++i) {
        const T dp = -(T(2) * gt[i] * den - num) / den2;
        r.grad[i] = dp * p[i] * (T(1) - p[i]);
    }
    return r;
}

// Maps teacher confidence onto the blend factor between the teacher term
// and the ground-truth term.
struct LambdaPolicy {
    double lambda_min = 0.2;
    double lambda_max = 0.8;

    void validate() const {
        if (!(lambda_min >= 0.0 && lambda_max <= 1.0 && lambda_min <= lambda_max)) {
            throw ConfigError("lambda policy needs 0 <= lambda_min <= lambda_max <= 1, got [" +
                              std::to_string(lambda_min) + ", " + std::to_string(lambda_max) + "]");
        }
    }
};

// Teacher confidence c = mean |2 sigmoid(t) - 1|, mapped affinely onto
// [lambda_min, lambda_max].
template <std::floating_point T>
T teacher_confidence_lambda(const Tensor<T>& teacher, const LambdaPolicy& policy) {
    policy.validate();
    if (teacher.empty()) throw DomainError("teacher_confidence_lambda: empty teacher map");
    T c = 0;
    for (auto t : teacher.data()) {
        if (!std::isfinite(t)) throw DomainError("teacher_confidence_lambda: non-finite teacher logit");
        c += std::abs(T(2) * sigmoid(t) - T(1));
    }
    c /= static_cast<T>(teacher.numel());
    const T lo = static_cast<T>(policy.lambda_min), hi = static_cast<T>(policy.lambda_max);
    return std::clamp(lo + (hi - lo) * c, lo, hi);
}

template <std::floating_point T>
struct TotalLoss {
    T loss = 0;
    Tensor<T> grad;
    T lambda = 0;
    T mse = 0, bce = 0, dice = 0;
};

// Blend of the three components for a fixed lambda. lambda is a constant
// with respect to the student.
template <std::floating_point T>
TotalLoss<T> blend_losses(const LossValue<T>* mse, const LossValue<T>& bce, const LossValue<T>& dice, T lambda) {
    TotalLoss<T> r;
    r.lambda = lambda;
    r.mse = mse ? mse->loss : T(0);
    r.bce = bce.loss;
    r.dice = dice.loss;
    r.loss = lambda * r.mse + (T(1) - lambda) * (T(0.5) * r.bce + T(0.5) * r.dice);
    r.grad = Tensor<T>(bce.grad.shape());
    for (std::size_t i = 0; i < r.grad.numel(); ++i) {
        const T m = mse ? mse->grad[i] : T(0);
        r.grad[i] = lambda * m + (T(1) - lambda) * (T(0.5) * bce.grad[i] + T(0.5) * dice.grad[i]);
    }
    return r;
}

// lambda * MSE(student, teacher) + (1 - lambda) * (0.5 BCE + 0.5 Dice).
template <std::floating_point T>
TotalLoss<T> total_loss(const Tensor<T>& student, const Tensor<T>& teacher, const Tensor<T>& gt,
                        const LambdaPolicy& policy) {
    require_same_shape(student, teacher, "total_loss");
    require_same_shape(student, gt, "total_loss");
    const T lambda = teacher_confidence_lambda(teacher, policy);
    const auto mse = mse_logits(student, teacher);
    const auto bce = balanced_bce(student, gt);
    const auto dice = dice_loss(student, gt);
    return blend_losses(&mse, bce, dice, lambda);
}

// Ground-truth-only objective (the lambda = 0 endpoint). Never touches
// teacher data.
template <std::floating_point T>
TotalLoss<T> supervised_loss(const Tensor<T>& student, const Tensor<T>& gt) {
    const auto bce = balanced_bce(student, gt);
    const auto dice = dice_loss(student, gt);
    return blend_losses<T>(nullptr, bce, dice, T(0));
}

} // namespace picosam

#endif
