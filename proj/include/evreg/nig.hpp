#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "evreg/specials.hpp"

namespace evreg {

/// Parameters of a Normal-Inverse-Gamma prior over a Gaussian's (mean, variance).
/// Fully valid iff upsilon > 0, alpha > 1, beta > 0 and all fields are finite.
/// The joint and marginal densities are proper for any alpha > 0, so density
/// evaluation and the NLL accept that wider window; the summary moments
/// (aleatoric, epistemic) genuinely require alpha > 1.
struct NIGParams {
    double gamma = 0.0;    // location of the mean
    double upsilon = 1.0;  // virtual observations backing the mean
    double alpha = 2.0;    // inverse-gamma shape
    double beta = 1.0;     // inverse-gamma scale
};

/// A Gaussian (mean, variance) point at which the NIG density is evaluated.
/// Observation vectors ("observed H times") are handled by callers as plain
/// sequences of scalar draws; every operation here is per-scalar.
struct GaussianMoments {
    double mu = 0.0;
    double sigma2 = 1.0;
};

struct UncertaintySummary {
    double prediction = 0.0;
    double aleatoric = 0.0;  // E[sigma^2]
    double epistemic = 0.0;  // Var[mu]
};

struct StudentTParams {
    double location = 0.0;
    double scale2 = 1.0;
    double dof = 1.0;
};

inline void validate_density_domain(const NIGParams& p) {
    if (!(std::isfinite(p.gamma) && std::isfinite(p.upsilon) && std::isfinite(p.alpha) &&
          std::isfinite(p.beta))) {
        throw std::domain_error("nig: parameters must be finite");
    }
    if (!(p.upsilon > 0.0))
        throw std::domain_error("nig: upsilon must be > 0, got " + std::to_string(p.upsilon));
    if (!(p.alpha > 0.0))
        throw std::domain_error("nig: alpha must be > 0, got " + std::to_string(p.alpha));
    if (!(p.beta > 0.0))
        throw std::domain_error("nig: beta must be > 0, got " + std::to_string(p.beta));
}

inline void validate(const NIGParams& p) {
    validate_density_domain(p);
    if (!(p.alpha > 1.0))
        throw std::domain_error("nig: alpha must be > 1 (moments undefined), got " +
                                std::to_string(p.alpha));
}

/// Total evidence 2*upsilon + alpha.
inline double evidence(const NIGParams& p) { return 2.0 * p.upsilon + p.alpha; }

/// log p(mu, sigma2 | params), the product N(mu | gamma, sigma2/upsilon) *
/// InvGamma(sigma2 | alpha, beta), evaluated fully in log space.
inline double nig_log_density(double mu, double sigma2, const NIGParams& p) {
    validate_density_domain(p);
    if (!(sigma2 > 0.0))
        throw std::domain_error("nig: sigma2 must be > 0, got " + std::to_string(sigma2));
    const double diff = p.gamma - mu;
    return p.alpha * std::log(p.beta) + 0.5 * std::log(p.upsilon) - log_gamma(p.alpha) -
           0.5 * std::log(2.0 * std::numbers::pi) - (p.alpha + 1.5) * std::log(sigma2) -
           (2.0 * p.beta + p.upsilon * diff * diff) / (2.0 * sigma2);
}

inline double nig_log_density(const GaussianMoments& m, const NIGParams& p) {
    return nig_log_density(m.mu, m.sigma2, p);
}

/// prediction = gamma, aleatoric = beta/(alpha-1), epistemic = beta/(upsilon*(alpha-1)).
inline UncertaintySummary nig_moments(const NIGParams& p) {
    validate(p);
    const double aleatoric = p.beta / (p.alpha - 1.0);
    return {p.gamma, aleatoric, aleatoric / p.upsilon};
}

/// Marginal likelihood of one observation: St(b; gamma, beta(1+upsilon)/(upsilon*alpha), 2*alpha).
inline StudentTParams marginal_student_t(const NIGParams& p) {
    validate_density_domain(p);
    return {p.gamma, p.beta * (1.0 + p.upsilon) / (p.upsilon * p.alpha), 2.0 * p.alpha};
}

inline double student_t_log_density(double x, const StudentTParams& st) {
    if (!(st.scale2 > 0.0))
        throw std::domain_error("student_t: scale2 must be > 0");
    if (!(st.dof > 0.0))
        throw std::domain_error("student_t: dof must be > 0");
    const double z2 = (x - st.location) * (x - st.location) / (st.dof * st.scale2);
    return log_gamma(0.5 * (st.dof + 1.0)) - log_gamma(0.5 * st.dof) -
           0.5 * std::log(std::numbers::pi * st.dof * st.scale2) -
           0.5 * (st.dof + 1.0) * std::log1p(z2);
}

inline double student_t_density(double x, const StudentTParams& st) {
    return std::exp(student_t_log_density(x, st));
}

/// Negative log marginal likelihood in expanded form, with Omega = 2*beta*(1+upsilon):
///   1/2 log(pi/upsilon) - alpha log(Omega)
///   + (alpha + 1/2) log((b-gamma)^2 upsilon + Omega) + log(Gamma(alpha)/Gamma(alpha+1/2))
inline double nll_loss(double b, const NIGParams& p) {
    validate_density_domain(p);
    const double omega = 2.0 * p.beta * (1.0 + p.upsilon);
    const double diff = b - p.gamma;
    return 0.5 * std::log(std::numbers::pi / p.upsilon) - p.alpha * std::log(omega) +
           (p.alpha + 0.5) * std::log(diff * diff * p.upsilon + omega) + log_gamma(p.alpha) -
           log_gamma(p.alpha + 0.5);
}

}  // namespace evreg
