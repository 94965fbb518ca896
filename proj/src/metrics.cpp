#include "unetmm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <fmt/core.h>

namespace unetmm {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, a.shape().str(), b.shape().str()));
    }
}

std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<std::size_t>(size));
    const double mid = (size - 1) / 2.0;
    double total = 0.0;
    for (int i = 0; i < size; ++i) {
        const double d = i - mid;
        w[i] = std::exp(-(d * d) / (2.0 * sigma * sigma));
        total += w[i];
    }
    for (double& v : w) v /= total;
    return w;
}

// Separable valid-mode filtering of one h x w plane.
std::vector<double> filter_valid(const std::vector<double>& plane, std::int64_t h, std::int64_t w,
                                 const std::vector<double>& k) {
    const auto ks = static_cast<std::int64_t>(k.size());
    const std::int64_t oh = h - ks + 1;
    const std::int64_t ow = w - ks + 1;
    std::vector<double> rows(static_cast<std::size_t>(h * ow));
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < ow; ++x) {
            double s = 0.0;
            for (std::int64_t i = 0; i < ks; ++i) s += k[i] * plane[y * w + x + i];
            rows[y * ow + x] = s;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(oh * ow));
    for (std::int64_t y = 0; y < oh; ++y) {
        for (std::int64_t x = 0; x < ow; ++x) {
            double s = 0.0;
            for (std::int64_t i = 0; i < ks; ++i) s += k[i] * rows[(y + i) * ow + x];
            out[y * ow + x] = s;
        }
    }
    return out;
}

// Sum of local SSIM values over one plane pair and the number of windows.
std::pair<double, std::int64_t> ssim_plane(const float* a, const float* b, std::int64_t h, std::int64_t w,
                                           const SsimOptions& opts) {
    int size = std::min<std::int64_t>({opts.window, h, w});
    if (size % 2 == 0) --size;
    const auto k = gaussian_window(size, opts.sigma);
    const double c1 = std::pow(0.01 * opts.data_range, 2);
    const double c2 = std::pow(0.03 * opts.data_range, 2);

    const auto n = static_cast<std::size_t>(h * w);
    std::vector<double> pa(n), pb(n), paa(n), pbb(n), pab(n);
    for (std::size_t i = 0; i < n; ++i) {
        pa[i] = a[i];
        pb[i] = b[i];
        paa[i] = pa[i] * pa[i];
        pbb[i] = pb[i] * pb[i];
        pab[i] = pa[i] * pb[i];
    }
    const auto mu_a = filter_valid(pa, h, w, k);
    const auto mu_b = filter_valid(pb, h, w, k);
    const auto e_aa = filter_valid(paa, h, w, k);
    const auto e_bb = filter_valid(pbb, h, w, k);
    const auto e_ab = filter_valid(pab, h, w, k);
    double total = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double va = e_aa[i] - mu_a[i] * mu_a[i];
        const double vb = e_bb[i] - mu_b[i] * mu_b[i];
        const double cov = e_ab[i] - mu_a[i] * mu_b[i];
        const double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
        const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
        total += num / den;
    }
    return {total, static_cast<std::int64_t>(mu_a.size())};
}

}  // namespace

double psnr(const Tensor& pred, const Tensor& target, double max_val) {
    require_same_shape(pred, target, "psnr");
    if (!(max_val > 0.0)) {
        throw ContractError("psnr: max_val must be positive");
    }
    auto p = pred.data();
    auto t = target.data();
    double sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = static_cast<double>(p[i]) - t[i];
        sq += d * d;
    }
    const double mse = sq / static_cast<double>(p.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_val * max_val / mse);
}

double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opts) {
    require_same_shape(a, b, "ssim");
    const Shape& s = a.shape();
    double total = 0.0;
    std::int64_t windows = 0;
    for (std::int64_t p = 0; p < s.n * s.c; ++p) {
        const auto [sum, count] = ssim_plane(a.data().data() + p * s.plane(), b.data().data() + p * s.plane(), s.h,
                                             s.w, opts);
        total += sum;
        windows += count;
    }
    return std::clamp(total / static_cast<double>(windows), 0.0, 1.0);
}

namespace {

// Copies channel c of every batch item into an (n, 1, h, w) tensor scaled to [0, 1].
Tensor normalized_channel(const Tensor& x, std::int64_t c) {
    const Shape& s = x.shape();
    Tensor out(Shape{s.n, 1, s.h, s.w});
    auto o = out.data();
    auto in = x.data();
    for (std::int64_t b = 0; b < s.n; ++b) {
        std::copy_n(in.begin() + (b * s.c + c) * s.plane(), s.plane(), o.begin() + b * s.plane());
    }
    const auto [lo, hi] = std::minmax_element(o.begin(), o.end());
    const float min = *lo;
    const float range = *hi - *lo;
    for (float& v : o) v = range > 0.0f ? (v - min) / range : 0.0f;
    return out;
}

}  // namespace

double feature_similarity(const Tensor& encoder, const Tensor& generated) {
    require_same_shape(encoder, generated, "feature_similarity");
    const std::int64_t channels = encoder.shape().c;
    double total = 0.0;
    for (std::int64_t c = 0; c < channels; ++c) {
        total += ssim(normalized_channel(encoder, c), normalized_channel(generated, c));
    }
    return total / static_cast<double>(channels);
}

RepresentativeAbility representative_ability(const Tensor& features) {
    const Shape& s = features.shape();
    if (s.c < 2) {
        throw ShapeError(fmt::format("representative_ability needs at least 2 channels, got {}", s.str()));
    }
    // Channel-major copy: row c holds channel c over (n, h, w).
    const std::int64_t len = s.n * s.plane();
    std::vector<double> rows(static_cast<std::size_t>(s.c * len));
    auto in = features.data();
    for (std::int64_t b = 0; b < s.n; ++b) {
        for (std::int64_t c = 0; c < s.c; ++c) {
            for (std::int64_t i = 0; i < s.plane(); ++i) {
                rows[c * len + b * s.plane() + i] = in[(b * s.c + c) * s.plane() + i];
            }
        }
    }
    std::vector<double> norms(static_cast<std::size_t>(s.c));
    RepresentativeAbility ra;
    for (std::int64_t c = 0; c < s.c; ++c) {
        double sq = 0.0;
        for (std::int64_t i = 0; i < len; ++i) sq += rows[c * len + i] * rows[c * len + i];
        norms[c] = std::sqrt(sq);
        if (norms[c] == 0.0) ra.zero_norm_channels.push_back(c);
    }
    std::vector<double> dist;
    dist.reserve(static_cast<std::size_t>(s.c * (s.c - 1) / 2));
    for (std::int64_t i = 0; i < s.c; ++i) {
        for (std::int64_t j = i + 1; j < s.c; ++j) {
            if (norms[i] == 0.0 || norms[j] == 0.0) {
                dist.push_back(1.0);
                continue;
            }
            double dot = 0.0;
            for (std::int64_t k = 0; k < len; ++k) dot += rows[i * len + k] * rows[j * len + k];
            dist.push_back(1.0 - dot / (norms[i] * norms[j]));
        }
    }
    double sum = 0.0;
    for (double d : dist) sum += d;
    ra.mean = sum / static_cast<double>(dist.size());
    double var = 0.0;
    for (double d : dist) var += (d - ra.mean) * (d - ra.mean);
    ra.variance = var / static_cast<double>(dist.size());
    return ra;
}

std::vector<FeatureDiagnostics> diagnose_stages(const std::vector<Tensor>& encoder,
                                                const std::vector<Tensor>& generated) {
    if (encoder.size() != generated.size()) {
        throw ArityError(fmt::format("diagnose_stages: {} encoder maps vs {} generated", encoder.size(),
                                     generated.size()));
    }
    std::vector<FeatureDiagnostics> rows;
    for (std::size_t i = 0; i < encoder.size(); ++i) {
        const auto ra = representative_ability(generated[i]);
        rows.push_back({static_cast<int>(i + 1), feature_similarity(encoder[i], generated[i]), ra.mean, ra.variance});
    }
    return rows;
}

std::string diagnostics_csv(const std::vector<FeatureDiagnostics>& rows) {
    std::string out = "stage,ssim,ra_mean,ra_variance\n";
    for (const auto& r : rows) out += fmt::format("{},{},{},{}\n", r.stage, r.ssim_to_encoder, r.ra_mean, r.ra_variance);
    return out;
}

std::vector<FeatureDiagnostics> parse_diagnostics_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "stage,ssim,ra_mean,ra_variance") {
        throw FormatError("diagnostics CSV: missing header");
    }
    std::vector<FeatureDiagnostics> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string f[4];
        for (auto& v : f) {
            if (!std::getline(fields, v, ',')) throw FormatError(fmt::format("diagnostics CSV: short row '{}'", line));
        }
        try {
            rows.push_back({std::stoi(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3])});
        } catch (const std::logic_error&) {
            throw FormatError(fmt::format("diagnostics CSV: bad number in '{}'", line));
        }
    }
    return rows;
}

}  // namespace unetmm
