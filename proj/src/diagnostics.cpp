#include "prunerec/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "prunerec/errors.hpp"

namespace prunerec {

double concentration_ratio(const std::vector<double>& values, double k_percent) {
    if (values.empty()) throw ContractError("concentration_ratio: empty vector");
    if (k_percent <= 0.0 || k_percent > 100.0)
        throw ContractError("concentration_ratio: k_percent " + std::to_string(k_percent) +
                            " outside (0, 100]");
    std::vector<double> mags(values.size());
    double total = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        mags[i] = std::abs(values[i]);
        total += mags[i];
    }
    if (total == 0.0) throw ContractError("concentration_ratio: all-zero vector");
    const std::size_t top = static_cast<std::size_t>(
        std::ceil(static_cast<double>(values.size()) * k_percent / 100.0));
    std::sort(mags.begin(), mags.end(), std::greater<double>());
    double head = 0.0;
    for (std::size_t i = 0; i < top; ++i) head += mags[i];
    return head / total;
}

ConcentrationReport observe(const TransformerModel& model, const RecDataset& dataset,
                            int b, const std::vector<double>& k_grid, std::uint64_t seed,
                            bool last_token_only) {
    if (b < 1) throw ContractError("observe: B must be >= 1");
    const std::vector<int> sample_idx = sample_calibration_indices(dataset, b, seed);
    const int n_layers = model.n_layers();
    const std::size_t n_k = k_grid.size();
    // [layer][site][k] running sums
    std::vector<std::vector<std::vector<double>>> sums(
        static_cast<std::size_t>(n_layers),
        std::vector<std::vector<double>>(2, std::vector<double>(n_k, 0.0)));

    auto accumulate_site = [&](int layer, int site, const TensorPtr& acts) {
        const std::int64_t rows = acts->dim(0), width = acts->dim(1);
        std::vector<double> values(static_cast<std::size_t>(width));
        const std::int64_t first = last_token_only ? rows - 1 : 0;
        const double inv_rows = 1.0 / static_cast<double>(rows - first);
        for (std::int64_t r = first; r < rows; ++r) {
            std::copy_n(acts->data.data() + r * width, width, values.data());
            for (std::size_t ki = 0; ki < n_k; ++ki)
                sums[layer][site][ki] += concentration_ratio(values, k_grid[ki]) * inv_rows;
        }
    };

    for (int idx : sample_idx) {
        const Encoded enc = encode(dataset, idx);
        Activations acts = capture_activations(model, enc.tokens);
        for (int li = 0; li < n_layers; ++li) {
            accumulate_site(li, 0, acts[li].attn_out);
            accumulate_site(li, 1, acts[li].mlp_preact);
        }
    }

    ConcentrationReport report;
    report.sample_count = b;
    const double inv_b = 1.0 / static_cast<double>(b);
    for (int li = 0; li < n_layers; ++li)
        for (int site = 0; site < 2; ++site)
            for (std::size_t ki = 0; ki < n_k; ++ki)
                report.rows.push_back({li, site == 0 ? "attn" : "mlp", k_grid[ki],
                                       sums[li][site][ki] * inv_b});
    return report;
}

TensorPtr wanda_score(const TensorPtr& weight, const TensorPtr& activations) {
    if (weight->ndim() != 2 || activations->ndim() != 2 ||
        activations->dim(1) != weight->dim(0))
        throw DimensionError("wanda_score: weight " + shape_str(weight->shape) +
                             " vs activations " + shape_str(activations->shape));
    const std::int64_t in = weight->dim(0), out = weight->dim(1);
    const std::int64_t rows = activations->dim(0);
    std::vector<double> col_norm(static_cast<std::size_t>(in), 0.0);
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < in; ++i) {
            const double v = activations->data[r * in + i];
            col_norm[static_cast<std::size_t>(i)] += v * v;
        }
    for (double& v : col_norm) v = std::sqrt(v);
    auto score = make_tensor(weight->shape);
    for (std::int64_t i = 0; i < in; ++i)
        for (std::int64_t j = 0; j < out; ++j)
            score->data[i * out + j] =
                std::abs(weight->data[i * out + j]) * col_norm[static_cast<std::size_t>(i)];
    return score;
}

void save_concentration_report(const ConcentrationReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << std::setprecision(17);
    out << "layer\tsite\tk_percent\tratio\n";
    for (const auto& row : report.rows)
        out << row.layer << '\t' << row.site << '\t' << row.k_percent << '\t' << row.ratio
            << '\n';
    if (!out) throw IoError("write failed for " + path);
}

}  // namespace prunerec
