#pragma once

// Inspection of per-token granularity estimates: extracts each encoder
// layer's head values for a sequence, buckets and renders them, and
// round-trips reports through JSON.

#include "cdnpg/transformer.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace cdnpg {

struct GranularityReport {
    std::vector<std::string> tokens;
    std::vector<std::vector<double>> per_layer_z;  // [layer][token position]
    std::string mask_mode;
    std::string checkpoint;  // provenance label, e.g. the weights file
};

// Buckets a granularity value at edges 0.2 / 0.4 / 0.6 / 0.8 (clamping
// anything outside [0, 1]): 0 is the most local, 4 the most global.
int z_bucket(double z);
std::string z_bucket_label(int bucket);

nlohmann::json report_to_json(const GranularityReport& report);
GranularityReport report_from_json(const nlohmann::json& j);

// Layers as rows, tokens as columns. With ansi set, cells are colored on a
// 256-color ramp; otherwise values print with two decimals.
std::string render_heatmap(const GranularityReport& report, bool ansi);

// Runs the encoder in eval mode (tape off, training flag restored) and copies
// out every layer's granularity column. `labels` names the positions and must
// align with `ids`.
template <typename T>
GranularityReport granularity_report(Model<T>& model, const std::vector<int>& ids,
                                     const std::vector<std::string>& labels,
                                     const std::string& checkpoint_label = "") {
    if (ids.empty()) throw std::runtime_error("inspect: empty token sequence");
    if (ids.size() != labels.size())
        throw std::runtime_error("inspect: " + std::to_string(ids.size()) + " ids but " +
                                 std::to_string(labels.size()) + " labels");
    if (!model.config().ga_enabled)
        throw std::runtime_error("inspect: granularity heads are disabled in this model");

    GranularityReport report;
    report.tokens = labels;
    report.mask_mode = to_string(model.config().mask_mode);
    report.checkpoint = checkpoint_label;
    {
        NoGradGuard ng;
        const bool was_training = model.training();
        model.set_training(false);
        auto enc = model.encode(ids);
        model.set_training(was_training);
        report.per_layer_z.reserve(enc.layer_z.size());
        for (const auto& z : enc.layer_z) {
            std::vector<double> row(ids.size());
            for (std::size_t i = 0; i < ids.size(); ++i)
                row[i] = static_cast<double>(z.at(i, 0));
            report.per_layer_z.push_back(std::move(row));
        }
    }
    return report;
}

}  // namespace cdnpg
