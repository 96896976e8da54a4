#include "cdnpg/inspect.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace cdnpg {

int z_bucket(double z) {
    if (z < 0.2) return 0;
    if (z < 0.4) return 1;
    if (z < 0.6) return 2;
    if (z < 0.8) return 3;
    return 4;
}

std::string z_bucket_label(int bucket) {
    switch (bucket) {
        case 0: return "local (z < 0.2)";
        case 1: return "mostly local (0.2-0.4)";
        case 2: return "mixed (0.4-0.6)";
        case 3: return "mostly global (0.6-0.8)";
        case 4: return "global (z >= 0.8)";
    }
    throw std::runtime_error("inspect: bucket must be in [0, 5)");
}

nlohmann::json report_to_json(const GranularityReport& report) {
    nlohmann::json j;
    j["tokens"] = report.tokens;
    j["layers"] = report.per_layer_z;
    j["mask_mode"] = report.mask_mode;
    j["checkpoint"] = report.checkpoint;
    return j;
}

GranularityReport report_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("tokens") || !j.contains("layers") ||
        !j.contains("mask_mode") || !j.contains("checkpoint"))
        throw std::runtime_error(
            "inspect: report needs tokens, layers, mask_mode, and checkpoint fields");
    GranularityReport report;
    try {
        report.tokens = j.at("tokens").get<std::vector<std::string>>();
        report.per_layer_z = j.at("layers").get<std::vector<std::vector<double>>>();
        report.mask_mode = j.at("mask_mode").get<std::string>();
        report.checkpoint = j.at("checkpoint").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("inspect: malformed report: ") + e.what());
    }
    for (const auto& row : report.per_layer_z) {
        if (row.size() != report.tokens.size())
            throw std::runtime_error("inspect: a layer row does not match the token count");
        for (double z : row)
            if (!(z >= 0.0 && z <= 1.0))
                throw std::runtime_error("inspect: granularity values must lie in [0, 1]");
    }
    return report;
}

namespace {

// 256-color ramp from deep blue (local) through cyan/green to red (global).
int ramp_color(double z) {
    static const int stops[] = {17, 19, 31, 37, 71, 107, 143, 179, 173, 167, 160};
    const double c = std::clamp(z, 0.0, 1.0);
    const int idx = std::min(10, static_cast<int>(c * 11.0));
    return stops[idx];
}

std::string pad_to(std::string s, std::size_t width) {
    if (s.size() < width) s.append(width - s.size(), ' ');
    return s;
}

}  // namespace

std::string render_heatmap(const GranularityReport& report, bool ansi) {
    if (report.tokens.empty() || report.per_layer_z.empty())
        throw std::runtime_error("inspect: nothing to render");
    for (const auto& row : report.per_layer_z)
        if (row.size() != report.tokens.size())
            throw std::runtime_error("inspect: a layer row does not match the token count");

    std::size_t col = 4;  // at least "0.00"
    for (const auto& tok : report.tokens) col = std::max(col, tok.size());
    col += 1;

    std::string out;
    out += pad_to("", 8);
    for (const auto& tok : report.tokens) out += pad_to(tok, col);
    out += '\n';

    char cell[32];
    for (std::size_t l = 0; l < report.per_layer_z.size(); ++l) {
        std::snprintf(cell, sizeof cell, "layer %zu", l);
        out += pad_to(cell, 8);
        for (double z : report.per_layer_z[l]) {
            std::snprintf(cell, sizeof cell, "%.2f", z);
            if (ansi) {
                out += "\x1b[48;5;" + std::to_string(ramp_color(z)) + "m";
                out += pad_to(cell, col);
                out += "\x1b[0m";
            } else {
                out += pad_to(cell, col);
            }
        }
        out += '\n';
    }
    return out;
}

}  // namespace cdnpg
