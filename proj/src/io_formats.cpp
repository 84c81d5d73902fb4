#include "csp/io_formats.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "csp/error.hpp"

namespace csp {

namespace {

using ordered_json = nlohmann::ordered_json;

std::vector<std::string_view> split_lines(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        std::string_view line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        lines.push_back(line);
        start = end + 1;
    }
    // "a\n" yields {"a", ""}; drop the empty tail produced by a final newline.
    if (!lines.empty() && lines.back().empty() && !text.empty() && text.back() == '\n') {
        lines.pop_back();
    }
    return lines;
}

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t");
    return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t end = s.find(sep, start);
        out.push_back(trim(s.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start)));
        if (end == std::string_view::npos) {
            return out;
        }
        start = end + 1;
    }
}

std::optional<std::uint64_t> to_uint(std::string_view s) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) {
        return std::nullopt;
    }
    return v;
}

std::optional<double> to_real(std::string_view s) {
    double v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) {
        return std::nullopt;
    }
    return v;
}

std::uint64_t need_uint(std::string_view value, std::string_view key, std::size_t line) {
    const auto v = to_uint(value);
    if (!v) {
        throw ParseError(std::string(key) + ": expected a non-negative integer, got '" + std::string(value) + "'",
                         line);
    }
    return *v;
}

double need_real(std::string_view value, std::string_view key, std::size_t line) {
    const auto v = to_real(value);
    if (!v) {
        throw ParseError(std::string(key) + ": expected a number, got '" + std::string(value) + "'", line);
    }
    return *v;
}

struct KeyValue {
    std::string key;
    std::string value;
    std::size_t line = 0;
};

// key = value lines with '#' comments; duplicate keys are rejected.
std::vector<KeyValue> parse_key_values(std::string_view text) {
    std::vector<KeyValue> out;
    std::map<std::string, std::size_t> seen;
    const auto lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        std::string_view line = lines[i];
        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ParseError("expected key = value, got '" + std::string(line) + "'", i + 1);
        }
        KeyValue kv{std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))), i + 1};
        if (kv.key.empty()) {
            throw ParseError("missing key before '='", kv.line);
        }
        if (kv.value.empty()) {
            throw ParseError(kv.key + ": missing value", kv.line);
        }
        if (const auto it = seen.find(kv.key); it != seen.end()) {
            throw ParseError(kv.key + ": duplicate key (first set on line " + std::to_string(it->second) + ")",
                             kv.line);
        }
        seen.emplace(kv.key, kv.line);
        out.push_back(std::move(kv));
    }
    return out;
}

std::string n_avg_exact(const Rational& r) {
    return r.to_string();
}

// Value as printed, so csv and json rows carry the same number.
double rounded(double value) {
    return std::strtod(format_real(value).c_str(), nullptr);
}

std::string csv_line(const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) {
            out += ',';
        }
        out += cells[i];
    }
    out += '\n';
    return out;
}

}  // namespace

// Mask files ---------------------------------------------------------------

InstanceMaskSet parse_mask_file(std::string_view text) {
    const auto lines = split_lines(text);
    if (lines.empty() || trim(lines[0]).empty()) {
        throw ParseError("missing CSPMASK header", 1);
    }
    std::istringstream header{std::string(lines[0])};
    std::string magic, h_text, w_text, n_text, extra;
    header >> magic >> h_text >> w_text >> n_text;
    if (magic != "CSPMASK") {
        throw ParseError("header must start with CSPMASK", 1);
    }
    if (header >> extra) {
        throw ParseError("trailing text after header fields: '" + extra + "'", 1);
    }
    const auto h = to_uint(h_text);
    const auto w = to_uint(w_text);
    const auto n = to_uint(n_text);
    if (!h || !w || !n) {
        throw ParseError("header needs three non-negative integers: CSPMASK <H> <W> <N_o>", 1);
    }
    if (*h == 0 || *w == 0 || *n == 0) {
        throw ParseError("H, W and N_o must be positive", 1);
    }

    InstanceMaskSet set;
    set.height = *h;
    set.width = *w;
    std::size_t line_no = 1;  // index of the next line to read, 0-based into `lines`
    for (std::size_t b = 0; b < *n; ++b) {
        const std::string block = "block " + std::to_string(b + 1);
        std::vector<std::uint8_t> mask;
        mask.reserve(set.cells());
        for (std::size_t r = 0; r < set.height; ++r, ++line_no) {
            if (line_no >= lines.size()) {
                throw ParseError(block + ": expected " + std::to_string(set.height) + " rows, file ended after " +
                                     std::to_string(r),
                                 line_no + 1);
            }
            const std::string_view row = lines[line_no];
            if (row.size() != set.width) {
                throw ParseError(block + ": row has " + std::to_string(row.size()) + " cells, expected " +
                                     std::to_string(set.width),
                                 line_no + 1);
            }
            for (char c : row) {
                if (c != '0' && c != '1') {
                    throw ParseError(block + ": bad character '" + std::string(1, c) + "'", line_no + 1);
                }
                mask.push_back(c == '1' ? 1 : 0);
            }
        }
        bool any = false;
        for (std::uint8_t v : mask) {
            any = any || v;
        }
        if (!any) {
            throw ParseError(block + ": empty mask", line_no - set.height + 1);
        }
        set.masks.push_back(std::move(mask));
    }
    for (; line_no < lines.size(); ++line_no) {
        if (!trim(lines[line_no]).empty()) {
            throw ParseError("trailing garbage after " + std::to_string(*n) + " blocks", line_no + 1);
        }
    }
    return set;
}

std::string serialize_mask_file(const InstanceMaskSet& masks) {
    masks.validate();
    std::string out = "CSPMASK " + std::to_string(masks.height) + " " + std::to_string(masks.width) + " " +
                      std::to_string(masks.masks.size()) + "\n";
    for (const auto& mask : masks.masks) {
        for (std::size_t r = 0; r < masks.height; ++r) {
            for (std::size_t c = 0; c < masks.width; ++c) {
                out += mask[r * masks.width + c] ? '1' : '0';
            }
            out += '\n';
        }
    }
    return out;
}

// Run configuration ---------------------------------------------------------

RunConfig parse_run_config(std::string_view text) {
    RunConfig rc;
    rc.dims = toy_dims();
    const auto kvs = parse_key_values(text);

    std::size_t dims_line = 0;
    std::size_t config_line = 0;
    // "N" tokens resolve once the image-token count is known.
    std::optional<std::size_t> cluster_is_n, prune_is_n;

    for (const KeyValue& kv : kvs) {
        const std::string& k = kv.key;
        auto dim = [&](std::size_t& field) {
            field = need_uint(kv.value, k, kv.line);
            dims_line = kv.line;
        };
        auto knob = [&](std::size_t& field, std::optional<std::size_t>* symbolic) {
            config_line = std::max(config_line, kv.line);
            if (symbolic && kv.value == "N") {
                *symbolic = kv.line;
                return;
            }
            field = need_uint(kv.value, k, kv.line);
        };

        if (k == "model") {
            const auto preset = find_preset(kv.value);
            if (!preset) {
                throw ParseError("model: unknown preset '" + kv.value + "' (expected 7b-224, 7b-336 or 13b-224)",
                                 kv.line);
            }
            rc.preset = preset->name;
        } else if (k == "layers") {
            dim(rc.dims.layers);
        } else if (k == "hidden") {
            dim(rc.dims.hidden);
        } else if (k == "ffn") {
            dim(rc.dims.ffn);
        } else if (k == "heads") {
            dim(rc.dims.heads);
        } else if (k == "image_tokens") {
            dim(rc.dims.image_tokens);
        } else if (k == "system_tokens") {
            dim(rc.dims.system_tokens);
        } else if (k == "user_tokens") {
            dim(rc.dims.user_tokens);
        } else if (k == "output_tokens") {
            dim(rc.dims.output_tokens);
        } else if (k == "cluster_layers") {
            knob(rc.config.cluster_layers, nullptr);
        } else if (k == "cluster_tokens") {
            knob(rc.config.cluster_tokens, &cluster_is_n);
        } else if (k == "scatter_layers") {
            knob(rc.config.scatter_layers, nullptr);
        } else if (k == "prune_tokens") {
            knob(rc.config.prune_tokens, &prune_is_n);
        } else if (k == "strategy") {
            const auto s = parse_strategy(kv.value);
            if (!s) {
                throw ParseError("strategy: unknown strategy '" + kv.value + "'", kv.line);
            }
            rc.config.strategy = *s;
            config_line = std::max(config_line, kv.line);
        } else if (k == "seed") {
            rc.seed = need_uint(kv.value, k, kv.line);
        } else if (k == "planted_count") {
            rc.planted.count = need_uint(kv.value, k, kv.line);
        } else if (k == "planted_gain") {
            rc.planted.gain = need_real(kv.value, k, kv.line);
        } else if (k == "calibrate_tflops") {
            rc.calibrate_tflops = need_real(kv.value, k, kv.line);
            if (!(*rc.calibrate_tflops > 0.0)) {
                throw ParseError("calibrate_tflops: must be positive", kv.line);
            }
        } else {
            throw ParseError("unknown key '" + k + "'", kv.line);
        }
    }

    if (rc.preset) {
        if (dims_line != 0) {
            throw ParseError("explicit model dimensions cannot be combined with model", dims_line);
        }
        rc.dims = find_preset(*rc.preset)->dims;
    }
    try {
        rc.dims.validate();
    } catch (const ArgumentError& e) {
        throw ParseError(std::string("model dimensions: ") + e.what(), dims_line);
    }
    if (cluster_is_n) {
        rc.config.cluster_tokens = rc.dims.image_tokens;
    }
    if (prune_is_n) {
        rc.config.prune_tokens = rc.dims.image_tokens;
    }
    try {
        rc.config.validate(rc.dims.layers, rc.dims.image_tokens);
    } catch (const ArgumentError& e) {
        throw ParseError(std::string("schedule: ") + e.what(), config_line);
    }
    if (rc.planted.count > rc.dims.image_tokens) {
        throw ParseError("planted_count exceeds image_tokens", 0);
    }
    return rc;
}

// Grid files ----------------------------------------------------------------

Grid parse_grid_file(std::string_view text) {
    Grid grid = Grid::ablation_defaults();
    for (const KeyValue& kv : parse_key_values(text)) {
        const auto items = split(kv.value, ',');
        auto numbers = [&](std::vector<std::size_t>& field) {
            field.clear();
            for (std::string_view item : items) {
                field.push_back(need_uint(item, kv.key, kv.line));
            }
        };
        if (kv.key == "cluster_layers") {
            numbers(grid.cluster_layers);
        } else if (kv.key == "cluster_tokens") {
            numbers(grid.cluster_tokens);
        } else if (kv.key == "scatter_layers") {
            numbers(grid.scatter_layers);
        } else if (kv.key == "prune_tokens") {
            numbers(grid.prune_tokens);
        } else if (kv.key == "strategies") {
            grid.strategies.clear();
            for (std::string_view item : items) {
                const auto s = parse_strategy(item);
                if (!s) {
                    throw ParseError("strategies: unknown strategy '" + std::string(item) + "'", kv.line);
                }
                grid.strategies.push_back(*s);
            }
        } else {
            throw ParseError("unknown key '" + kv.key + "'", kv.line);
        }
    }
    return grid;
}

// Fixtures ------------------------------------------------------------------

std::vector<PublishedFixture> parse_fixtures(std::string_view text) {
    static constexpr std::string_view kHeader = "table,model,ratio,L_c,N_c,L_s,N_p,n_avg,tflops";
    const auto lines = split_lines(text);
    if (lines.empty() || trim(lines[0]) != kHeader) {
        throw ParseError("fixture header must be '" + std::string(kHeader) + "'", 1);
    }
    std::vector<PublishedFixture> out;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const std::size_t line = i + 1;
        if (trim(lines[i]).empty()) {
            continue;
        }
        const auto cells = split(lines[i], ',');
        if (cells.size() != 9) {
            throw ParseError("expected 9 fields, got " + std::to_string(cells.size()), line);
        }
        PublishedFixture f;
        f.table = static_cast<int>(need_uint(cells[0], "table", line));
        f.model = std::string(cells[1]);
        if (!find_preset(f.model)) {
            throw ParseError("model: unknown preset '" + f.model + "'", line);
        }
        if (!cells[2].empty()) {
            f.ratio = static_cast<int>(need_uint(cells[2], "ratio", line));
        }
        const bool any_knob = !cells[3].empty() || !cells[4].empty() || !cells[5].empty() || !cells[6].empty();
        if (any_knob) {
            CspConfig c;
            c.cluster_layers = need_uint(cells[3], "L_c", line);
            c.cluster_tokens = need_uint(cells[4], "N_c", line);
            c.scatter_layers = need_uint(cells[5], "L_s", line);
            c.prune_tokens = need_uint(cells[6], "N_p", line);
            f.config = c;
        }
        f.n_avg = need_uint(cells[7], "n_avg", line);
        f.tflops = need_real(cells[8], "tflops", line);
        out.push_back(std::move(f));
    }
    return out;
}

// Reports -------------------------------------------------------------------

std::optional<ReportFormat> parse_report_format(std::string_view text) {
    if (text == "csv") {
        return ReportFormat::Csv;
    }
    if (text == "jsonl" || text == "json-lines") {
        return ReportFormat::JsonLines;
    }
    return std::nullopt;
}

std::string format_real(double value) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", value);
    return buf;
}

std::string emit_report(const CostReport& report, ReportFormat format) {
    const CspConfig& c = report.config;
    const std::size_t total_layers = c.cluster_layers + c.scatter_layers + report.stages.at(2).layers;
    const std::uint64_t stage_macs[3] = {report.stages[0].macs, report.stages[1].macs, report.stages[2].macs};

    if (format == ReportFormat::Csv) {
        std::string out = csv_line({"L_c", "N_c", "L_s", "N_p", "L_p", "strategy", "n_avg_exact", "n_avg_floor",
                                    "n_avg", "clustering_macs", "scattering_macs", "pruning_macs", "macs",
                                    "mac_scale", "flops", "tflops"});
        out += csv_line({std::to_string(c.cluster_layers), std::to_string(c.cluster_tokens),
                         std::to_string(c.scatter_layers), std::to_string(c.prune_tokens),
                         std::to_string(c.prune_layers(total_layers)), std::string(to_string(c.strategy)),
                         n_avg_exact(report.n_avg), std::to_string(report.n_avg_floor()),
                         format_real(report.n_avg.value()), std::to_string(stage_macs[0]),
                         std::to_string(stage_macs[1]), std::to_string(stage_macs[2]),
                         std::to_string(report.mac_total), format_real(report.mac_scale),
                         format_real(report.flops_total), format_real(report.flops_total / 1e12)});
        return out;
    }
    ordered_json j;
    j["L_c"] = c.cluster_layers;
    j["N_c"] = c.cluster_tokens;
    j["L_s"] = c.scatter_layers;
    j["N_p"] = c.prune_tokens;
    j["L_p"] = c.prune_layers(total_layers);
    j["strategy"] = std::string(to_string(c.strategy));
    j["n_avg_exact"] = n_avg_exact(report.n_avg);
    j["n_avg_floor"] = report.n_avg_floor();
    j["n_avg"] = rounded(report.n_avg.value());
    j["clustering_macs"] = stage_macs[0];
    j["scattering_macs"] = stage_macs[1];
    j["pruning_macs"] = stage_macs[2];
    j["macs"] = report.mac_total;
    j["mac_scale"] = rounded(report.mac_scale);
    j["flops"] = rounded(report.flops_total);
    j["tflops"] = rounded(report.flops_total / 1e12);
    return j.dump() + "\n";
}

std::string emit_report(const StageTrace& trace, ReportFormat format) {
    std::string out;
    if (format == ReportFormat::Csv) {
        out = csv_line({"layer", "stage", "image_tokens", "sequence_length", "active"});
    }
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
        const LayerRecord& rec = trace.layers[l];
        if (format == ReportFormat::Csv) {
            std::string active;
            for (std::size_t i = 0; i < rec.active.size(); ++i) {
                active += (i ? ";" : "") + std::to_string(rec.active[i]);
            }
            out += csv_line({std::to_string(l), std::string(to_string(rec.stage)), std::to_string(rec.active.size()),
                             std::to_string(rec.sequence_length), active});
        } else {
            ordered_json j;
            j["layer"] = l;
            j["stage"] = std::string(to_string(rec.stage));
            j["image_tokens"] = rec.active.size();
            j["sequence_length"] = rec.sequence_length;
            j["active"] = rec.active;
            out += j.dump() + "\n";
        }
    }
    return out;
}

std::string emit_report(const std::vector<PlanEntry>& plan, ReportFormat format) {
    std::string out;
    if (format == ReportFormat::Csv) {
        out = csv_line({"rank", "L_c", "N_c", "L_s", "N_p", "L_p", "strategy", "n_avg_exact", "n_avg_floor", "n_avg",
                        "macs", "flops", "tflops", "proxy_score"});
    }
    for (std::size_t i = 0; i < plan.size(); ++i) {
        const PlanEntry& e = plan[i];
        const CspConfig& c = e.config;
        const std::size_t total_layers = c.cluster_layers + c.scatter_layers + e.cost.stages.at(2).layers;
        if (format == ReportFormat::Csv) {
            out += csv_line({std::to_string(i + 1), std::to_string(c.cluster_layers), std::to_string(c.cluster_tokens),
                             std::to_string(c.scatter_layers), std::to_string(c.prune_tokens),
                             std::to_string(c.prune_layers(total_layers)), std::string(to_string(c.strategy)),
                             n_avg_exact(e.cost.n_avg), std::to_string(e.cost.n_avg_floor()),
                             format_real(e.cost.n_avg.value()), std::to_string(e.cost.mac_total),
                             format_real(e.cost.flops_total), format_real(e.cost.flops_total / 1e12),
                             e.proxy_score ? format_real(*e.proxy_score) : ""});
        } else {
            ordered_json j;
            j["rank"] = i + 1;
            j["L_c"] = c.cluster_layers;
            j["N_c"] = c.cluster_tokens;
            j["L_s"] = c.scatter_layers;
            j["N_p"] = c.prune_tokens;
            j["L_p"] = c.prune_layers(total_layers);
            j["strategy"] = std::string(to_string(c.strategy));
            j["n_avg_exact"] = n_avg_exact(e.cost.n_avg);
            j["n_avg_floor"] = e.cost.n_avg_floor();
            j["n_avg"] = rounded(e.cost.n_avg.value());
            j["macs"] = e.cost.mac_total;
            j["flops"] = rounded(e.cost.flops_total);
            j["tflops"] = rounded(e.cost.flops_total / 1e12);
            j["proxy_score"] = e.proxy_score ? ordered_json(rounded(*e.proxy_score)) : ordered_json(nullptr);
            out += j.dump() + "\n";
        }
    }
    return out;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open '" + path + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace csp
