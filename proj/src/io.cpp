#include "equate/io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

namespace equate::io {

namespace {

void ensure_parent(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

std::ofstream open_out(const std::string& path) {
    ensure_parent(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("Io", "cannot write " + path);
    return out;
}

}  // namespace

std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("Io", "cannot open " + path);
    std::vector<json> out;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::parse_error& e) {
            throw Error("InvalidJson", path + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

void write_jsonl(const std::string& path, const std::vector<json>& lines) {
    auto out = open_out(path);
    for (const auto& j : lines) out << j.dump() << '\n';
    if (!out) throw Error("Io", "failed writing " + path);
}

json read_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("Io", "cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error("InvalidJson", path + ": " + e.what());
    }
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void write_text(const std::string& path, const std::string& text) {
    auto out = open_out(path);
    out << text;
    if (!out) throw Error("Io", "failed writing " + path);
}

json matrix_to_json(const DataMatrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows; ++r) {
        auto row = m.row(r);
        rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    return rows;
}

DataMatrix matrix_from_json(const json& j) {
    if (!j.is_array()) throw Error("InvalidData", "matrix must be an array of rows");
    const std::size_t cols = j.empty() ? 0 : j[0].size();
    DataMatrix m(j.size(), cols);
    for (std::size_t r = 0; r < j.size(); ++r) {
        if (!j[r].is_array() || j[r].size() != cols)
            throw Error("InvalidData", "row " + std::to_string(r) + " has the wrong width");
        for (std::size_t c = 0; c < cols; ++c) {
            if (!j[r][c].is_number()) throw Error("InvalidData", "non-numeric entry in row " + std::to_string(r));
            m(r, c) = j[r][c].get<double>();
        }
    }
    return m;
}

DataTable read_table(const std::string& path) {
    const auto lines = read_jsonl(path);
    DataTable t;
    if (lines.empty()) return t;
    std::size_t cols = 0;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto& j = lines[i];
        if (!j.is_object() || !j.contains("x") || !j.contains("y") || !j["x"].is_array() || !j["y"].is_number())
            throw Error("InvalidData", path + ": row " + std::to_string(i + 1) + " needs numeric \"x\" array and \"y\"");
        if (i == 0) {
            cols = j["x"].size();
            if (cols == 0 || cols > static_cast<std::size_t>(expr::kMaxVariables))
                throw Error("InvalidData", path + ": between 1 and 10 features required");
            t.x = DataMatrix(lines.size(), cols);
        }
        if (j["x"].size() != cols) throw Error("InvalidData", path + ": row " + std::to_string(i + 1) + " has the wrong width");
        for (std::size_t c = 0; c < cols; ++c) {
            if (!j["x"][c].is_number()) throw Error("InvalidData", path + ": non-numeric feature");
            t.x(i, c) = j["x"][c].get<double>();
        }
        t.y.push_back(j["y"].get<double>());
        for (std::size_t c = 0; c < cols; ++c)
            if (!std::isfinite(t.x(i, c))) throw Error("InvalidData", path + ": non-finite feature");
        if (!std::isfinite(t.y.back())) throw Error("InvalidData", path + ": non-finite label");
    }
    return t;
}

void write_table(const std::string& path, const DataTable& t) {
    std::vector<json> lines;
    lines.reserve(t.rows());
    for (std::size_t r = 0; r < t.rows(); ++r) {
        auto row = t.x.row(r);
        lines.push_back({{"x", std::vector<double>(row.begin(), row.end())}, {"y", t.y[r]}});
    }
    write_jsonl(path, lines);
}

void write_corpus(const std::string& path, const std::vector<surrogate::PretrainExample>& corpus) {
    std::vector<json> lines;
    lines.reserve(corpus.size());
    for (const auto& ex : corpus)
        lines.push_back({{"x", matrix_to_json(ex.data.x)}, {"y", ex.data.y}, {"target", expr::to_prefix_text(ex.target)}});
    write_jsonl(path, lines);
}

std::vector<surrogate::PretrainExample> read_corpus(const std::string& path) {
    std::vector<surrogate::PretrainExample> out;
    for (const auto& j : read_jsonl(path)) {
        try {
            surrogate::PretrainExample ex;
            ex.data.x = matrix_from_json(j.at("x"));
            ex.data.y = j.at("y").get<std::vector<double>>();
            ex.target = expr::parse_prefix_text(j.at("target").get<std::string>());
            if (ex.data.y.size() != ex.data.rows()) throw Error("InvalidData", "corpus x/y row counts differ");
            out.push_back(std::move(ex));
        } catch (const json::exception& e) {
            throw Error("InvalidData", path + ": " + e.what());
        }
    }
    return out;
}

}  // namespace equate::io
