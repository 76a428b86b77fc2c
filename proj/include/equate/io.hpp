#pragma once

// JSON Lines helpers and the on-disk forms of tables and corpora.

#include <string>
#include <vector>

#include "equate/data.hpp"
#include "equate/surrogate.hpp"
#include "json.hpp"

namespace equate::io {

using nlohmann::json;

/// Errors: Io (cannot open/write), InvalidJson (with line number).
std::vector<json> read_jsonl(const std::string& path);
void write_jsonl(const std::string& path, const std::vector<json>& lines);

json read_json(const std::string& path);
void write_json(const std::string& path, const json& j);
void write_text(const std::string& path, const std::string& text);

json matrix_to_json(const DataMatrix& m);
/// Rectangular array of number rows. Throws InvalidData.
DataMatrix matrix_from_json(const json& j);

/// Task data: one `{"x": [...], "y": v}` object per row.
DataTable read_table(const std::string& path);
void write_table(const std::string& path, const DataTable& t);

/// Corpus: one `{"x": [[...]], "y": [...], "target": "prefix text"}` per example.
void write_corpus(const std::string& path, const std::vector<surrogate::PretrainExample>& corpus);
std::vector<surrogate::PretrainExample> read_corpus(const std::string& path);

}  // namespace equate::io
