#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cloakbench/eval.hpp"
#include "cloakbench/image.hpp"

namespace cloakbench {

enum class TableFormat { kCsv, kMarkdown };

inline std::string fmt1(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  return buf;
}

inline std::string fmt_eps(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

/// RFC 4180 field quoting.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

namespace detail {

struct RowKey {
  std::string source;
  Method method;
  double epsilon;
  bool operator==(const RowKey&) const = default;
};

/// Distinct (source, method, epsilon) rows in matrix order.
inline std::vector<RowKey> row_keys(const TransferMatrix& mx) {
  std::vector<RowKey> rows;
  for (const auto& c : mx.cells) {
    RowKey k{c.source, c.method, c.epsilon};
    if (std::find(rows.begin(), rows.end(), k) == rows.end()) rows.push_back(k);
  }
  return rows;
}

inline std::string cell_value(const EvalCell* c, std::size_t k) {
  if (c == nullptr || !c->ok()) return "NA";
  const auto v = c->psr_at(k);
  return v ? fmt1(*v) : "NA";
}

inline std::string join_line(const std::vector<std::string>& fields, TableFormat f) {
  std::string out;
  if (f == TableFormat::kMarkdown) out += "| ";
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += f == TableFormat::kCsv ? "," : " | ";
    out += f == TableFormat::kCsv ? csv_field(fields[i]) : fields[i];
  }
  if (f == TableFormat::kMarkdown) out += " |";
  return out + (f == TableFormat::kCsv ? "\r\n" : "\n");
}

}  // namespace detail

/// Transfer table: one row per (source, method, epsilon), one column per
/// (target, k), PSR with one decimal place.
inline std::string emit_table(const TransferMatrix& mx, TableFormat format) {
  std::vector<std::string> header{"source", "method", "epsilon"};
  for (const auto& t : mx.meta.models)
    for (std::size_t k : mx.meta.k_values) header.push_back(t + " top-" + std::to_string(k));
  std::string out = detail::join_line(header, format);
  if (format == TableFormat::kMarkdown) {
    std::vector<std::string> rule(header.size(), "---");
    out += detail::join_line(rule, format);
  }
  for (const auto& row : detail::row_keys(mx)) {
    std::vector<std::string> fields{row.source, to_string(row.method), fmt_eps(row.epsilon)};
    for (const auto& t : mx.meta.models) {
      const auto* c = mx.find(row.source, row.method, row.epsilon, t);
      for (std::size_t k : mx.meta.k_values) fields.push_back(detail::cell_value(c, k));
    }
    out += detail::join_line(fields, format);
  }
  return out;
}

struct TextArtifact {
  std::string name;
  std::string content;
};

/// PSR-vs-epsilon series: one CSV per (source, method, k), one column per
/// target, one row per epsilon.
inline std::vector<TextArtifact> emit_curves(const TransferMatrix& mx) {
  std::vector<TextArtifact> out;
  for (const auto& source : mx.meta.models) {
    for (const auto& mname : mx.meta.methods) {
      const Method method = parse_method(mname);
      for (std::size_t k : mx.meta.k_values) {
        std::vector<std::string> header{"epsilon"};
        for (const auto& t : mx.meta.models) header.push_back(t);
        std::string body = detail::join_line(header, TableFormat::kCsv);
        for (double eps : mx.meta.epsilons) {
          std::vector<std::string> fields{fmt_eps(eps)};
          for (const auto& t : mx.meta.models)
            fields.push_back(detail::cell_value(mx.find(source, method, eps, t), k));
          body += detail::join_line(fields, TableFormat::kCsv);
        }
        out.push_back({"curve_" + source + "_" + mname + "_top" + std::to_string(k) + ".csv", body});
      }
    }
  }
  return out;
}

/// BIM minus ILLC PSR for every (source, epsilon, target, k), plus the mean
/// over transfer (source != target) cells per k.
inline std::string emit_method_delta(const TransferMatrix& mx, Method a = Method::kBim,
                                     Method b = Method::kIllc) {
  std::vector<std::string> header{"source", "epsilon"};
  for (const auto& t : mx.meta.models)
    for (std::size_t k : mx.meta.k_values) header.push_back(t + " top-" + std::to_string(k));
  std::string out = detail::join_line(header, TableFormat::kCsv);
  std::vector<double> transfer_sum(mx.meta.k_values.size(), 0.0);
  std::vector<std::size_t> transfer_n(mx.meta.k_values.size(), 0);
  for (const auto& source : mx.meta.models) {
    for (double eps : mx.meta.epsilons) {
      std::vector<std::string> fields{source, fmt_eps(eps)};
      for (const auto& t : mx.meta.models) {
        const auto* ca = mx.find(source, a, eps, t);
        const auto* cb = mx.find(source, b, eps, t);
        for (std::size_t q = 0; q < mx.meta.k_values.size(); ++q) {
          const std::size_t k = mx.meta.k_values[q];
          if (ca && cb && ca->ok() && cb->ok()) {
            const double d = *ca->psr_at(k) - *cb->psr_at(k);
            fields.push_back(fmt1(d));
            if (source != t) {
              transfer_sum[q] += d;
              ++transfer_n[q];
            }
          } else {
            fields.push_back("NA");
          }
        }
      }
      out += detail::join_line(fields, TableFormat::kCsv);
    }
  }
  std::vector<std::string> summary{"transfer-mean", ""};
  for (std::size_t i = 0; i < mx.meta.models.size(); ++i)
    for (std::size_t q = 0; q < mx.meta.k_values.size(); ++q)
      summary.push_back(transfer_n[q] ? fmt1(transfer_sum[q] / double(transfer_n[q])) : "NA");
  out += detail::join_line(summary, TableFormat::kCsv);
  return out;
}

/// Per-cell PSR and storage distortion for a set of JPEG qualities.
inline std::string emit_storage_sweep(const std::vector<std::pair<int, TransferMatrix>>& sweep) {
  std::vector<std::string> header{"quality", "source", "method", "epsilon", "target", "samples"};
  std::vector<std::size_t> ks = sweep.empty() ? std::vector<std::size_t>{} : sweep[0].second.meta.k_values;
  for (std::size_t k : ks) header.push_back("top-" + std::to_string(k));
  for (const char* h : {"mean_storage_delta", "max_storage_delta", "max_stored_linf"}) header.push_back(h);
  std::string out = detail::join_line(header, TableFormat::kCsv);
  for (const auto& [quality, mx] : sweep) {
    for (const auto& c : mx.cells) {
      std::vector<std::string> f{std::to_string(quality), c.source, to_string(c.method), fmt_eps(c.epsilon),
                                 c.target, std::to_string(c.sample_count)};
      for (std::size_t k : ks) f.push_back(detail::cell_value(&c, k));
      double mean = 0.0, mx_d = 0.0, mx_l = 0.0;
      for (double d : c.storage_delta) {
        mean += d;
        mx_d = std::max(mx_d, d);
      }
      if (!c.storage_delta.empty()) mean /= double(c.storage_delta.size());
      for (double d : c.stored_linf) mx_l = std::max(mx_l, d);
      f.push_back(fmt1(mean));
      f.push_back(fmt1(mx_d));
      f.push_back(c.stored_linf.empty() ? "NA" : fmt1(mx_l));
      out += detail::join_line(f, TableFormat::kCsv);
    }
  }
  return out;
}

/// Per-image max|stored - x_adv| and max|stored - x| for each quality and
/// (source, method, epsilon); taken from the diagonal cell where no resize
/// happens.
inline std::string emit_storage_images(const std::vector<std::pair<int, TransferMatrix>>& sweep) {
  std::string out = detail::join_line(
      {"quality", "source", "method", "epsilon", "image", "storage_delta", "stored_linf", "epsilon_exceeded"},
      TableFormat::kCsv);
  for (const auto& [quality, mx] : sweep) {
    for (const auto& c : mx.cells) {
      if (c.source != c.target) continue;
      for (std::size_t i = 0; i < c.storage_delta.size(); ++i) {
        const bool has_linf = i < c.stored_linf.size();
        out += detail::join_line({std::to_string(quality), c.source, to_string(c.method), fmt_eps(c.epsilon),
                                  std::to_string(i), fmt1(c.storage_delta[i]),
                                  has_linf ? fmt1(c.stored_linf[i]) : "NA",
                                  has_linf && c.stored_linf[i] > c.epsilon ? "1" : "0"},
                                 TableFormat::kCsv);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image grids

struct GridLayout {
  std::size_t samples = 4;   // rows per contact sheet
  std::size_t overview_index = 0;
  std::size_t margin = 2;
};

struct GridImage {
  std::string name;
  Image image;
  std::size_t rows = 0;
  std::size_t cols = 0;  // includes the leftmost original column
};

namespace detail {

inline Image compose_grid(const std::vector<std::vector<const Image*>>& cells, std::size_t margin) {
  std::size_t side = 1;
  for (const auto& row : cells)
    for (const auto* img : row)
      if (img) side = std::max({side, img->height, img->width});
  const std::size_t rows = cells.size();
  const std::size_t cols = rows ? cells[0].size() : 0;
  Image grid(margin + rows * (side + margin), margin + cols * (side + margin), 255.0f);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const Image* img = cells[r][c];
      if (!img) continue;
      const std::size_t oy = margin + r * (side + margin), ox = margin + c * (side + margin);
      for (std::size_t y = 0; y < img->height; ++y)
        for (std::size_t x = 0; x < img->width; ++x)
          for (std::size_t ch = 0; ch < Image::channels; ++ch)
            grid.at(oy + y, ox + x, ch) = static_cast<float>(to_u8(img->at(y, x, ch)));
    }
  return grid;
}

}  // namespace detail

/// Contact sheets. One per (model, method): a row per sample, the original
/// in the leftmost column, then one column per epsilon. Plus an overview
/// with one row per (model, method) for a single sample.
inline std::vector<GridImage> emit_image_grid(const std::vector<AdvBatch>& batches,
                                              const std::vector<std::string>& model_ids,
                                              const GridLayout& layout = {}) {
  std::vector<GridImage> out;
  std::vector<std::pair<std::size_t, Method>> keys;
  std::vector<double> eps;
  for (const auto& b : batches) {
    if (std::find(keys.begin(), keys.end(), std::pair{b.source, b.method}) == keys.end())
      keys.emplace_back(b.source, b.method);
    if (std::find(eps.begin(), eps.end(), b.epsilon) == eps.end()) eps.push_back(b.epsilon);
  }
  auto batch_for = [&](std::size_t source, Method m, double e) -> const AdvBatch* {
    for (const auto& b : batches)
      if (b.source == source && b.method == m && b.epsilon == e) return &b;
    return nullptr;
  };
  std::vector<std::vector<const Image*>> overview;
  for (const auto& [source, method] : keys) {
    std::vector<std::vector<const Image*>> sheet;
    const auto* first = batch_for(source, method, eps.front());
    const std::size_t n = first ? std::min(layout.samples, first->records.size()) : 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<const Image*> row{&first->records[i].x};
      for (double e : eps) {
        const auto* b = batch_for(source, method, e);
        row.push_back(b && i < b->records.size() ? &b->records[i].x_adv : nullptr);
      }
      sheet.push_back(std::move(row));
    }
    const std::string name = "grid_" + model_ids.at(source) + "_" + to_string(method) + ".png";
    out.push_back({name, detail::compose_grid(sheet, layout.margin), sheet.size(), eps.size() + 1});

    std::vector<const Image*> orow{first && layout.overview_index < first->records.size()
                                       ? &first->records[layout.overview_index].x
                                       : nullptr};
    for (double e : eps) {
      const auto* b = batch_for(source, method, e);
      orow.push_back(b && layout.overview_index < b->records.size() ? &b->records[layout.overview_index].x_adv
                                                                    : nullptr);
    }
    overview.push_back(std::move(orow));
  }
  out.push_back({"grid_overview.png", detail::compose_grid(overview, layout.margin), overview.size(),
                 eps.size() + 1});
  return out;
}

// ---------------------------------------------------------------------------
// Matrix persistence

inline nlohmann::json to_json(const TransferMatrix& mx) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : mx.cells) {
    cells.push_back({{"source", c.source}, {"method", to_string(c.method)}, {"epsilon", c.epsilon},
                     {"target", c.target}, {"k", c.k_values}, {"psr", c.psr}, {"samples", c.sample_count},
                     {"detect_fail", c.detect_fail_count}, {"attack_errors", c.attack_error_count},
                     {"storage_delta", c.storage_delta}, {"stored_linf", c.stored_linf}, {"error", c.error}});
  }
  const auto& m = mx.meta;
  nlohmann::json meta = {{"dataset_id", m.dataset_id}, {"num_classes", m.num_classes},
                         {"eval_samples", m.eval_samples}, {"alpha", m.alpha}, {"global_seed", m.global_seed},
                         {"models", m.models}, {"model_seeds", m.model_seeds}, {"methods", m.methods},
                         {"epsilons", m.epsilons}, {"k_values", m.k_values}, {"warnings", m.warnings}};
  meta["jpeg_quality"] = m.jpeg_quality ? nlohmann::json(*m.jpeg_quality) : nlohmann::json(nullptr);
  return {{"meta", meta}, {"cells", cells}};
}

inline TransferMatrix matrix_from_json(const nlohmann::json& j) {
  TransferMatrix mx;
  const auto& m = j.at("meta");
  mx.meta.dataset_id = m.at("dataset_id");
  mx.meta.num_classes = m.at("num_classes");
  mx.meta.eval_samples = m.at("eval_samples");
  mx.meta.alpha = m.at("alpha");
  mx.meta.global_seed = m.at("global_seed");
  mx.meta.models = m.at("models").get<std::vector<std::string>>();
  mx.meta.model_seeds = m.at("model_seeds").get<std::vector<std::uint64_t>>();
  mx.meta.methods = m.at("methods").get<std::vector<std::string>>();
  mx.meta.epsilons = m.at("epsilons").get<std::vector<double>>();
  mx.meta.k_values = m.at("k_values").get<std::vector<std::size_t>>();
  mx.meta.warnings = m.at("warnings").get<std::vector<std::string>>();
  if (!m.at("jpeg_quality").is_null()) mx.meta.jpeg_quality = m.at("jpeg_quality").get<int>();
  for (const auto& c : j.at("cells")) {
    EvalCell cell;
    cell.source = c.at("source");
    cell.method = parse_method(c.at("method"));
    cell.epsilon = c.at("epsilon");
    cell.target = c.at("target");
    cell.k_values = c.at("k").get<std::vector<std::size_t>>();
    cell.psr = c.at("psr").get<std::vector<double>>();
    cell.sample_count = c.at("samples");
    cell.detect_fail_count = c.at("detect_fail");
    cell.attack_error_count = c.at("attack_errors");
    cell.storage_delta = c.at("storage_delta").get<std::vector<double>>();
    cell.stored_linf = c.at("stored_linf").get<std::vector<double>>();
    cell.error = c.at("error");
    mx.cells.push_back(std::move(cell));
  }
  return mx;
}

}  // namespace cloakbench
