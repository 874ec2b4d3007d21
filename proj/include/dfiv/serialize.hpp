#pragma once

#include "dfiv/core.hpp"

#include "json.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>

namespace dfiv {

using ordered_json = nlohmann::ordered_json;

namespace detail {

inline ordered_json mat_to_json(const Mat& m) {
  ordered_json rows = ordered_json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    ordered_json row = ordered_json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Mat mat_from_json(const ordered_json& j) {
  const auto rows = static_cast<Index>(j.size());
  if (rows == 0) return Mat(0, 0);
  const auto cols = static_cast<Index>(j.at(0).size());
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index c = 0; c < cols; ++c) m(i, c) = j.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(c)).get<double>();
  return m;
}

inline ordered_json vec_to_json(const Vec& v) {
  ordered_json out = ordered_json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

inline Vec vec_from_json(const ordered_json& j) {
  Vec v(static_cast<Index>(j.size()));
  for (Index i = 0; i < v.size(); ++i) v[i] = j.at(static_cast<std::size_t>(i)).get<double>();
  return v;
}

}  // namespace detail

inline ordered_json featuremap_to_json(const FeatureMap& fm) {
  ordered_json j;
  j["type"] = "featuremap";
  ordered_json layers = ordered_json::array();
  for (const auto& l : fm.layers) {
    ordered_json lj;
    lj["activation"] = activation_name(l.act);
    lj["weight"] = detail::mat_to_json(l.weight);
    lj["bias"] = detail::vec_to_json(l.bias);
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  return j;
}

inline FeatureMap featuremap_from_json(const ordered_json& j) {
  if (j.value("type", "") != "featuremap")
    throw std::runtime_error("featuremap_from_json: wrong document type");
  FeatureMap fm;
  for (const auto& lj : j.at("layers")) {
    Layer l;
    l.act = activation_from_name(lj.at("activation").get<std::string>());
    l.weight = detail::mat_from_json(lj.at("weight"));
    l.bias = detail::vec_from_json(lj.at("bias"));
    fm.layers.push_back(std::move(l));
  }
  fm.validate();
  return fm;
}

inline ordered_json featurizer_to_json(const Featurizer& f) {
  ordered_json j;
  switch (f.kind) {
    case Featurizer::Kind::Net:
      j["kind"] = "net";
      j["net"] = featuremap_to_json(f.net);
      break;
    case Featurizer::Kind::Polynomial:
      j["kind"] = "polynomial";
      j["inputs"] = f.poly_inputs;
      j["degree"] = f.poly_degree;
      break;
    case Featurizer::Kind::OneHotPair:
      j["kind"] = "onehot_pair";
      j["first"] = f.onehot_first;
      j["second"] = f.onehot_second;
      break;
  }
  j["intercept"] = f.intercept;
  return j;
}

inline Featurizer featurizer_from_json(const ordered_json& j) {
  Featurizer f;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "net") {
    f.kind = Featurizer::Kind::Net;
    f.net = featuremap_from_json(j.at("net"));
  } else if (kind == "polynomial") {
    f.kind = Featurizer::Kind::Polynomial;
    f.poly_inputs = j.at("inputs").get<int>();
    f.poly_degree = j.at("degree").get<int>();
  } else if (kind == "onehot_pair") {
    f.kind = Featurizer::Kind::OneHotPair;
    f.onehot_first = j.at("first").get<Index>();
    f.onehot_second = j.at("second").get<Index>();
  } else {
    throw std::runtime_error("featurizer_from_json: unknown kind " + kind);
  }
  f.intercept = j.at("intercept").get<bool>();
  return f;
}

inline ordered_json model_to_json(const StructuralModel& m) {
  ordered_json j;
  j["type"] = "dfiv-model";
  j["version"] = 1;
  j["u"] = detail::vec_to_json(m.u);
  j["psi"] = featurizer_to_json(m.psi);
  j["tensor_product"] = m.xi.has_value();
  if (m.xi) j["xi"] = featurizer_to_json(*m.xi);
  return j;
}

inline StructuralModel model_from_json(const ordered_json& j) {
  if (j.value("type", "") != "dfiv-model")
    throw std::runtime_error("model_from_json: wrong document type");
  StructuralModel m;
  m.u = detail::vec_from_json(j.at("u"));
  m.psi = featurizer_from_json(j.at("psi"));
  if (j.at("tensor_product").get<bool>()) m.xi = featurizer_from_json(j.at("xi"));
  return m;
}

/// Whole-file atomic write: temp file in place, then rename.
inline void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("write_file_atomic: cannot open " + tmp);
    os << content;
    if (!os.good()) throw std::runtime_error("write_file_atomic: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("write_file_atomic: rename failed for " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_file: cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

inline void save_model(const std::string& path, const StructuralModel& m) {
  write_file_atomic(path, model_to_json(m).dump(2) + "\n");
}

inline StructuralModel load_model(const std::string& path) {
  return model_from_json(ordered_json::parse(read_file(path)));
}

inline void save_featuremap(const std::string& path, const FeatureMap& fm) {
  write_file_atomic(path, featuremap_to_json(fm).dump(2) + "\n");
}

inline FeatureMap load_featuremap(const std::string& path) {
  return featuremap_from_json(ordered_json::parse(read_file(path)));
}

}  // namespace dfiv
