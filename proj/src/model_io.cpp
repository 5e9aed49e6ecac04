#include "shotnoise/model_io.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "shotnoise/errors.hpp"

namespace shotnoise {

namespace {

using nlohmann::json;

void require_keys(const json& j, std::initializer_list<const char*> allowed,
                  const char* context) {
  if (!j.is_object()) throw std::invalid_argument(std::string(context) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (key == k) {
        known = true;
        break;
      }
    if (!known)
      throw std::invalid_argument(std::string(context) + ": unknown key '" + key + "'");
  }
}

double require_number(const json& j, const char* key, const char* context) {
  if (!j.contains(key) || !j.at(key).is_number())
    throw std::invalid_argument(std::string(context) + ": missing numeric '" + key + "'");
  return j.at(key).get<double>();
}

enum class ValueKind { Payload, Affine, NormAffine };
enum class ProfileKind { Instantaneous, ExpRamp, LinearRamp };

}  // namespace

ShotNoiseModel model_from_json(const json& spec) {
  require_keys(spec, {"d", "T", "atoms", "shape", "remainder", "envelopes"}, "model");

  const int d = [&] {
    if (!spec.contains("d") || !spec.at("d").is_number_integer())
      throw std::invalid_argument("model: missing integer 'd'");
    return spec.at("d").get<int>();
  }();
  if (d < 1) throw std::invalid_argument("model: d must be a positive integer");
  const double T = require_number(spec, "T", "model");
  if (!(T > 0.0) || !std::isfinite(T)) throw std::invalid_argument("model: T must be positive");

  if (!spec.contains("atoms") || !spec.at("atoms").is_array() || spec.at("atoms").empty())
    throw std::invalid_argument("model: 'atoms' must be a non-empty array");
  std::vector<Atom> atoms;
  for (const auto& ja : spec.at("atoms")) {
    require_keys(ja, {"id", "payload", "weight"}, "atom");
    Atom a;
    if (!ja.contains("id") || !ja.at("id").is_string())
      throw std::invalid_argument("atom: missing string 'id'");
    a.id = ja.at("id").get<std::string>();
    if (!ja.contains("payload") || !ja.at("payload").is_array())
      throw std::invalid_argument("atom '" + a.id + "': missing array 'payload'");
    for (const auto& v : ja.at("payload")) {
      if (!v.is_number()) throw std::invalid_argument("atom '" + a.id + "': payload entries must be numbers");
      a.payload.push_back(v.get<double>());
    }
    a.weight = require_number(ja, "weight", ("atom '" + a.id + "'").c_str());
    atoms.push_back(std::move(a));
  }

  // Shot value family, nested under shape.params.value.
  const json& jshape = spec.contains("shape") ? spec.at("shape") : json::object();
  require_keys(jshape, {"family", "params"}, "shape");
  if (!jshape.contains("family") || !jshape.at("family").is_string())
    throw std::invalid_argument("shape: missing string 'family'");
  const std::string family = jshape.at("family").get<std::string>();
  const json params = jshape.contains("params") ? jshape.at("params") : json::object();

  ProfileKind profile;
  double beta = 0.0, ramp_time = 0.0;
  if (family == "instantaneous") {
    require_keys(params, {"value"}, "shape.params");
    profile = ProfileKind::Instantaneous;
  } else if (family == "exp_ramp") {
    require_keys(params, {"value", "beta"}, "shape.params");
    beta = require_number(params, "beta", "shape.params");
    if (!(beta > 0.0)) throw std::invalid_argument("shape: beta must be positive");
    profile = ProfileKind::ExpRamp;
  } else if (family == "linear_ramp") {
    require_keys(params, {"value", "ramp_time"}, "shape.params");
    ramp_time = require_number(params, "ramp_time", "shape.params");
    if (!(ramp_time > 0.0)) throw std::invalid_argument("shape: ramp_time must be positive");
    profile = ProfileKind::LinearRamp;
  } else {
    throw std::invalid_argument("shape: unknown family '" + family + "'");
  }

  const json jvalue = params.contains("value") ? params.at("value") : json({{"kind", "payload"}});
  require_keys(jvalue, {"kind", "base", "slope", "direction"}, "shape.params.value");
  if (!jvalue.contains("kind") || !jvalue.at("kind").is_string())
    throw std::invalid_argument("shape.params.value: missing string 'kind'");
  const std::string kind_name = jvalue.at("kind").get<std::string>();

  ValueKind kind;
  double base = 1.0, slope = 0.0;
  Vec direction(static_cast<std::size_t>(d), 1.0);
  if (kind_name == "payload") {
    kind = ValueKind::Payload;
  } else if (kind_name == "affine") {
    kind = ValueKind::Affine;
    base = jvalue.contains("base") ? require_number(jvalue, "base", "value") : 1.0;
    slope = jvalue.contains("slope") ? require_number(jvalue, "slope", "value") : 1.0;
    if (!(base >= 0.0) || !(slope >= 0.0))
      throw std::invalid_argument("value: affine base and slope must be nonnegative");
  } else if (kind_name == "norm_affine") {
    kind = ValueKind::NormAffine;
    if (jvalue.contains("direction")) {
      direction.clear();
      for (const auto& v : jvalue.at("direction")) direction.push_back(v.get<double>());
      if (direction.size() != static_cast<std::size_t>(d))
        throw std::invalid_argument("value: direction must have length d");
      for (double v : direction)
        if (!(v >= 0.0)) throw std::invalid_argument("value: direction must be nonnegative");
    }
  } else {
    throw std::invalid_argument("value: unknown kind '" + kind_name + "'");
  }

  // Payload sanity per kind.
  for (const Atom& a : atoms) {
    const bool full_dim = kind == ValueKind::Payload || kind == ValueKind::Affine;
    if (full_dim && a.payload.size() != static_cast<std::size_t>(d))
      throw std::invalid_argument("atom '" + a.id + "': payload must have length d");
    if (kind == ValueKind::NormAffine && a.payload.empty())
      throw std::invalid_argument("atom '" + a.id + "': payload must carry the scale in entry 0");
    for (double v : a.payload)
      if (!(v >= 0.0) || !std::isfinite(v))
        throw std::invalid_argument("atom '" + a.id + "': payload must be finite and nonnegative");
  }

  // Remainder family.
  const json& jrem = spec.contains("remainder") ? spec.at("remainder") : json({{"family", "none"}});
  require_keys(jrem, {"family", "params"}, "remainder");
  if (!jrem.contains("family") || !jrem.at("family").is_string())
    throw std::invalid_argument("remainder: missing string 'family'");
  const std::string rem_family = jrem.at("family").get<std::string>();
  double rem_coeff = 0.0;
  if (rem_family == "none") {
    require_keys(jrem.contains("params") ? jrem.at("params") : json::object(), {}, "remainder.params");
  } else if (rem_family == "vanishing") {
    const json rp = jrem.contains("params") ? jrem.at("params") : json::object();
    require_keys(rp, {"coeff"}, "remainder.params");
    rem_coeff = rp.contains("coeff") ? require_number(rp, "coeff", "remainder.params") : 1.0;
    if (!(rem_coeff >= 0.0)) throw std::invalid_argument("remainder: coeff must be nonnegative");
  } else {
    throw std::invalid_argument("remainder: unknown family '" + rem_family + "'");
  }
  const bool zero_remainder = rem_family == "none" || rem_coeff == 0.0;

  ShotNoiseModel model{.d = d, .T = T, .marks = MarkSpace(atoms)};
  model.instantaneous = profile == ProfileKind::Instantaneous;
  model.state_independent = kind == ValueKind::Payload;
  model.zero_remainder = zero_remainder;

  const std::size_t dim = static_cast<std::size_t>(d);
  std::vector<Vec> payloads;
  payloads.reserve(atoms.size());
  for (const Atom& a : atoms) payloads.push_back(a.payload);

  auto shot_value = [kind, base, slope, direction, payloads, dim](std::size_t k,
                                                                  const Vec& x) -> Vec {
    const Vec& p = payloads[k];
    switch (kind) {
      case ValueKind::Payload:
        return p;
      case ValueKind::Affine: {
        Vec out(dim);
        for (std::size_t i = 0; i < dim; ++i) out[i] = p[i] * (base + slope * x[i]);
        return out;
      }
      case ValueKind::NormAffine: {
        const double s = p[0] * (1.0 + norm2(x));
        Vec out(dim);
        for (std::size_t i = 0; i < dim; ++i) out[i] = s * direction[i];
        return out;
      }
    }
    return Vec(dim, 0.0);
  };

  model.shot_value = shot_value;

  model.shot_value_jac = [kind, slope, direction, payloads, dim](std::size_t k, const Vec& x,
                                                                 Mat& jac) {
    jac.assign(dim * dim, 0.0);
    const Vec& p = payloads[k];
    switch (kind) {
      case ValueKind::Payload:
        break;
      case ValueKind::Affine:
        for (std::size_t i = 0; i < dim; ++i) jac[i * dim + i] = p[i] * slope;
        break;
      case ValueKind::NormAffine: {
        const double n = norm2(x);
        if (n == 0.0) break;  // subgradient at the origin; never used by the flow
        for (std::size_t i = 0; i < dim; ++i)
          for (std::size_t l = 0; l < dim; ++l)
            jac[i * dim + l] = p[0] * direction[i] * x[l] / n;
        break;
      }
    }
  };

  model.hbar = [shot_value, profile, beta, ramp_time](double t, std::size_t k,
                                                      const Vec& x) -> Vec {
    double factor = 0.0;
    switch (profile) {
      case ProfileKind::Instantaneous:
        factor = t > 0.0 ? 1.0 : 0.0;
        break;
      case ProfileKind::ExpRamp:
        factor = -std::expm1(-beta * t);
        break;
      case ProfileKind::LinearRamp:
        factor = std::min(t / ramp_time, 1.0);
        break;
    }
    Vec out = shot_value(k, x);
    for (double& v : out) v *= factor;
    return out;
  };

  if (zero_remainder) {
    model.remainder = [dim](double, double, std::size_t, const Vec&) { return Vec(dim, 0.0); };
  } else {
    model.remainder = [dim, rem_coeff](double eps, double, std::size_t, const Vec& x) {
      const double level = rem_coeff * std::min(eps, 1.0) * (norm2(x) + 1.0);
      return Vec(dim, level);
    };
  }

  // Envelopes: exact per-family formulas, or explicit per-atom overrides.
  std::vector<double> lip(atoms.size(), 0.0), growth(atoms.size(), 0.0),
      sig(atoms.size(), zero_remainder ? 0.0 : rem_coeff * std::sqrt(static_cast<double>(d)));
  for (std::size_t k = 0; k < atoms.size(); ++k) {
    const Vec& p = payloads[k];
    switch (kind) {
      case ValueKind::Payload:
        lip[k] = 0.0;
        growth[k] = norm2(p);
        break;
      case ValueKind::Affine: {
        double pmax = 0.0;
        for (double v : p) pmax = std::max(pmax, v);
        lip[k] = slope * pmax;
        growth[k] = std::max(base * norm2(p), slope * pmax);
        break;
      }
      case ValueKind::NormAffine:
        lip[k] = growth[k] = p[0] * norm2(direction);
        break;
    }
  }

  if (spec.contains("envelopes")) {
    const json& je = spec.at("envelopes");
    require_keys(je, {"mode", "L_h", "M_h", "varsigma"}, "envelopes");
    const std::string mode = je.contains("mode") ? je.at("mode").get<std::string>() : "auto";
    if (mode == "explicit") {
      auto fill = [&](const char* key, std::vector<double>& dst) {
        if (!je.contains(key)) return;
        const json& m = je.at(key);
        for (std::size_t k = 0; k < atoms.size(); ++k) {
          if (!m.contains(atoms[k].id))
            throw std::invalid_argument(std::string("envelopes.") + key + ": missing atom '" +
                                        atoms[k].id + "'");
          dst[k] = m.at(atoms[k].id).get<double>();
        }
      };
      fill("L_h", lip);
      fill("M_h", growth);
      fill("varsigma", sig);
    } else if (mode != "auto") {
      throw std::invalid_argument("envelopes: mode must be 'auto' or 'explicit'");
    }
  }

  model.lipschitz = [lip](std::size_t k) { return lip[k]; };
  model.growth = [growth](std::size_t k) { return growth[k]; };
  model.varsigma = [sig](std::size_t k) { return sig[k]; };
  return model;
}

ShotNoiseModel model_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("model JSON parse error: ") + e.what());
  }
  return model_from_json(j);
}

ShotNoiseModel model_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return model_from_json_text(buf.str());
}

}  // namespace shotnoise
