#include "vividforge/config.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "vividforge/error.hpp"
#include "vividforge/rng.hpp"

namespace vividforge {
namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  auto i = [&](const char* k, int64_t v) { c.values[k] = std::to_string(v); };
  auto d = [&](const char* k, double v) { c.values[k] = fmt_double(v); };
  auto b = [&](const char* k, bool v) { c.values[k] = v ? "true" : "false"; };

  i("synth.clips", 10);
  i("synth.frames", 40);
  i("synth.seed", 1);
  i("synth.height", 64);
  i("synth.width", 64);

  i("a2m_expr.d_model", 64);
  i("a2m_expr.heads", 4);
  i("a2m_expr.layers", 1);
  d("a2m_expr.lr", 1e-4);
  i("a2m_expr.steps", 200);
  i("a2m_expr.batch", 4);
  i("a2m_expr.seed", 1);
  b("a2m_expr.teacher_forcing", true);
  b("a2m_expr.shared_trunk", true);
  b("a2m_expr.blendshape_only", false);
  b("a2m_expr.vertex_only", false);

  i("a2m_pose.K", 64);
  i("a2m_pose.d_z", 32);
  i("a2m_pose.downsample", 4);
  i("a2m_pose.phase1_steps", 300);
  i("a2m_pose.phase2_steps", 300);
  d("a2m_pose.lr", 1e-4);
  i("a2m_pose.seed", 1);
  b("a2m_pose.absolute_pose", false);
  b("a2m_pose.initial_pose", true);
  i("a2m_pose.d_model", 64);
  i("a2m_pose.heads", 4);
  i("a2m_pose.mapper_layers", 2);

  d("m2v.lr", 1e-5);
  i("m2v.steps", 2000);
  i("m2v.batch", 2);
  i("m2v.seed", 1);
  b("m2v.lip_branch", true);
  d("m2v.kl_weight", 0.0);
  d("m2v.flow_scale", 8.0);
  d("m2v.lip_sigma", 2.0);
  i("m2v.lip_maps", 8);
  d("m2v.w_perc", 10.0);
  d("m2v.w_fm", 10.0);
  d("m2v.w_adv", 1.0);

  d("infer.fps", 25.0);
  return c;
}

bool RunConfig::is_known_key(const std::string& key) {
  static const RunConfig base = defaults();
  return base.values.count(key) != 0;
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open config file: " + path);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": expected 'key = value', got '" + t + "'");
    }
    set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!is_known_key(key)) throw DataError("unknown config key '" + key + "'");
  values[key] = value;
}

void RunConfig::set_int(const std::string& key, int64_t v) {
  set(key, std::to_string(v));
}
void RunConfig::set_double(const std::string& key, double v) {
  set(key, fmt_double(v));
}
void RunConfig::set_bool(const std::string& key, bool v) {
  set(key, v ? "true" : "false");
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values.find(key);
  if (it == values.end()) throw DataError("unknown config key '" + key + "'");
  return it->second;
}

int64_t RunConfig::get_int(const std::string& key) const {
  const std::string& s = get(key);
  try {
    size_t used = 0;
    int64_t v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("config key '" + key + "' needs an integer, got '" + s +
                    "'");
  }
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& s = get(key);
  try {
    size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("config key '" + key + "' needs a number, got '" + s +
                    "'");
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& s = get(key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw DataError("config key '" + key + "' needs true/false, got '" + s +
                  "'");
}

std::string RunConfig::serialize() const {
  std::ostringstream out;
  for (const auto& [k, v] : values) out << k << " = " << v << "\n";
  return out.str();
}

uint64_t RunConfig::hash() const { return fnv1a64(serialize()); }

void RunConfig::write_snapshot(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write config snapshot: " + path);
  char tag[32];
  std::snprintf(tag, sizeof tag, "%016" PRIx64, hash());
  out << "# hash " << tag << "\n" << serialize();
  if (!out) throw DataError("failed writing config snapshot: " + path);
}

}  // namespace vividforge
