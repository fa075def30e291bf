#include "convirt/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace convirt {

ConfigError::ConfigError(std::size_t line, const std::string& what)
    : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

RunConfig::RunConfig() {
    augment.output_size = model.image_size;
    finetune.head = probe.optimizer;
}

void RunConfig::validate() const {
    synth.validate();
    augment.validate();
    model.validate();
    loss.validate();
    train.validate();
    probe.optimizer.validate();
    finetune.head.validate();
    require(augment.output_size == model.image_size, "augment.output_size must equal model.image_size");
    require(probe.fraction > 0.0 && probe.fraction <= 1.0, "probe.fraction must lie in (0,1]");
    require(!retrieval.k.empty(), "retrieval.k must list at least one cutoff");
}

namespace {

// Values are parsed to a type, then checked against a range. Both failures are
// reported as ConfigError by the caller with the offending line.
struct TypeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct RangeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::istringstream is(v);
    for (std::string item; std::getline(is, item, ',');) out.push_back(trim(item));
    if (!v.empty() && v.back() == ',') out.push_back("");
    return out;
}

std::uint64_t parse_u64(const std::string& v) {
    std::uint64_t x = 0;
    const auto* end = v.data() + v.size();
    const auto [p, ec] = std::from_chars(v.data(), end, x);
    if (v.empty() || ec != std::errc() || p != end) throw TypeError("expected a non-negative integer, got '" + v + "'");
    return x;
}

double parse_double(const std::string& v) {
    double x = 0.0;
    const auto* end = v.data() + v.size();
    const auto [p, ec] = std::from_chars(v.data(), end, x);
    if (v.empty() || ec != std::errc() || p != end || !std::isfinite(x))
        throw TypeError("expected a finite number, got '" + v + "'");
    return x;
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw TypeError("expected true or false, got '" + v + "'");
}

std::string fmt_double(double x) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, p);
}

struct Field {
    std::string key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

using Check = std::function<bool(double)>;

Check at_least(double lo) {
    return [lo](double x) { return x >= lo; };
}
Check positive() {
    return [](double x) { return x > 0.0; };
}
Check within(double lo, double hi) {
    return [lo, hi](double x) { return x >= lo && x <= hi; };
}
Check any() {
    return [](double) { return true; };
}

class FieldTable {
public:
    std::vector<Field> fields;

    void size(const std::string& key, std::size_t& ref, Check ok, const std::string& range) {
        fields.push_back({key, [&ref] { return std::to_string(ref); },
                          [&ref, ok, range](const std::string& v) {
                              const auto x = parse_u64(v);
                              if (!ok(static_cast<double>(x))) throw RangeError("value " + v + " out of range (" + range + ")");
                              ref = static_cast<std::size_t>(x);
                          }});
    }
    void u64(const std::string& key, std::uint64_t& ref) {
        fields.push_back({key, [&ref] { return std::to_string(ref); }, [&ref](const std::string& v) { ref = parse_u64(v); }});
    }
    void real(const std::string& key, double& ref, Check ok, const std::string& range) {
        fields.push_back({key, [&ref] { return fmt_double(ref); },
                          [&ref, ok, range](const std::string& v) {
                              const double x = parse_double(v);
                              if (!ok(x)) throw RangeError("value " + v + " out of range (" + range + ")");
                              ref = x;
                          }});
    }
    void flag(const std::string& key, bool& ref) {
        fields.push_back({key, [&ref] { return std::string(ref ? "true" : "false"); },
                          [&ref](const std::string& v) { ref = parse_bool(v); }});
    }
    void text(const std::string& key, std::string& ref) {
        fields.push_back({key, [&ref] { return ref; }, [&ref](const std::string& v) { ref = v; }});
    }
    void sizes(const std::string& key, std::vector<std::size_t>& ref, std::size_t min_value) {
        fields.push_back({key,
                          [&ref] {
                              std::string s;
                              for (std::size_t i = 0; i < ref.size(); ++i) s += (i ? "," : "") + std::to_string(ref[i]);
                              return s;
                          },
                          [&ref, min_value](const std::string& v) {
                              std::vector<std::size_t> out;
                              for (const auto& item : split_list(v)) {
                                  const auto x = parse_u64(item);
                                  if (x < min_value)
                                      throw RangeError("list entry " + item + " below " + std::to_string(min_value));
                                  out.push_back(static_cast<std::size_t>(x));
                              }
                              if (out.empty()) throw RangeError("list must not be empty");
                              ref = std::move(out);
                          }});
    }
    void names(const std::string& key, std::set<std::string>& ref) {
        fields.push_back({key,
                          [&ref] {
                              std::string s;
                              for (const auto& n : ref) s += (s.empty() ? "" : ",") + n;
                              return s;
                          },
                          [&ref](const std::string& v) {
                              std::set<std::string> out;
                              for (const auto& item : split_list(v))
                                  if (!item.empty()) out.insert(item);
                              ref = std::move(out);
                          }});
    }
    void interval(const std::string& key, Interval& ref, Check ok, const std::string& range) {
        real(key + "_min", ref.lo, ok, range);
        real(key + "_max", ref.hi, ok, range);
    }
    template <class E, class ToS, class FromS>
    void choice(const std::string& key, E& ref, ToS to_s, FromS from_s) {
        fields.push_back({key, [&ref, to_s] { return to_s(ref); },
                          [&ref, from_s](const std::string& v) {
                              try {
                                  ref = from_s(v);
                              } catch (const std::exception&) {
                                  throw TypeError("unrecognized value '" + v + "'");
                              }
                          }});
    }
};

FieldTable table_for(RunConfig& c) {
    FieldTable t;
    t.u64("seed", c.seed);
    t.u64("eval_seed", c.eval_seed);
    t.text("out_dir", c.out_dir);

    auto& s = c.synth;
    t.size("synth.n_classes", s.n_classes, within(2, kMaxSyntheticClasses), "2..24");
    t.size("synth.n_pairs", s.n_pairs, at_least(2), ">= 2");
    t.size("synth.image_size", s.image_size, at_least(8), ">= 8");
    t.real("synth.noise_std", s.noise_std, at_least(0), ">= 0");
    t.real("synth.clutter_gain", s.clutter_gain, at_least(0), ">= 0");
    t.size("synth.max_clutter_bumps", s.max_clutter_bumps, at_least(1), ">= 1");
    t.size("synth.min_sentences", s.min_sentences, at_least(1), ">= 1");
    t.size("synth.max_sentences", s.max_sentences, at_least(1), ">= 1");
    t.size("synth.min_sentence_tokens", s.min_sentence_tokens, at_least(1), ">= 1");
    t.size("synth.max_sentence_tokens", s.max_sentence_tokens, at_least(1), ">= 1");
    t.size("synth.vocab_per_class", s.vocab_per_class, at_least(1), ">= 1");
    t.size("synth.shared_vocab", s.shared_vocab, any(), ">= 0");
    t.real("synth.keyword_fraction", s.keyword_fraction, within(0, 1), "0..1");
    t.u64("synth.seed", s.seed);

    auto& a = c.augment;
    t.interval("augment.crop_area_ratio", a.crop_area_ratio, [](double x) { return x > 0.0 && x <= 1.0; }, "(0,1]");
    t.real("augment.hflip_prob", a.hflip_prob, within(0, 1), "0..1");
    t.interval("augment.rotation_degrees", a.affine_degrees, within(-180, 180), "-180..180");
    t.real("augment.max_translate_frac", a.max_translate_frac, [](double x) { return x >= 0.0 && x < 1.0; }, "[0,1)");
    t.interval("augment.scale", a.affine_scale, positive(), "> 0");
    t.interval("augment.brightness", a.brightness, positive(), "> 0");
    t.interval("augment.contrast", a.contrast, positive(), "> 0");
    t.interval("augment.blur_sigma", a.blur_sigma, at_least(0), ">= 0");
    t.size("augment.output_size", a.output_size, at_least(8), ">= 8");

    auto& m = c.model;
    t.sizes("model.image_channels", m.image_channels, 1);
    t.size("model.conv_kernel", m.conv_kernel, at_least(1), ">= 1");
    t.size("model.conv_stride", m.conv_stride, at_least(1), ">= 1");
    t.size("model.image_size", m.image_size, at_least(1), ">= 1");
    t.size("model.vocab_size", m.vocab_size, at_least(1), ">= 1");
    t.size("model.embed_dim", m.embed_dim, at_least(1), ">= 1");
    t.size("model.n_attention_layers", m.n_attention_layers, any(), ">= 0");
    t.size("model.n_heads", m.n_heads, at_least(1), ">= 1");
    t.size("model.ffn_dim", m.ffn_dim, at_least(1), ">= 1");
    t.flag("model.position_encoding", m.position_encoding);
    t.size("model.projection_hidden", m.projection_hidden, at_least(1), ">= 1");
    t.size("model.projection_dim", m.projection_dim, at_least(2), ">= 2");
    t.choice("model.projection_mode", m.projection_mode, [](ProjectionMode p) { return to_string(p); },
             projection_mode_from_string);
    t.size("model.binary_width", m.binary_width, at_least(1), ">= 1");
    t.size("model.binary_hidden", m.binary_hidden, at_least(1), ">= 1");

    t.real("loss.temperature", c.loss.temperature, positive(), "> 0");
    t.real("loss.lambda", c.loss.lambda, within(0, 1), "0..1");

    auto& tr = c.train;
    t.real("train.learning_rate", tr.learning_rate, positive(), "> 0");
    t.real("train.weight_decay", tr.weight_decay, at_least(0), ">= 0");
    t.size("train.batch_size", tr.batch_size, at_least(2), ">= 2");
    t.size("train.eval_interval_steps", tr.eval_interval_steps, at_least(1), ">= 1");
    t.real("train.anneal_factor", tr.anneal_factor, [](double x) { return x > 0.0 && x <= 1.0; }, "(0,1]");
    t.size("train.anneal_patience", tr.anneal_patience, at_least(1), ">= 1");
    t.size("train.stop_after", tr.stop_after, at_least(1), ">= 1");
    t.size("train.validation_size", tr.validation_size, at_least(2), ">= 2");
    t.choice("train.objective", tr.objective, [](Objective o) { return to_string(o); }, objective_from_string);
    t.names("train.freeze", tr.freeze);
    t.size("train.min_tokens", c.min_tokens, at_least(1), ">= 1");
    t.flag("train.checkpoint_every_eval", c.checkpoint_every_eval);

    auto probe_fields = [&t](const std::string& p, ProbeConfig& o) {
        t.real(p + ".learning_rate", o.learning_rate, positive(), "> 0");
        t.real(p + ".weight_decay", o.weight_decay, at_least(0), ">= 0");
        t.size(p + ".batch_size", o.batch_size, at_least(1), ">= 1");
        t.size(p + ".max_epochs", o.max_epochs, at_least(1), ">= 1");
        t.size(p + ".anneal_patience", o.anneal_patience, at_least(1), ">= 1");
        t.real(p + ".anneal_factor", o.anneal_factor, [](double x) { return x > 0.0 && x <= 1.0; }, "(0,1]");
        t.real(p + ".dropout", o.dropout, [](double x) { return x >= 0.0 && x < 1.0; }, "[0,1)");
    };
    probe_fields("probe", c.probe.optimizer);
    t.real("probe.fraction", c.probe.fraction, [](double x) { return x > 0.0 && x <= 1.0; }, "(0,1]");
    t.size("probe.train_size", c.probe.train_size, at_least(2), ">= 2");
    t.size("probe.validation_size", c.probe.validation_size, at_least(1), ">= 1");
    t.size("probe.test_size", c.probe.test_size, at_least(1), ">= 1");

    probe_fields("finetune", c.finetune.head);
    t.real("finetune.warmup_lr", c.finetune.warmup_lr, positive(), "> 0");
    t.size("finetune.warmup_steps", c.finetune.warmup_steps, any(), ">= 0");
    t.real("finetune.encoder_lr", c.finetune.encoder_lr, at_least(0), ">= 0");

    auto& r = c.retrieval;
    t.size("retrieval.n_query", r.n_query, at_least(1), ">= 1");
    t.size("retrieval.n_candidate", r.n_candidate, at_least(1), ">= 1");
    t.size("retrieval.text_queries_per_class", r.text_queries_per_class, any(), ">= 0");
    t.size("retrieval.text_query_tokens", r.text_query_tokens, at_least(1), ">= 1");
    t.sizes("retrieval.k", r.k, 1);

    auto& g = c.gradcheck;
    t.real("gradcheck.epsilon", g.epsilon, positive(), "> 0");
    t.real("gradcheck.tolerance", g.tolerance, positive(), "> 0");
    t.size("gradcheck.coords_per_tensor", g.coords_per_tensor, at_least(1), ">= 1");
    t.size("gradcheck.batch_size", g.batch_size, at_least(2), ">= 2");
    t.size("gradcheck.seeds", g.seeds, at_least(1), ">= 1");
    t.flag("gradcheck.tiny_model", g.tiny_model);

    t.text("paths.corpus", c.paths.corpus);
    t.text("paths.eval_corpus", c.paths.eval_corpus);
    t.text("paths.checkpoint", c.paths.checkpoint);
    t.text("paths.split", c.paths.split);
    t.text("paths.vocab", c.paths.vocab);
    return t;
}

}  // namespace

std::vector<std::string> config_keys() {
    RunConfig c;
    std::vector<std::string> keys;
    for (const auto& f : table_for(c).fields) keys.push_back(f.key);
    return keys;
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    auto table = table_for(cfg);
    std::map<std::string, std::size_t> seen;
    std::istringstream in(text);
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(lineno, "expected 'key = value'");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        const auto it = std::find_if(table.fields.begin(), table.fields.end(), [&](const Field& f) { return f.key == key; });
        if (it == table.fields.end()) throw ConfigError(lineno, "unknown key '" + key + "'");
        if (auto [pos, fresh] = seen.emplace(key, lineno); !fresh)
            throw ConfigError(lineno, "duplicate key '" + key + "' (first set on line " + std::to_string(pos->second) + ")");
        try {
            it->set(value);
        } catch (const TypeError& e) {
            throw ConfigError(lineno, "type error for '" + key + "': " + e.what());
        } catch (const RangeError& e) {
            throw ConfigError(lineno, "range error for '" + key + "': " + e.what());
        }
    }
    try {
        cfg.validate();
    } catch (const ContractViolation& e) {
        throw ConfigError(0, std::string("invalid configuration: ") + e.what());
    }
    return cfg;
}

RunConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::string echo_config(const RunConfig& cfg) {
    RunConfig copy = cfg;
    std::ostringstream os;
    std::string section;
    for (const auto& f : table_for(copy).fields) {
        const auto dot = f.key.find('.');
        const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
        if (sec != section) {
            os << '\n';
            section = sec;
        }
        os << f.key << " = " << f.get() << '\n';
    }
    return os.str();
}

bool same_effective_config(const RunConfig& a, const RunConfig& b) { return echo_config(a) == echo_config(b); }

}  // namespace convirt
