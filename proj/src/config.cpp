#include "umigrat/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace umigrat {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        require(pos == v.size(), "");
        return d;
    } catch (...) {
        fail("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const unsigned long long d = std::stoull(v, &pos);
        require(pos == v.size(), "");
        return d;
    } catch (...) {
        fail("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const int d = std::stoi(v, &pos);
        require(pos == v.size(), "");
        return d;
    } catch (...) {
        fail("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    const std::string s = lower(v);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    fail("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

Activation parse_activation(const std::string& v) {
    const std::string s = lower(v);
    if (s == "gelu") return Activation::Gelu;
    if (s == "tanh") return Activation::Tanh;
    if (s == "none") return Activation::None;
    fail("config: unknown activation '" + v + "'");
}

AdaptDirection parse_direction(const std::string& v) {
    const std::string s = lower(v);
    if (s == "ascent" || s == "algorithm-literal") return AdaptDirection::AlgorithmLiteral;
    if (s == "descent" || s == "minimize") return AdaptDirection::Minimize;
    fail("config: unknown adapt direction '" + v + "'");
}

VictimSpec parse_victim_spec(const std::string& v) {
    const std::size_t at = v.find('@');
    require(at != std::string::npos,
            "config: victim spec '" + v + "' must look like mode@strength");
    const std::string mode = lower(trim(v.substr(0, at)));
    VictimSpec spec;
    if (mode == "lowrank")
        spec.mode = VictimMode::LowRank;
    else if (mode == "finetune")
        spec.mode = VictimMode::FineTune;
    else if (mode == "both")
        spec.mode = VictimMode::Both;
    else
        fail("config: unknown victim mode '" + mode + "'");
    spec.strength = parse_double("victims.specs", trim(v.substr(at + 1)));
    return spec;
}

} // namespace

std::string to_string(AttackMethod m) {
    switch (m) {
        case AttackMethod::IFgsm: return "ifgsm";
        case AttackMethod::MiFgsm: return "mifgsm";
        case AttackMethod::UmiGrat: return "umi-grat";
        case AttackMethod::UmiMiFgsm: return "umi-mifgsm";
    }
    return "?";
}

AttackMethod attack_method_from_string(const std::string& s) {
    const std::string v = lower(trim(s));
    if (v == "ifgsm") return AttackMethod::IFgsm;
    if (v == "mifgsm") return AttackMethod::MiFgsm;
    if (v == "umi-grat" || v == "umigrat") return AttackMethod::UmiGrat;
    if (v == "umi-mifgsm" || v == "umi+mifgsm") return AttackMethod::UmiMiFgsm;
    fail("config: unknown attack method '" + s + "'");
}

std::string VictimSpec::label() const {
    std::string m = mode == VictimMode::LowRank   ? "lowrank"
                    : mode == VictimMode::FineTune ? "finetune"
                                                   : "both";
    std::ostringstream os;
    os << m << "@" << strength;
    return os.str();
}

void apply_override(ExperimentConfig& cfg, const std::string& section,
                    const std::string& key, const std::string& value) {
    const std::string s = lower(trim(section));
    const std::string k = lower(trim(key));
    const std::string v = trim(value);
    const std::string full = s + "." + k;

    if (s == "run") {
        if (k == "seed") cfg.seed = parse_u64(full, v);
        else if (k == "output_dir") cfg.output_dir = v;
        else fail("config: unknown key '" + full + "'");
    } else if (s == "data") {
        if (k == "natural_count") cfg.natural_count = parse_u64(full, v);
        else if (k == "shifted_count") cfg.shifted_count = parse_u64(full, v);
        else if (k == "image_height") cfg.image_height = parse_u64(full, v);
        else if (k == "image_width") cfg.image_width = parse_u64(full, v);
        else if (k == "octaves") cfg.octaves = parse_int(full, v);
        else if (k == "shift_gamma") cfg.shift.gamma = parse_double(full, v);
        else if (k == "shift_channel_mix") cfg.shift.channel_mix = parse_double(full, v);
        else if (k == "shift_band_low") cfg.shift.band_low = parse_int(full, v);
        else if (k == "shift_band_high") cfg.shift.band_high = parse_int(full, v);
        else fail("config: unknown key '" + full + "'");
    } else if (s == "foundation") {
        if (k == "modules") cfg.arch.module_count = parse_u64(full, v);
        else if (k == "width") cfg.arch.width = parse_u64(full, v);
        else if (k == "embedding") cfg.arch.embedding_dim = parse_u64(full, v);
        else if (k == "activation") cfg.arch.activation = parse_activation(v);
        else if (k == "layer_norm") cfg.arch.layer_norm = parse_bool(full, v);
        else if (k == "train_samples") cfg.train.sample_count = parse_u64(full, v);
        else if (k == "probe_count") cfg.train.probe_count = parse_u64(full, v);
        else if (k == "batch_size") cfg.train.batch_size = parse_u64(full, v);
        else if (k == "max_epochs") cfg.train.max_epochs = parse_u64(full, v);
        else if (k == "learning_rate") cfg.train.learning_rate = parse_double(full, v);
        else if (k == "momentum") cfg.train.momentum = parse_double(full, v);
        else if (k == "noise_std") cfg.train.noise_std = parse_double(full, v);
        else if (k == "target_loss") cfg.train.target_loss = parse_double(full, v);
        else fail("config: unknown key '" + full + "'");
    } else if (s == "victims") {
        if (k == "specs") {
            cfg.victims.clear();
            for (const std::string& item : split_list(v))
                cfg.victims.push_back(parse_victim_spec(item));
        } else if (k == "lowrank_rank") cfg.finetune.lowrank_rank = parse_u64(full, v);
        else if (k == "head_epochs") cfg.finetune.head_epochs = parse_u64(full, v);
        else if (k == "joint_epochs") cfg.finetune.joint_epochs = parse_u64(full, v);
        else if (k == "finetune_lr") cfg.finetune.learning_rate = parse_double(full, v);
        else if (k == "finetune_batch") cfg.finetune.batch_size = parse_u64(full, v);
        else if (k == "finetune_noise_std") cfg.finetune.noise_std = parse_double(full, v);
        else if (k == "holdout_fraction") cfg.finetune.holdout_fraction = parse_double(full, v);
        else if (k == "finetune_samples") cfg.finetune_samples = parse_u64(full, v);
        else fail("config: unknown key '" + full + "'");
    } else if (s == "umi") {
        if (k == "enabled") cfg.umi_enabled = parse_bool(full, v);
        else if (k == "rounds") cfg.umi_rounds = parse_u64(full, v);
        else if (k == "eta") cfg.umi_eta = parse_double(full, v);
        else if (k == "inner_steps") cfg.umi_inner_steps = parse_u64(full, v);
        else if (k == "corpus_count") cfg.umi_corpus = parse_u64(full, v);
        else if (k == "eval_count") cfg.umi_eval_count = parse_u64(full, v);
        else if (k == "holdout_fraction") cfg.umi_holdout_fraction = parse_double(full, v);
        else if (k == "lambda") cfg.umi_lambda = lower(v) == "auto" ? -1.0 : parse_double(full, v);
        else if (k == "lambda_factor") cfg.umi_lambda_factor = parse_double(full, v);
        else if (k == "init_noise_scale") cfg.umi_init_noise_scale = parse_double(full, v);
        else fail("config: unknown key '" + full + "'");
    } else if (s == "attack") {
        if (k == "method") cfg.method = attack_method_from_string(v);
        else if (k == "eps255") cfg.eps255 = parse_double(full, v);
        else if (k == "alpha255") cfg.alpha255 = parse_double(full, v);
        else if (k == "iterations") cfg.attack_iterations = parse_u64(full, v);
        else if (k == "loss_norm") cfg.loss_norm = parse_int(full, v);
        else if (k == "momentum_decay") cfg.momentum_decay = parse_double(full, v);
        else if (k == "sigma") cfg.sigma = parse_double(full, v);
        else if (k == "adapt_step255") cfg.adapt_step255 = parse_double(full, v);
        else if (k == "adapt_direction") cfg.adapt_direction = parse_direction(v);
        else if (k == "eval_inputs") cfg.eval_inputs = parse_u64(full, v);
        else if (k == "baseline_random_init") cfg.baseline_random_init = parse_bool(full, v);
        else if (k == "export_traces") cfg.export_traces = parse_bool(full, v);
        else fail("config: unknown key '" + full + "'");
    } else if (s == "analysis") {
        if (k == "reports") cfg.reports = split_list(lower(v));
        else if (k == "seeds") cfg.ensemble_seeds = parse_u64(full, v);
        else if (k == "cosine_inputs") cfg.cosine_inputs = parse_u64(full, v);
        else if (k == "deviation_inputs") cfg.deviation_inputs = parse_u64(full, v);
        else fail("config: unknown key '" + full + "'");
    } else {
        fail("config: unknown section '" + section + "'");
    }
}

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            require(t.back() == ']', "config line " + std::to_string(lineno) +
                                         ": malformed section header");
            section = trim(t.substr(1, t.size() - 2));
            require(!section.empty(),
                    "config line " + std::to_string(lineno) + ": empty section name");
            continue;
        }
        const std::size_t eq = t.find('=');
        require(eq != std::string::npos,
                "config line " + std::to_string(lineno) + ": expected key = value");
        require(!section.empty(),
                "config line " + std::to_string(lineno) + ": key outside any section");
        apply_override(cfg, section, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    cfg.finalize();
    cfg.validate();
    return cfg;
}

void ExperimentConfig::finalize() {
    arch.input_h = image_height;
    arch.input_w = image_width;
    train.octaves = octaves;
}

ExperimentConfig parse_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), "config: cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

void ExperimentConfig::validate() const {
    budget(); // validates the attack block
    require(!victims.empty(), "config: at least one victim spec required");
    for (const VictimSpec& v : victims)
        require(v.strength > 0.0 && v.strength <= 1.0,
                "config: victim strength must lie in (0, 1]");
    require(natural_count >= train.sample_count + umi_corpus + umi_eval_count,
            "config: natural_count must cover foundation training, the umi corpus "
            "and the umi evaluation split");
    bool needs_finetune = false;
    for (const VictimSpec& v : victims)
        if (v.mode != VictimMode::LowRank) needs_finetune = true;
    require(!needs_finetune || shifted_count >= eval_inputs + finetune_samples,
            "config: shifted_count must cover eval inputs plus finetune samples");
    require(shifted_count >= eval_inputs, "config: shifted_count below eval_inputs");
    require(eval_inputs >= 1, "config: eval_inputs must be positive");
    require(ensemble_seeds >= 1, "config: at least one ensemble seed");
    require(sigma >= 0.0, "config: sigma must be >= 0");
    require(adapt_step255 >= 0.0, "config: adapt step must be >= 0");
    require(cosine_inputs <= eval_inputs, "config: cosine_inputs exceeds eval_inputs");
    require(deviation_inputs <= eval_inputs, "config: deviation_inputs exceeds eval_inputs");
    require(arch.module_count >= 2, "config: at least two encoder modules");
    require(umi_holdout_fraction > 0.0 && umi_holdout_fraction < 1.0,
            "config: umi holdout fraction must lie in (0, 1)");
    for (const std::string& r : reports)
        require(r == "transfer" || r == "cosine" || r == "deviation" || r == "umi",
                "config: unknown report '" + r + "'");
}

std::string ExperimentConfig::canonical_string() const {
    std::ostringstream os;
    os.precision(17);
    os << "run.seed=" << seed << "\nrun.output_dir=" << output_dir << "\n";
    os << "data.natural_count=" << natural_count << "\ndata.shifted_count=" << shifted_count
       << "\ndata.image=" << image_height << "x" << image_width << "\ndata.octaves=" << octaves
       << "\ndata.shift=" << shift.gamma << "," << shift.channel_mix << "," << shift.band_low
       << "," << shift.band_high << "\n";
    os << "foundation.arch=" << arch.module_count << "," << arch.width << ","
       << arch.embedding_dim << "," << static_cast<int>(arch.activation) << ","
       << arch.layer_norm << "\n";
    os << "foundation.train=" << train.sample_count << "," << train.probe_count << ","
       << train.batch_size << "," << train.max_epochs << "," << train.learning_rate << ","
       << train.momentum << "," << train.noise_std << "," << train.target_loss << "\n";
    os << "victims=";
    for (const VictimSpec& v : victims) os << v.label() << ";";
    os << "\nvictims.ft=" << finetune.head_epochs << "," << finetune.joint_epochs << ","
       << finetune.batch_size << "," << finetune.learning_rate << "," << finetune.momentum
       << "," << finetune.noise_std << "," << finetune.holdout_fraction << ","
       << finetune.lowrank_rank << "," << finetune_samples << "\n";
    os << "umi=" << umi_enabled << "," << umi_rounds << "," << umi_eta << ","
       << umi_inner_steps << "," << umi_corpus << "," << umi_eval_count << ","
       << umi_holdout_fraction << "," << umi_lambda << "," << umi_lambda_factor << ","
       << umi_init_noise_scale << "\n";
    os << "attack=" << to_string(method) << "," << eps255 << "," << alpha255 << ","
       << attack_iterations << "," << loss_norm << "," << momentum_decay << "," << sigma
       << "," << adapt_step255 << "," << static_cast<int>(adapt_direction) << ","
       << eval_inputs << "," << baseline_random_init << "," << export_traces << "\n";
    os << "analysis=";
    for (const std::string& r : reports) os << r << ";";
    os << "," << ensemble_seeds << "," << cosine_inputs << "," << deviation_inputs << "\n";
    return os.str();
}

std::uint64_t ExperimentConfig::fingerprint() const { return fnv1a(canonical_string()); }

} // namespace umigrat
