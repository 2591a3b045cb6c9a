#include "umigrat/pipeline.hpp"

#include <chrono>
#include <fstream>

#include <json.hpp>

#include "umigrat/rng.hpp"

namespace umigrat {

namespace {

using nlohmann::json;
using clock_type = std::chrono::steady_clock;

std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

double median_of_or_zero(std::vector<double> v) {
    return v.empty() ? 0.0 : median_of(std::move(v));
}

struct Timer {
    clock_type::time_point t0 = clock_type::now();
    double ms() const {
        return std::chrono::duration<double, std::milli>(clock_type::now() - t0).count();
    }
};

void write_json_file(const std::filesystem::path& path, const json& j) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), "report: cannot open " + tmp.string());
        out << j.dump(2) << "\n";
        require(out.good(), "report: write failed");
    }
    std::filesystem::rename(tmp, path);
}

} // namespace

Pipeline::Pipeline(ExperimentConfig cfg) : cfg_(std::move(cfg)), out_(cfg_.output_dir) {
    cfg_.finalize();
    cfg_.validate();
    std::filesystem::create_directories(artifacts_dir());
    std::filesystem::create_directories(reports_dir());
    if (cfg_.export_traces) std::filesystem::create_directories(out_ / "traces");
    seeds_.resize(cfg_.ensemble_seeds);
    for (std::size_t s = 0; s < seeds_.size(); ++s)
        seeds_[s].seed = derive_seed(cfg_.seed, "ensemble", s);

    // previous manifest, if any, drives the stage cache
    const std::filesystem::path manifest_path = out_ / "manifest.json";
    if (std::filesystem::exists(manifest_path)) {
        try {
            std::ifstream in(manifest_path);
            json j = json::parse(in);
            for (const auto& st : j.at("stages")) {
                StageLog log;
                log.key_hex = st.at("key").get<std::string>();
                log.status = st.at("status").get<std::string>();
                for (const auto& a : st.at("outputs"))
                    log.outputs.emplace_back(a.at("path").get<std::string>(),
                                             a.at("fingerprint").get<std::string>());
                previous_[st.at("name").get<std::string>()] = std::move(log);
            }
        } catch (...) {
            previous_.clear(); // unreadable manifest: recompute everything
        }
    }
}

std::uint64_t Pipeline::stage_key(const std::string& name) const {
    std::uint64_t h = cfg_.fingerprint();
    h = fnv1a(std::string_view(name), h);
    h = fnv1a(std::string_view(kToolVersion), h);
    return h;
}

std::string Pipeline::file_fingerprint_hex(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    require(in.good(), "manifest: cannot open " + file.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return hex64(fnv1a(bytes.data(), bytes.size()));
}

bool Pipeline::outputs_match_previous(const std::string& name, std::uint64_t key,
                                      const std::vector<std::filesystem::path>& files) const {
    const auto it = previous_.find(name);
    if (it == previous_.end() || it->second.key_hex != hex64(key)) return false;
    if (it->second.outputs.size() != files.size()) return false;
    for (std::size_t i = 0; i < files.size(); ++i) {
        if (!std::filesystem::exists(files[i])) return false;
        if (it->second.outputs[i].first != files[i].string()) return false;
        try {
            if (file_fingerprint_hex(files[i]) != it->second.outputs[i].second) return false;
        } catch (...) {
            return false;
        }
    }
    return true;
}

void Pipeline::log_stage(const std::string& name, std::uint64_t key,
                         const std::string& status, double wall_ms,
                         const std::vector<std::filesystem::path>& files) {
    StageLog log;
    log.key_hex = hex64(key);
    log.status = status;
    log.wall_ms = wall_ms;
    for (const auto& f : files) log.outputs.emplace_back(f.string(), file_fingerprint_hex(f));
    stages_[name] = std::move(log);
}

Dataset Pipeline::natural_slice(const SeedState& st, std::size_t offset,
                                std::size_t count) const {
    require(st.natural && st.natural->size() >= offset + count,
            "pipeline: natural dataset slice out of range");
    Dataset out;
    out.spec = st.natural->spec;
    out.items.assign(st.natural->items.begin() + static_cast<long>(offset),
                     st.natural->items.begin() + static_cast<long>(offset + count));
    return out;
}

Dataset Pipeline::shifted_slice(const SeedState& st, std::size_t offset,
                                std::size_t count) const {
    require(st.shifted && st.shifted->size() >= offset + count,
            "pipeline: shifted dataset slice out of range");
    Dataset out;
    out.spec = st.shifted->spec;
    out.degenerate_shift = st.shifted->degenerate_shift;
    out.items.assign(st.shifted->items.begin() + static_cast<long>(offset),
                     st.shifted->items.begin() + static_cast<long>(offset + count));
    return out;
}

// ---------------------------------------------------------------------------
// Stages

void Pipeline::stage_data() {
    const std::string name = "data";
    const std::uint64_t key = stage_key(name);
    std::vector<std::filesystem::path> files;
    for (std::size_t s = 0; s < seeds_.size(); ++s) {
        files.push_back(artifacts_dir() / ("natural_" + std::to_string(s) + ".bin"));
        files.push_back(artifacts_dir() / ("shifted_" + std::to_string(s) + ".bin"));
    }

    Timer timer;
    const bool cached = outputs_match_previous(name, key, files);
    try {
        for (std::size_t s = 0; s < seeds_.size(); ++s) {
            SeedState& st = seeds_[s];
            if (!cached) {
                DatasetSpec nat;
                nat.kind = DatasetKind::Natural;
                nat.count = cfg_.natural_count;
                nat.height = cfg_.image_height;
                nat.width = cfg_.image_width;
                nat.octaves = cfg_.octaves;
                nat.seed = derive_seed(st.seed, "data-natural");
                save_dataset(files[2 * s], sample_natural(nat), st.seed);

                DatasetSpec shf = nat;
                shf.kind = DatasetKind::Shifted;
                shf.count = cfg_.shifted_count;
                shf.shift = cfg_.shift;
                shf.seed = derive_seed(st.seed, "data-shifted");
                save_dataset(files[2 * s + 1], sample_shifted(shf, nat), st.seed);
            }
            // downstream always consumes the on-disk copy
            st.natural = load_dataset(files[2 * s]);
            st.shifted = load_dataset(files[2 * s + 1]);
        }
    } catch (const Error& e) {
        throw StageError(name, e.what());
    }
    log_stage(name, key, cached ? "cached" : "computed", timer.ms(), files);
}

void Pipeline::stage_foundation() {
    if (!seeds_.front().natural) stage_data();
    const std::string name = "foundation";
    const std::uint64_t key = stage_key(name);
    std::vector<std::filesystem::path> files;
    for (std::size_t s = 0; s < seeds_.size(); ++s)
        files.push_back(artifacts_dir() / ("foundation_" + std::to_string(s) + ".bin"));

    Timer timer;
    const bool cached = outputs_match_previous(name, key, files);
    try {
        for (std::size_t s = 0; s < seeds_.size(); ++s) {
            SeedState& st = seeds_[s];
            if (!cached) {
                FoundationSpec spec{cfg_.arch, cfg_.train};
                const Dataset train = natural_slice(st, 0, cfg_.train.sample_count);
                FoundationResult res =
                    build_foundation(spec, derive_seed(st.seed, "foundation"), train);
                save_model(files[s], res.model, st.seed);
            }
            st.foundation = load_model(files[s]);
        }
    } catch (const Error& e) {
        throw StageError(name, e.what());
    }
    log_stage(name, key, cached ? "cached" : "computed", timer.ms(), files);
}

void Pipeline::stage_victims() {
    if (!seeds_.front().foundation) stage_foundation();
    const std::string name = "victims";
    const std::uint64_t key = stage_key(name);
    std::vector<std::filesystem::path> files;
    for (std::size_t s = 0; s < seeds_.size(); ++s)
        for (std::size_t v = 0; v < cfg_.victims.size(); ++v)
            files.push_back(artifacts_dir() /
                            ("victim_" + std::to_string(s) + "_" + std::to_string(v) + ".bin"));

    Timer timer;
    const bool cached = outputs_match_previous(name, key, files);
    try {
        std::size_t fi = 0;
        for (std::size_t s = 0; s < seeds_.size(); ++s) {
            SeedState& st = seeds_[s];
            st.victims.clear();
            for (std::size_t v = 0; v < cfg_.victims.size(); ++v, ++fi) {
                if (!cached) {
                    const VictimSpec& spec = cfg_.victims[v];
                    const Dataset* d_tau_ptr = nullptr;
                    Dataset d_tau;
                    if (spec.mode != VictimMode::LowRank) {
                        d_tau = shifted_slice(st, cfg_.eval_inputs, cfg_.finetune_samples);
                        d_tau_ptr = &d_tau;
                    }
                    VictimResult res = derive_victim(*st.foundation, spec.mode, spec.strength,
                                                     derive_seed(st.seed, "victim", v),
                                                     d_tau_ptr, cfg_.finetune);
                    save_model(files[fi], res.victim, st.seed);
                }
                st.victims.push_back(load_model(files[fi]));
            }
        }
    } catch (const Error& e) {
        throw StageError(name, e.what());
    }
    log_stage(name, key, cached ? "cached" : "computed", timer.ms(), files);
}

void Pipeline::stage_umi() {
    if (!seeds_.front().foundation) stage_foundation();
    const std::string name = "umi";
    const std::uint64_t key = stage_key(name);
    std::vector<std::filesystem::path> files;
    for (std::size_t s = 0; s < seeds_.size(); ++s)
        files.push_back(artifacts_dir() / ("umi_" + std::to_string(s) + ".bin"));

    Timer timer;
    const bool cached = outputs_match_previous(name, key, files);
    try {
        for (std::size_t s = 0; s < seeds_.size(); ++s) {
            SeedState& st = seeds_[s];
            if (!cached) {
                UmiConfig uc;
                uc.meta_rounds = cfg_.umi_rounds;
                uc.eta = cfg_.umi_eta;
                uc.inner_steps = cfg_.umi_inner_steps;
                uc.budget = cfg_.budget();
                uc.lambda = cfg_.umi_lambda;
                uc.lambda_factor = cfg_.umi_lambda_factor;
                uc.holdout_fraction = cfg_.umi_holdout_fraction;
                uc.init_noise_scale = cfg_.umi_init_noise_scale;
                uc.seed = derive_seed(st.seed, "umi-train");
                const Dataset corpus =
                    natural_slice(st, cfg_.train.sample_count, cfg_.umi_corpus);
                UmiTrainResult res = train_umi(*st.foundation, corpus, uc);
                save_umi(files[s], res.artifact, st.seed);
            }
            st.umi = load_umi(files[s]);
        }
    } catch (const Error& e) {
        throw StageError(name, e.what());
    }
    log_stage(name, key, cached ? "cached" : "computed", timer.ms(), files);
}

// ---------------------------------------------------------------------------
// Attacks + analyses + reports

Perturbation Pipeline::run_attack_method(AttackMethod method, const SequentialModel& surrogate,
                                         const Tensor& x, const SeedState& st,
                                         const Tensor& y_tilde, std::size_t input_index,
                                         AttackTrace* trace_out) const {
    const AttackBudget budget = cfg_.budget();
    AdaptSpec adapt;
    adapt.enabled = true;
    adapt.alpha_adp = cfg_.adapt_step();
    adapt.direction = cfg_.adapt_direction;
    adapt.y_tilde = y_tilde;

    const auto baseline_init = [&]() -> Perturbation {
        Perturbation p = Perturbation::zero(x, budget);
        if (cfg_.baseline_random_init) {
            Rng rng(derive_seed(st.seed, "attack-init", input_index));
            for (std::size_t i = 0; i < p.delta.numel(); ++i)
                p.delta[i] = rng.uniform(-budget.epsilon / 2.0, budget.epsilon / 2.0);
            p.delta = project(p.delta, x.reshaped(p.delta.shape()), budget);
        }
        return p;
    };

    AttackResult res;
    switch (method) {
        case AttackMethod::IFgsm: {
            const Perturbation init = baseline_init();
            res = ifgsm(surrogate, x, budget, &init);
            break;
        }
        case AttackMethod::MiFgsm: {
            const Perturbation init = baseline_init();
            res = mifgsm(surrogate, x, budget, &init);
            break;
        }
        case AttackMethod::UmiGrat: {
            require(st.umi.has_value(), "attack: umi artifact missing");
            res = gr_attack(surrogate, x, budget, st.umi->delta, adapt, cfg_.sigma,
                            derive_seed(st.seed, "grat", input_index));
            break;
        }
        case AttackMethod::UmiMiFgsm: {
            require(st.umi.has_value(), "attack: umi artifact missing");
            const Perturbation init = adapt_init(surrogate, x, st.umi->delta, y_tilde,
                                                 adapt.alpha_adp, adapt.direction, budget);
            res = mifgsm(surrogate, x, budget, &init);
            break;
        }
    }
    if (trace_out) *trace_out = res.trace;
    return std::move(res.perturbation);
}

void Pipeline::stage_experiment() {
    if (!seeds_.front().foundation) stage_foundation();
    if (seeds_.front().victims.empty()) stage_victims();
    const bool wants_umi =
        cfg_.umi_enabled &&
        (cfg_.method == AttackMethod::UmiGrat || cfg_.method == AttackMethod::UmiMiFgsm ||
         std::find(cfg_.reports.begin(), cfg_.reports.end(), "umi") != cfg_.reports.end());
    if (wants_umi && !seeds_.front().umi) stage_umi();

    const std::string name = "experiment";
    const std::uint64_t key = stage_key(name);

    const bool want_transfer =
        std::find(cfg_.reports.begin(), cfg_.reports.end(), "transfer") != cfg_.reports.end();
    const bool want_cosine =
        std::find(cfg_.reports.begin(), cfg_.reports.end(), "cosine") != cfg_.reports.end();
    const bool want_deviation =
        std::find(cfg_.reports.begin(), cfg_.reports.end(), "deviation") != cfg_.reports.end();
    const bool want_umi_report =
        std::find(cfg_.reports.begin(), cfg_.reports.end(), "umi") != cfg_.reports.end();

    std::vector<std::filesystem::path> files;
    if (want_transfer) {
        files.push_back(reports_dir() / "transfer_gap.csv");
        files.push_back(reports_dir() / "transfer_summary.json");
    }
    if (want_cosine) {
        files.push_back(reports_dir() / "cosine.csv");
        files.push_back(reports_dir() / "cosine_summary.json");
    }
    if (want_deviation) {
        files.push_back(reports_dir() / "deviation.csv");
        files.push_back(reports_dir() / "deviation_summary.json");
    }
    if (want_umi_report) files.push_back(reports_dir() / "umi_summary.json");

    Timer timer;
    if (outputs_match_previous(name, key, files)) {
        log_stage(name, key, "cached", timer.ms(), files);
        return;
    }

    try {
        const AttackBudget budget = cfg_.budget();
        const std::string baseline = to_string(AttackMethod::MiFgsm);
        const std::string main_method = to_string(cfg_.method);
        std::vector<AttackMethod> methods{AttackMethod::MiFgsm};
        if (cfg_.method != AttackMethod::MiFgsm) methods.push_back(cfg_.method);

        json transfer_summary, cosine_summary, deviation_summary, umi_summary;
        transfer_summary["seeds"] = cfg_.ensemble_seeds;
        transfer_summary["baseline"] = baseline;
        transfer_summary["method"] = main_method;
        transfer_summary["per_seed"] = json::array();
        cosine_summary = transfer_summary;
        deviation_summary["per_seed"] = json::array();
        umi_summary["per_seed"] = json::array();

        std::optional<CsvWriter> transfer_csv, cosine_csv, deviation_csv;
        if (want_transfer) {
            transfer_csv.emplace(reports_dir() / "transfer_gap.csv");
            const std::vector<std::string> h{"seed",          "method",      "victim",
                                             "input",         "surrogate_loss",
                                             "victim_loss",   "drop_ratio",  "ratio_defined"};
            transfer_csv->header(h);
        }
        if (want_cosine) {
            cosine_csv.emplace(reports_dir() / "cosine.csv");
            const std::vector<std::string> h{"seed", "victim", "input", "method",
                                             "cosine_to_whitebox"};
            cosine_csv->header(h);
        }
        if (want_deviation) {
            deviation_csv.emplace(reports_dir() / "deviation.csv");
            const std::vector<std::string> h{"seed",         "victim",   "input",
                                             "deviation_norm", "gap_norm", "residual_norm",
                                             "cosine_deviation_vs_gap"};
            deviation_csv->header(h);
        }

        std::size_t transfer_loss_wins = 0, transfer_ratio_wins = 0, cosine_wins = 0;

        for (std::size_t s = 0; s < seeds_.size(); ++s) {
            SeedState& st = seeds_[s];
            const SequentialModel& surrogate = *st.foundation;
            const Dataset corpus = natural_slice(st, cfg_.train.sample_count, cfg_.umi_corpus);
            const Tensor y_tilde = natural_mean_embedding(surrogate, corpus);

            // attacks over the evaluation inputs
            std::map<std::string, std::vector<Perturbation>> perturbations;
            std::vector<Tensor> inputs;
            for (std::size_t i = 0; i < cfg_.eval_inputs; ++i)
                inputs.push_back(st.shifted->items[i]);
            for (AttackMethod m : methods) {
                auto& list = perturbations[to_string(m)];
                for (std::size_t i = 0; i < inputs.size(); ++i) {
                    Timer at;
                    AttackTrace trace;
                    list.push_back(
                        run_attack_method(m, surrogate, inputs[i], st, y_tilde, i, &trace));
                    method_attack_ms_total_[to_string(m)] += at.ms();
                    method_attack_count_[to_string(m)] += 1;
                    if (cfg_.export_traces) {
                        CsvWriter tw(out_ / "traces" /
                                     ("seed" + std::to_string(s) + "_" + to_string(m) +
                                      "_input" + std::to_string(i) + ".csv"));
                        const std::vector<std::string> h{"iteration", "loss", "step_norm",
                                                         "wall_ms"};
                        tw.header(h);
                        for (std::size_t k = 0; k < trace.iterations.size(); ++k) {
                            const AttackIteration& it = trace.iterations[k];
                            const std::vector<std::string> row{
                                std::to_string(k + 1), CsvWriter::field(it.surrogate_loss),
                                CsvWriter::field(it.step_norm), CsvWriter::field(it.wall_ms)};
                            tw.row(row);
                        }
                    }
                }
            }

            // transfer gap
            if (want_transfer) {
                json seed_entry;
                seed_entry["seed"] = s;
                for (AttackMethod m : methods) {
                    const auto& list = perturbations[to_string(m)];
                    std::vector<double> victim_losses, ratios;
                    for (std::size_t v = 0; v < st.victims.size(); ++v) {
                        const SequentialModel* vp = &st.victims[v];
                        TransferReport rep = transfer_gap(list, inputs, surrogate,
                                                          std::span<const SequentialModel* const>(
                                                              &vp, 1),
                                                          cfg_.loss_norm);
                        for (const TransferRow& row : rep.rows) {
                            const std::vector<std::string> r{
                                std::to_string(s),
                                to_string(m),
                                cfg_.victims[v].label(),
                                std::to_string(row.input_index),
                                CsvWriter::field(row.surrogate_loss),
                                CsvWriter::field(row.victim_loss),
                                CsvWriter::field(row.drop_ratio),
                                row.ratio_defined ? "1" : "0"};
                            transfer_csv->row(r);
                            victim_losses.push_back(row.victim_loss);
                            if (row.ratio_defined) ratios.push_back(row.drop_ratio);
                        }
                    }
                    seed_entry["methods"][to_string(m)] = {
                        {"median_victim_loss", median_of_or_zero(victim_losses)},
                        {"median_drop_ratio", median_of_or_zero(ratios)}};
                }
                if (methods.size() > 1) {
                    const auto& mm = seed_entry["methods"];
                    const bool loss_win = mm.at(main_method).at("median_victim_loss") >
                                          mm.at(baseline).at("median_victim_loss");
                    const bool ratio_win = mm.at(main_method).at("median_drop_ratio") >
                                           mm.at(baseline).at("median_drop_ratio");
                    seed_entry["method_beats_baseline_victim_loss"] = loss_win;
                    seed_entry["method_beats_baseline_drop_ratio"] = ratio_win;
                    transfer_loss_wins += loss_win ? 1 : 0;
                    transfer_ratio_wins += ratio_win ? 1 : 0;
                }
                transfer_summary["per_seed"].push_back(seed_entry);
            }

            // cosine to victim white-box perturbations
            if (want_cosine) {
                json seed_entry;
                seed_entry["seed"] = s;
                std::map<std::string, std::vector<double>> cos_by_method;
                for (std::size_t v = 0; v < st.victims.size(); ++v) {
                    for (std::size_t i = 0; i < cfg_.cosine_inputs; ++i) {
                        // white-box reference on the victim's own feature loss
                        Perturbation ref_init = Perturbation::zero(inputs[i], budget);
                        Rng rng(derive_seed(st.seed, "whitebox-init", v, i));
                        for (std::size_t k = 0; k < ref_init.delta.numel(); ++k)
                            ref_init.delta[k] =
                                rng.uniform(-budget.epsilon / 2.0, budget.epsilon / 2.0);
                        ref_init.delta =
                            project(ref_init.delta,
                                    inputs[i].reshaped(ref_init.delta.shape()), budget);
                        const AttackResult ref =
                            ifgsm(st.victims[v], inputs[i], budget, &ref_init);
                        for (AttackMethod m : methods) {
                            const CosineResult c = perturbation_cosine(
                                perturbations[to_string(m)][i].delta, ref.perturbation.delta);
                            const std::vector<std::string> r{
                                std::to_string(s), cfg_.victims[v].label(), std::to_string(i),
                                to_string(m), CsvWriter::field(c.value)};
                            cosine_csv->row(r);
                            cos_by_method[to_string(m)].push_back(c.value);
                        }
                    }
                }
                for (auto& [mname, vals] : cos_by_method)
                    seed_entry["methods"][mname] = {{"median_cosine", median_of_or_zero(vals)}};
                if (methods.size() > 1) {
                    const auto& mm = seed_entry["methods"];
                    const bool win = mm.at(main_method).at("median_cosine") >
                                     mm.at(baseline).at("median_cosine");
                    seed_entry["method_beats_baseline"] = win;
                    cosine_wins += win ? 1 : 0;
                }
                cosine_summary["per_seed"].push_back(seed_entry);
            }

            // update-deviation report
            if (want_deviation) {
                json seed_entry;
                seed_entry["seed"] = s;
                std::vector<double> residual_ratio;
                for (std::size_t v = 0; v < st.victims.size(); ++v) {
                    const WeightDelta delta = WeightDelta::between(st.victims[v], surrogate);
                    for (std::size_t i = 0; i < cfg_.deviation_inputs; ++i) {
                        // seed the outer loss with the feature direction of a
                        // random feasible perturbation
                        Rng rng(derive_seed(st.seed, "deviation-seed", v, i));
                        Tensor d0(inputs[i].shape());
                        for (std::size_t k = 0; k < d0.numel(); ++k)
                            d0[k] = rng.uniform(-budget.epsilon, budget.epsilon);
                        d0 = project(d0, inputs[i], budget);
                        Tensor diff = sub(surrogate.final_embedding(add(inputs[i], d0)),
                                          surrogate.final_embedding(inputs[i]));
                        const double n = diff.l2_norm();
                        if (n > 0.0) diff = scale(diff, 1.0 / n);
                        const DeviationReport rep =
                            deviation(surrogate, st.victims[v], delta, inputs[i], diff);
                        const std::vector<std::string> r{
                            std::to_string(s),
                            cfg_.victims[v].label(),
                            std::to_string(i),
                            CsvWriter::field(rep.deviation_norm),
                            CsvWriter::field(rep.gap_norm),
                            CsvWriter::field(rep.residual_norm),
                            CsvWriter::field(rep.cosine_deviation_vs_gap)};
                        deviation_csv->row(r);
                        if (rep.gap_norm > 0.0)
                            residual_ratio.push_back(rep.residual_norm / rep.gap_norm);
                    }
                }
                seed_entry["median_residual_over_gap"] = median_of_or_zero(residual_ratio);
                deviation_summary["per_seed"].push_back(seed_entry);
            }

            // universal-initialization value
            if (want_umi_report) {
                require(st.umi.has_value(), "umi report requested without umi stage");
                json seed_entry;
                seed_entry["seed"] = s;
                const Dataset eval_nat = natural_slice(
                    st, cfg_.train.sample_count + cfg_.umi_corpus, cfg_.umi_eval_count);
                const double umi_rate = fooling_rate(st.umi->delta, surrogate, eval_nat,
                                                     st.umi->lambda, budget);
                Tensor rand_delta(st.umi->delta.shape());
                Rng rng(derive_seed(st.seed, "umi-random-baseline"));
                const double norm_match = st.umi->delta.linf_norm();
                for (std::size_t k = 0; k < rand_delta.numel(); ++k)
                    rand_delta[k] = rng.uniform(-norm_match, norm_match);
                const double rand_rate =
                    fooling_rate(rand_delta, surrogate, eval_nat, st.umi->lambda, budget);
                seed_entry["umi_fooling_rate"] = umi_rate;
                seed_entry["random_fooling_rate"] = rand_rate;
                seed_entry["lambda"] = st.umi->lambda;

                AdaptSpec adapt;
                adapt.alpha_adp = cfg_.adapt_step();
                adapt.direction = cfg_.adapt_direction;
                adapt.y_tilde = natural_mean_embedding(surrogate, corpus);
                const Tensor zero_delta(st.umi->delta.shape());
                for (std::size_t ta : {std::size_t{1}, std::size_t{3}}) {
                    AttackBudget fast = budget;
                    fast.iterations = ta;
                    std::vector<double> umi_losses, zero_losses;
                    for (std::size_t i = 0; i < eval_nat.size(); ++i) {
                        const Tensor& x = eval_nat.items[i];
                        const std::uint64_t sd = derive_seed(st.seed, "fast-adapt", ta, i);
                        umi_losses.push_back(
                            gr_attack(surrogate, x, fast, st.umi->delta, adapt, cfg_.sigma, sd)
                                .trace.best_loss());
                        zero_losses.push_back(
                            gr_attack(surrogate, x, fast, zero_delta, adapt, cfg_.sigma, sd)
                                .trace.best_loss());
                    }
                    seed_entry["fast_adapt"][std::to_string(ta)] = {
                        {"umi_median_loss", median_of_or_zero(umi_losses)},
                        {"zero_median_loss", median_of_or_zero(zero_losses)}};
                }
                umi_summary["per_seed"].push_back(seed_entry);
            }
        }

        if (want_transfer) {
            if (cfg_.method != AttackMethod::MiFgsm) {
                transfer_summary["method_wins_victim_loss"] = transfer_loss_wins;
                transfer_summary["method_wins_drop_ratio"] = transfer_ratio_wins;
            }
            transfer_csv->close();
            write_json_file(reports_dir() / "transfer_summary.json", transfer_summary);
        }
        if (want_cosine) {
            if (cfg_.method != AttackMethod::MiFgsm)
                cosine_summary["method_wins"] = cosine_wins;
            cosine_csv->close();
            write_json_file(reports_dir() / "cosine_summary.json", cosine_summary);
        }
        if (want_deviation) {
            deviation_csv->close();
            write_json_file(reports_dir() / "deviation_summary.json", deviation_summary);
        }
        if (want_umi_report) write_json_file(reports_dir() / "umi_summary.json", umi_summary);
    } catch (const Error& e) {
        throw StageError(name, e.what());
    }

    log_stage(name, key, "computed", timer.ms(), files);
}

std::filesystem::path Pipeline::attack_single(std::size_t input_index, AttackMethod method) {
    if (!seeds_.front().foundation) stage_foundation();
    if ((method == AttackMethod::UmiGrat || method == AttackMethod::UmiMiFgsm) &&
        !seeds_.front().umi)
        stage_umi();
    SeedState& st = seeds_.front();
    require(input_index < st.shifted->size(), "attack: input index out of range");
    const Dataset corpus = natural_slice(st, cfg_.train.sample_count, cfg_.umi_corpus);
    const Tensor y_tilde = natural_mean_embedding(*st.foundation, corpus);
    AttackTrace trace;
    const Perturbation p =
        run_attack_method(method, *st.foundation, st.shifted->items[input_index], st, y_tilde,
                          input_index, &trace);
    const std::filesystem::path path =
        artifacts_dir() /
        ("attack_" + to_string(method) + "_" + std::to_string(input_index) + ".bin");
    save_perturbation(path, p, st.seed);
    if (cfg_.export_traces) {
        CsvWriter tw(out_ / "traces" /
                     ("attack_" + to_string(method) + "_" + std::to_string(input_index) +
                      ".csv"));
        const std::vector<std::string> h{"iteration", "loss", "step_norm", "wall_ms"};
        tw.header(h);
        for (std::size_t k = 0; k < trace.iterations.size(); ++k) {
            const AttackIteration& it = trace.iterations[k];
            const std::vector<std::string> row{std::to_string(k + 1),
                                               CsvWriter::field(it.surrogate_loss),
                                               CsvWriter::field(it.step_norm),
                                               CsvWriter::field(it.wall_ms)};
            tw.row(row);
        }
    }
    return path;
}

void Pipeline::write_manifest() {
    json j;
    j["tool"] = kToolVersion;
    j["seed"] = cfg_.seed;
    j["config_fingerprint"] = hex64(cfg_.fingerprint());
    j["stages"] = json::array();
    for (const auto& [name, log] : stages_) {
        json st;
        st["name"] = name;
        st["key"] = log.key_hex;
        st["status"] = log.status;
        st["wall_ms"] = log.wall_ms;
        st["outputs"] = json::array();
        for (const auto& [path, fp] : log.outputs)
            st["outputs"].push_back({{"path", path}, {"fingerprint", fp}});
        j["stages"].push_back(st);
    }
    j["attack_efficiency"] = json::object();
    for (const auto& [m, total] : method_attack_ms_total_) {
        const std::size_t n = method_attack_count_.at(m);
        j["attack_efficiency"][m] = {{"attacks", n},
                                     {"avg_ms_per_example", n ? total / double(n) : 0.0}};
    }
    write_json_file(out_ / "manifest.json", j);
}

void Pipeline::run() {
    stage_data();
    stage_foundation();
    stage_victims();
    if (cfg_.umi_enabled) stage_umi();
    stage_experiment();
    write_manifest();
}

} // namespace umigrat
