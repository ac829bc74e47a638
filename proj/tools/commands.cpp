#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "png_panel.hpp"
#include "voxelsr/io/dataset.hpp"
#include "voxelsr/io/nifti.hpp"
#include "voxelsr/io/raw.hpp"
#include "voxelsr/kspace/kspace.hpp"
#include "voxelsr/metrics/metrics.hpp"
#include "voxelsr/models/checkpoint.hpp"
#include "voxelsr/models/summary.hpp"
#include "voxelsr/train/gradcheck.hpp"
#include "voxelsr/train/infer.hpp"
#include "voxelsr/train/trainer.hpp"

namespace voxelsr::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

// ------------------------------------------------------------------ helpers

std::array<std::int64_t, 3> parse_triplet(const std::string& text, const std::string& what) {
    std::vector<std::int64_t> v;
    std::stringstream ss(text);
    for (std::string part; std::getline(ss, part, ',');) {
        try {
            std::size_t used = 0;
            v.push_back(std::stoll(part, &used));
            if (used != part.size()) throw std::invalid_argument(part);
        } catch (const std::exception&) {
            throw UsageError(what + ": \"" + text + "\" is not N or N,N,N");
        }
    }
    if (v.size() == 1) return {v[0], v[0], v[0]};
    if (v.size() != 3) throw UsageError(what + ": \"" + text + "\" is not N or N,N,N");
    return {v[0], v[1], v[2]};
}

kspace::Factors parse_factors(const std::string& text) {
    const auto t = parse_triplet(text, "--factors");
    kspace::Factors f{};
    for (std::size_t a = 0; a < 3; ++a) {
        if (t[a] < 1) throw UsageError("--factors must be positive, got " + text);
        f[a] = static_cast<int>(t[a]);
    }
    return f;
}

kspace::Interp parse_interp(const std::string& s) {
    if (s == "nearest") return kspace::Interp::nearest;
    if (s == "linear") return kspace::Interp::linear;
    if (s == "cubic") return kspace::Interp::cubic;
    throw UsageError("interpolation \"" + s + "\" is not nearest, linear or cubic");
}

std::string interp_name(kspace::Interp i) {
    switch (i) {
        case kspace::Interp::nearest: return "nearest";
        case kspace::Interp::linear: return "linear";
        case kspace::Interp::cubic: return "cubic";
    }
    return "?";
}

bool is_volume_file(const fs::path& p) {
    const auto ext = p.extension().string();
    return ext == ".nii" || ext == ".hdr" || ext == ".vol";
}

std::string subject_of(const fs::path& p) { return p.stem().string(); }

fs::path require_exists(const std::string& path, const std::string& what) {
    if (!fs::exists(path)) throw UsageError(what + " does not exist: " + path);
    return path;
}

// Files given directly, plus the volume files directly inside given directories.
std::vector<fs::path> collect_volumes(const std::vector<std::string>& inputs, const std::string& what) {
    std::vector<fs::path> out;
    for (const auto& in : inputs) {
        const fs::path p = require_exists(in, what);
        if (fs::is_directory(p)) {
            std::vector<fs::path> found;
            for (const auto& e : fs::directory_iterator(p)) {
                if (e.is_regular_file() && is_volume_file(e.path())) found.push_back(e.path());
            }
            std::sort(found.begin(), found.end());
            if (found.empty()) throw UsageError(what + " " + in + " holds no .nii, .hdr or .vol files");
            out.insert(out.end(), found.begin(), found.end());
        } else {
            out.push_back(p);
        }
    }
    return out;
}

Volume load_subject(const fs::path& p) {
    Volume v = io::read_volume(p);
    v.subject_id = subject_of(p);
    return v;
}

// nii: float32 NIfTI-1. vol: float64 raw, bit-exact.
fs::path save_volume(const Volume& v, const fs::path& dir, const std::string& format) {
    fs::create_directories(dir);
    const fs::path path = dir / (v.subject_id + "." + format);
    if (format == "nii") {
        io::write_nifti(v, path);
    } else {
        io::write_raw(v, path, io::RawType::float64);
    }
    return path;
}

void add_volume_artifact(Run& run, const fs::path& path) {
    run.manifest.add_artifact(*run.out, path);
    if (path.extension() == ".vol") run.manifest.add_artifact(*run.out, fs::path(path.string() + ".json"));
}

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw UsageError("cannot read " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError(p.string() + " is not valid JSON: " + e.what());
    }
}

// "a.b.c=value": value is parsed as JSON when it parses, else kept as a string.
void apply_override(json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key.path=value, got " + assignment);
    const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    json* node = &cfg;
    std::stringstream ss(key);
    std::vector<std::string> parts;
    for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        json& next = (*node)[parts[i]];
        if (next.is_null()) next = json::object();
        if (!next.is_object()) throw UsageError("--set " + key + ": " + parts[i] + " is not an object");
        node = &next;
    }
    (*node)[parts.back()] = value;
}

void list_artifacts(Run& run, const std::set<std::string>& volatile_names = {}) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(*run.out)) {
        if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) run.manifest.add_artifact(*run.out, f, volatile_names.count(f.filename().string()) > 0);
}

// ------------------------------------------------------------------ degrade

struct DegradeOptions {
    std::vector<std::string> inputs;
    int phantoms = 0;
    std::string shape = "64,64,64";
    std::uint64_t seed = 0;
    std::string recipe = "blobs_plus_tubes";
    std::string factors = "1,2,2";
    std::string interp = "linear";
    std::string format = "nii";
    std::string normalize = "minmax";
    std::string out;
};

void degrade(const DegradeOptions& o, Run& run) {
    if (o.inputs.empty() == (o.phantoms == 0)) throw UsageError("degrade needs exactly one of --input or --phantoms");
    const auto factors = parse_factors(o.factors);
    const auto interp = parse_interp(o.interp);
    run.out = o.out;
    std::vector<Volume> hr;
    json source;
    if (o.phantoms > 0) {
        const auto shape = parse_triplet(o.shape, "--shape");
        const auto recipe = io::parse_recipe(o.recipe);
        for (int i = 0; i < o.phantoms; ++i) {
            auto v = io::synth_phantom(shape, o.seed + static_cast<std::uint64_t>(i), recipe);
            char id[32];
            std::snprintf(id, sizeof id, "phantom%03d", i);
            v.subject_id = id;
            hr.push_back(std::move(v));
        }
        source = {{"phantoms", o.phantoms}, {"shape", shape}, {"seed", o.seed}, {"recipe", io::to_string(recipe)}};
        run.manifest.seed = o.seed;
    } else {
        for (const auto& p : collect_volumes(o.inputs, "input")) {
            run.manifest.add_input(p);
            if (p.extension() == ".vol") run.manifest.add_input(fs::path(p.string() + ".json"));
            hr.push_back(load_subject(p));
            if (o.normalize == "minmax") io::normalize_unit_range(hr.back());
        }
        source = {{"inputs", o.inputs}, {"normalize", o.normalize}};
    }
    run.manifest.config = {{"source", source},
                           {"factors", factors},
                           {"interp", interp_name(interp)},
                           {"format", o.format}};
    const auto start = Clock::now();
    for (const auto& v : hr) {
        Volume lr = kspace::lr_simulate(v, factors, interp);
        lr.subject_id = v.subject_id;
        lr.voxel_size = v.voxel_size;
        add_volume_artifact(run, save_volume(lr, *run.out / "volumes" / "lr", o.format));
        add_volume_artifact(run, save_volume(v, *run.out / "volumes" / "hr", o.format));
        std::cout << v.subject_id << ' ' << extent_str(v.shape) << '\n';
    }
    run.manifest.throughput = {{"subjects", hr.size()}, {"seconds", seconds_since(start)}};
}

// ------------------------------------------------------------------ train

struct TrainOptions {
    std::string config;
    std::string phase = "pretrain";
    std::string init;
    std::string critic_init;
    std::string out;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> steps;
};

struct DataSets {
    std::vector<train::SubjectPair> train, validation;
};

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

// Fills defaults into `data` so the manifest holds the effective values.
DataSets load_data(json& data, const fs::path& base, Manifest& manifest) {
    const std::set<std::string> known{"source", "count",  "validation", "shape",  "seed",
                                      "recipe", "factors", "interp", "normalize", "train_dir", "validation_dir"};
    for (const auto& [k, v] : data.items()) {
        if (!known.count(k)) throw UsageError("data: unknown key \"" + k + "\"");
    }
    const std::string source = data.value("source", std::string("phantoms"));
    data["source"] = source;
    const std::vector<int> fv = data.value("factors", std::vector<int>{1, 2, 2});
    if (fv.size() != 3) throw UsageError("data.factors needs three entries");
    const kspace::Factors factors{fv[0], fv[1], fv[2]};
    data["factors"] = factors;
    const auto interp = parse_interp(data.value("interp", std::string("linear")));
    data["interp"] = interp_name(interp);

    std::vector<Volume> train_hr, val_hr;
    if (source == "phantoms") {
        const int count = data.value("count", 48), validation = data.value("validation", 8);
        if (count < 2 || validation < 1 || validation >= count) {
            throw UsageError("data: need 1 <= validation < count, got " + std::to_string(validation) + " of " +
                             std::to_string(count));
        }
        const auto shape = data.value("shape", std::array<std::int64_t, 3>{64, 64, 64});
        const auto seed = data.value("seed", std::uint64_t{1000});
        const auto recipe = io::parse_recipe(data.value("recipe", std::string("blobs_plus_tubes")));
        data["count"] = count;
        data["validation"] = validation;
        data["shape"] = shape;
        data["seed"] = seed;
        data["recipe"] = io::to_string(recipe);
        for (int i = 0; i < count; ++i) {
            auto v = io::synth_phantom(shape, seed + static_cast<std::uint64_t>(i), recipe);
            char id[32];
            std::snprintf(id, sizeof id, "phantom%03d", i);
            v.subject_id = id;
            (i < count - validation ? train_hr : val_hr).push_back(std::move(v));
        }
    } else if (source == "files") {
        const auto normalize = data.value("normalize", std::string("minmax"));
        if (normalize != "minmax" && normalize != "none") throw UsageError("data.normalize must be minmax or none");
        data["normalize"] = normalize;
        for (const auto* key : {"train_dir", "validation_dir"}) {
            if (!data.contains(key)) throw UsageError(std::string("data.source files needs data.") + key);
            const fs::path dir = resolve(base, data[key].get<std::string>());
            manifest.add_input(require_exists(dir.string(), std::string("data.") + key));
            auto& dst = std::string(key) == "train_dir" ? train_hr : val_hr;
            for (const auto& p : collect_volumes({dir.string()}, std::string("data.") + key)) {
                dst.push_back(load_subject(p));
                if (normalize == "minmax") io::normalize_unit_range(dst.back());
            }
        }
    } else {
        throw UsageError("data.source \"" + source + "\" is not phantoms or files");
    }
    return {train::make_pairs(train_hr, factors, interp), train::make_pairs(val_hr, factors, interp)};
}

template <typename T>
void train_with(const train::TrainConfig& tc, const models::GeneratorConfig& gcfg, const TrainOptions& o,
                const DataSets& data, Run& run) {
    models::ModelParams<T> generator =
        o.init.empty() ? models::build_generator<T>(gcfg, tc.seed) : models::load_checkpoint<T>(o.init);
    if (!o.init.empty()) {
        const auto* loaded = std::get_if<models::GeneratorConfig>(&generator.config());
        if (!loaded) throw UsageError("--init " + o.init + " does not hold a generator");
        if (!(*loaded == gcfg)) {
            throw UsageError("--init " + o.init + " holds " + models::render(*loaded) + " but the config asks for " +
                             models::render(gcfg));
        }
    }
    std::optional<models::ModelParams<T>> critic;
    if (!o.critic_init.empty()) critic = models::load_checkpoint<T>(o.critic_init);

    train::TrainSink sink;
    sink.out_dir = *run.out;
    sink.on_validation = [](const train::ValidationRow& r) {
        std::cout << "step " << r.step << " " << r.phase << " validation l1 " << r.l1 << " nrmse " << r.nrmse << '\n'
                  << std::flush;
    };
    const auto start = Clock::now();
    try {
        auto result = train::train<T>(tc, std::move(generator), std::move(critic), data.train, data.validation, sink);
        const double secs = seconds_since(start);
        run.manifest.throughput = {{"steps", result.steps.size()},
                                   {"seconds", secs},
                                   {"steps_per_second", secs > 0 ? static_cast<double>(result.steps.size()) / secs : 0.0}};
    } catch (const train::NumericalError&) {
        run.manifest.throughput = {{"seconds", seconds_since(start)}};
        list_artifacts(run);
        throw;
    }
    list_artifacts(run, tc.log_wall_time ? std::set<std::string>{"metrics.csv"} : std::set<std::string>{});
}

void train_cmd(const TrainOptions& o, Run& run) {
    if (o.phase != "pretrain" && o.phase != "gan") throw UsageError("--phase must be pretrain or gan, got " + o.phase);
    if (o.phase == "gan" && o.init.empty()) {
        throw UsageError(
            "the gan phase starts from a pretrained generator: pass --init <checkpoint> from a pretrain run");
    }
    run.out = o.out;
    const fs::path config_path = require_exists(o.config, "config");
    run.manifest.add_input(config_path);
    if (!o.init.empty()) run.manifest.add_input(require_exists(o.init, "--init"));
    if (!o.critic_init.empty()) run.manifest.add_input(require_exists(o.critic_init, "--critic-init"));

    json cfg = read_json_file(config_path);
    if (!cfg.is_object()) throw UsageError("config must be a JSON object");
    for (const auto& a : o.overrides) apply_override(cfg, a);
    for (const auto& [k, v] : cfg.items()) {
        if (k != "model" && k != "precision" && k != "data" && k != "train") {
            throw UsageError("config: unknown key \"" + k + "\" (model, precision, data, train)");
        }
    }
    json train_json = cfg.value("train", json::object());
    if (o.seed) train_json["seed"] = *o.seed;
    if (o.steps) train_json[o.phase == "gan" ? "gan_steps" : "pretrain_steps"] = *o.steps;
    if (o.phase == "pretrain") train_json["gan_steps"] = 0;
    if (o.phase == "gan") train_json["pretrain_steps"] = 0;
    const auto tc = train::TrainConfig::from_json(train_json.dump());

    const auto gcfg = models::parse_generator(cfg.value("model", std::string("b4u4:k16")));
    const std::string precision = cfg.value("precision", std::string("float32"));
    if (precision != "float32" && precision != "float64") {
        throw UsageError("precision must be float32 or float64, got " + precision);
    }
    json data_json = cfg.value("data", json::object());
    const auto data = load_data(data_json, config_path.parent_path(), run.manifest);

    run.manifest.seed = tc.seed;
    run.manifest.config = {{"model", models::render(gcfg)},
                           {"precision", precision},
                           {"phase", o.phase},
                           {"data", data_json},
                           {"train", json::parse(tc.to_json())}};
    if (!o.init.empty()) run.manifest.config["init"] = o.init;
    if (!o.critic_init.empty()) run.manifest.config["critic_init"] = o.critic_init;
    fs::create_directories(*run.out);
    if (precision == "float64") {
        train_with<double>(tc, gcfg, o, data, run);
    } else {
        train_with<float>(tc, gcfg, o, data, run);
    }
}

// ------------------------------------------------------------------ infer

struct InferCmdOptions {
    std::string model;
    std::vector<std::string> inputs;
    std::string patch = "32";
    int margin = 3;
    int batch = 1;
    std::string format = "nii";
    std::string precision = "auto";
    bool png = false;
    std::string ref;
    std::string slice;
    std::string out;
};

template <typename T>
void infer_with(const InferCmdOptions& o, const std::vector<fs::path>& inputs, Run& run) {
    const auto generator = models::load_checkpoint<T>(o.model);
    const auto* gcfg = std::get_if<models::GeneratorConfig>(&generator.config());
    if (!gcfg) throw UsageError("--model " + o.model + " does not hold a generator");
    train::InferOptions opt;
    opt.patch = parse_triplet(o.patch, "--patch");
    opt.margin = o.margin;
    opt.batch = o.batch;
    json subjects = json::array();
    double total_seconds = 0;
    std::int64_t total_voxels = 0;
    std::string norm_used;
    for (const auto& p : inputs) {
        const Volume lr = load_subject(p);
        train::InferReport report;
        const Volume sr = train::super_resolve(generator, lr, opt, &report);
        add_volume_artifact(run, save_volume(sr, *run.out / "volumes" / "sr", o.format));
        total_seconds += report.seconds;
        total_voxels += lr.size();
        norm_used = report.norm == models::NormUse::eval ? "running statistics" : "batch statistics";
        subjects.push_back({{"subject", lr.subject_id},
                            {"patches", report.patches},
                            {"seconds", report.seconds},
                            {"voxels_per_second", report.voxels_per_second}});
        std::cout << lr.subject_id << ": " << report.patches << " patches, " << report.seconds << " s, "
                  << report.voxels_per_second << " voxels/s\n";
        if (o.png) {
            std::vector<const Volume*> columns{&lr, &sr};
            std::optional<Volume> ref;
            if (!o.ref.empty()) {
                const auto matches = collect_volumes({o.ref}, "--ref");
                for (const auto& r : matches) {
                    if (subject_of(r) == lr.subject_id) ref = load_subject(r);
                }
                if (!ref) throw UsageError("--ref " + o.ref + " has no volume for subject " + lr.subject_id);
                columns.push_back(&*ref);
            }
            const Volume& window = ref ? *ref : lr;
            const auto [lo, hi] = std::minmax_element(window.data.begin(), window.data.end());
            const Extent3 center = o.slice.empty()
                                       ? Extent3{lr.shape[0] / 2, lr.shape[1] / 2, lr.shape[2] / 2}
                                       : parse_triplet(o.slice, "--slice");
            fs::create_directories(*run.out / "panels");
            const fs::path png = *run.out / "panels" / (lr.subject_id + ".png");
            write_slice_panel(png, columns, center, *lo, *hi);
            run.manifest.add_artifact(*run.out, png);
        }
    }
    run.manifest.config = {{"model", o.model},
                           {"architecture", models::render(*gcfg)},
                           {"precision", sizeof(T) == 8 ? "float64" : "float32"},
                           {"patch", opt.patch},
                           {"margin", opt.margin},
                           {"batch", opt.batch},
                           {"format", o.format},
                           {"norm", norm_used}};
    run.manifest.throughput = {{"subjects", subjects},
                               {"seconds", total_seconds},
                               {"voxels_per_second", total_seconds > 0 ? static_cast<double>(total_voxels) / total_seconds : 0.0}};
}

void infer_cmd(const InferCmdOptions& o, Run& run) {
    run.out = o.out;
    run.manifest.add_input(require_exists(o.model, "--model"));
    const auto inputs = collect_volumes(o.inputs, "input");
    for (const auto& p : inputs) {
        run.manifest.add_input(p);
        if (p.extension() == ".vol") run.manifest.add_input(fs::path(p.string() + ".json"));
    }
    if (!o.ref.empty()) run.manifest.add_input(require_exists(o.ref, "--ref"));
    std::string precision = o.precision;
    if (precision == "auto") precision = models::read_checkpoint_info(o.model).value_width == 8 ? "float64" : "float32";
    if (precision == "float64") {
        infer_with<double>(o, inputs, run);
    } else if (precision == "float32") {
        infer_with<float>(o, inputs, run);
    } else {
        throw UsageError("--precision must be auto, float32 or float64");
    }
}

// ------------------------------------------------------------------ evaluate

struct EvaluateOptions {
    std::string ref, test, out;
    std::string mode = "slicewise";
    int crop = 3;
    std::optional<double> mask;
    std::string label;
    std::string model;
    std::optional<double> time_s;
};

void evaluate_cmd(const EvaluateOptions& o, Run& run) {
    run.out = o.out;
    metrics::EvalOptions opt;
    opt.crop_margin = o.crop;
    opt.mask_threshold = o.mask;
    if (o.mode == "slicewise") {
        opt.ssim.mode = metrics::SsimMode::slicewise_2d;
    } else if (o.mode == "full3d") {
        opt.ssim.mode = metrics::SsimMode::full_3d;
    } else {
        throw UsageError("--mode must be slicewise or full3d, got " + o.mode);
    }
    std::map<std::string, fs::path> ref, test;
    for (const auto& p : collect_volumes({o.ref}, "--ref")) ref[subject_of(p)] = p;
    for (const auto& p : collect_volumes({o.test}, "--test")) test[subject_of(p)] = p;
    std::vector<std::string> only_ref, only_test;
    for (const auto& [id, p] : ref) {
        if (!test.count(id)) only_ref.push_back(id);
    }
    for (const auto& [id, p] : test) {
        if (!ref.count(id)) only_test.push_back(id);
    }
    if (!only_ref.empty() || !only_test.empty()) {
        std::string msg = "subject sets differ;";
        auto join = [](const std::vector<std::string>& v) {
            std::string s;
            for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
            return s;
        };
        if (!only_ref.empty()) msg += " missing from --test: " + join(only_ref) + ";";
        if (!only_test.empty()) msg += " missing from --ref: " + join(only_test) + ";";
        msg.pop_back();
        throw UsageError(msg);
    }
    run.manifest.add_input(o.ref);
    run.manifest.add_input(o.test);

    std::vector<metrics::MetricsRow> rows;
    for (const auto& [id, p] : ref) {
        auto row = metrics::evaluate_subject(load_subject(p), load_subject(test.at(id)), opt);
        row.subject_id = id;
        rows.push_back(row);
    }
    metrics::TableRow table;
    table.config = o.label.empty() ? fs::path(o.test).filename().string() : o.label;
    table.summary = metrics::aggregate(rows);
    if (!o.model.empty()) {
        run.manifest.add_input(require_exists(o.model, "--model"));
        const auto cfg = models::parse_generator(models::read_checkpoint_info(o.model).config);
        table.params = models::count_parameters(cfg);
        table.macs = models::count_macs(cfg);
    }
    table.time_s = o.time_s.value_or(0.0);

    fs::create_directories(*run.out);
    {
        std::ofstream m(*run.out / "metrics.csv");
        metrics::write_rows_csv(m, rows);
        std::ofstream t(*run.out / "table.csv");
        metrics::write_table_csv(t, {table});
    }
    metrics::write_table_csv(std::cout, {table});
    run.manifest.add_artifact(*run.out, *run.out / "metrics.csv");
    run.manifest.add_artifact(*run.out, *run.out / "table.csv");
    run.manifest.config = {{"mode", o.mode}, {"crop", o.crop}, {"label", table.config}};
    if (o.mask) run.manifest.config["mask_threshold"] = *o.mask;
}

// ------------------------------------------------------------------ summarize, gradcheck, split

void summarize_cmd(const std::string& arch, std::optional<int> growth, bool csv, const std::string& out, Run& run) {
    auto cfg = models::parse_generator(arch);
    if (growth) {
        cfg.growth = *growth;
        cfg.validate();
    }
    const auto s = models::summarize(cfg);
    if (csv) {
        models::write_csv(s, std::cout);
    } else {
        models::render_table(s, std::cout, models::published_parameter_count(cfg));
    }
    run.manifest.config = {{"architecture", models::render(cfg)}};
    if (!out.empty()) {
        run.out = out;
        fs::create_directories(*run.out);
        std::ofstream f(*run.out / "summary.csv");
        models::write_csv(s, f);
        f.close();
        run.manifest.add_artifact(*run.out, *run.out / "summary.csv");
    }
}

void gradcheck_cmd(const std::string& size, const std::string& out, Run& run) {
    if (size != "small" && size != "full") throw UsageError("--size must be small or full, got " + size);
    const auto start = Clock::now();
    const auto cases = train::run_gradcheck(size == "full" ? train::GradcheckSize::full : train::GradcheckSize::small,
                                            [](const train::GradcheckCase& c) {
                                                std::printf("%-4s %-42s order %d  error %.3e  tolerance %.0e  probes %zu\n",
                                                            c.passed() ? "ok" : "FAIL", c.name.c_str(), c.order,
                                                            c.error, c.tolerance, c.coordinates);
                                                std::fflush(stdout);
                                            });
    const auto failed = std::count_if(cases.begin(), cases.end(), [](const auto& c) { return !c.passed(); });
    std::printf("%zu cases, %ld failed, %.1f s\n", cases.size(), static_cast<long>(failed), seconds_since(start));
    run.manifest.config = {{"size", size}};
    run.manifest.throughput = {{"seconds", seconds_since(start)}};
    if (!out.empty()) {
        run.out = out;
        fs::create_directories(*run.out);
        std::ofstream f(*run.out / "gradcheck.csv");
        f << "case,order,error,tolerance,probes,passed\n";
        for (const auto& c : cases) {
            f << c.name << ',' << c.order << ',' << c.error << ',' << c.tolerance << ',' << c.coordinates << ','
              << (c.passed() ? 1 : 0) << '\n';
        }
        f.close();
        run.manifest.add_artifact(*run.out, *run.out / "gradcheck.csv");
    }
    if (failed > 0) throw CheckFailure(std::to_string(failed) + " gradient check(s) exceeded tolerance");
}

void split_cmd(const std::string& ids_path, std::uint64_t seed, const std::string& ratios, const std::string& out,
               Run& run) {
    run.out = out;
    run.manifest.seed = seed;
    std::ifstream in(require_exists(ids_path, "--ids"));
    run.manifest.add_input(ids_path);
    std::vector<std::string> ids;
    for (std::string line; std::getline(in, line);) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
        if (!line.empty()) ids.push_back(line);
    }
    std::array<double, 4> r{};
    std::stringstream ss(ratios);
    std::size_t n = 0;
    for (std::string part; std::getline(ss, part, ',');) {
        if (n == 4) throw UsageError("--ratios needs four numbers");
        try {
            r[n++] = std::stod(part);
        } catch (const std::exception&) {
            throw UsageError("--ratios: \"" + part + "\" is not a number");
        }
    }
    if (n != 4) throw UsageError("--ratios needs four numbers");
    io::SplitManifest split;
    try {
        split = io::make_split(ids, seed, r);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    fs::create_directories(*run.out);
    std::ofstream f(*run.out / "split.json");
    f << split.to_json() << '\n';
    f.close();
    run.manifest.add_artifact(*run.out, *run.out / "split.json");
    run.manifest.config = {{"ratios", r}};
    std::cout << split.train.size() << '/' << split.validation.size() << '/' << split.evaluation.size() << '/'
              << split.test.size() << '\n';
}

}  // namespace

// ------------------------------------------------------------------ registration

void add_degrade(CLI::App& app, Run& run) {
    auto o = std::make_shared<DegradeOptions>();
    auto* sub = app.add_subcommand("degrade", "Simulate LR acquisitions by k-space truncation");
    sub->add_option("--input", o->inputs, "HR volume files or directories");
    sub->add_option("--phantoms", o->phantoms, "Synthesize this many phantoms instead of reading inputs");
    sub->add_option("--shape", o->shape, "Phantom shape D,H,W")->capture_default_str();
    sub->add_option("--seed", o->seed, "First phantom seed")->capture_default_str();
    sub->add_option("--recipe", o->recipe, "smooth_blobs or blobs_plus_tubes")->capture_default_str();
    sub->add_option("--factors", o->factors, "Resolution reduction per axis")->capture_default_str();
    sub->add_option("--interp", o->interp, "nearest, linear or cubic")->capture_default_str();
    sub->add_option("--format", o->format, "nii or vol")->check(CLI::IsMember({"nii", "vol"}))->capture_default_str();
    sub->add_option("--normalize", o->normalize, "Intensity scaling of --input volumes: minmax (to [0,1]) or none")
        ->check(CLI::IsMember({"minmax", "none"}))
        ->capture_default_str();
    sub->add_option("--out", o->out, "Output directory")->required();
    sub->callback([o, &run] { run.action = [o, &run] { degrade(*o, run); }; });
}

void add_train(CLI::App& app, Run& run) {
    auto o = std::make_shared<TrainOptions>();
    auto* sub = app.add_subcommand("train", "Pretrain with L1 or continue as a WGAN-GP");
    sub->add_option("--config", o->config, "JSON run configuration")->required();
    sub->add_option("--phase", o->phase, "pretrain or gan")->capture_default_str();
    sub->add_option("--init", o->init, "Generator checkpoint to start from (required for gan)");
    sub->add_option("--critic-init", o->critic_init, "Critic checkpoint to start from");
    sub->add_option("--set", o->overrides, "Override a config value: key.path=value");
    sub->add_option("--seed", o->seed, "Override train.seed");
    sub->add_option("--steps", o->steps, "Override the step count of the chosen phase");
    sub->add_option("--out", o->out, "Output directory")->required();
    sub->callback([o, &run] { run.action = [o, &run] { train_cmd(*o, run); }; });
}

void add_infer(CLI::App& app, Run& run) {
    auto o = std::make_shared<InferCmdOptions>();
    auto* sub = app.add_subcommand("infer", "Super-resolve volumes patch by patch");
    sub->add_option("--model", o->model, "Generator checkpoint")->required();
    sub->add_option("--input", o->inputs, "LR volume files or directories (already on the HR grid)")->required();
    sub->add_option("--patch", o->patch, "Patch extent N or D,H,W")->capture_default_str();
    sub->add_option("--margin", o->margin, "Voxels discarded per patch face")->capture_default_str();
    sub->add_option("--batch", o->batch, "Patches per forward pass")->capture_default_str();
    sub->add_option("--format", o->format, "nii or vol")->check(CLI::IsMember({"nii", "vol"}))->capture_default_str();
    sub->add_option("--precision", o->precision, "auto, float32 or float64")->capture_default_str();
    sub->add_flag("--png", o->png, "Write LR | SR [| reference] slice panels");
    sub->add_option("--ref", o->ref, "Reference directory for the third panel column");
    sub->add_option("--slice", o->slice, "Panel slice indices z,y,x (default: center)");
    sub->add_option("--out", o->out, "Output directory")->required();
    sub->callback([o, &run] { run.action = [o, &run] { infer_cmd(*o, run); }; });
}

void add_evaluate(CLI::App& app, Run& run) {
    auto o = std::make_shared<EvaluateOptions>();
    auto* sub = app.add_subcommand("evaluate", "SSIM, PSNR and NRMSE per subject with a mean/std summary");
    sub->add_option("--ref", o->ref, "Reference volume directory")->required();
    sub->add_option("--test", o->test, "Test volume directory")->required();
    sub->add_option("--out", o->out, "Output directory")->required();
    sub->add_option("--mode", o->mode, "SSIM mode: slicewise or full3d")->capture_default_str();
    sub->add_option("--crop", o->crop, "Voxels cropped from every face")->capture_default_str();
    sub->add_option("--mask", o->mask, "Restrict PSNR and NRMSE to ref > threshold");
    sub->add_option("--label", o->label, "Config column of table.csv (default: test directory name)");
    sub->add_option("--model", o->model, "Checkpoint whose parameter and MAC counts go into table.csv");
    sub->add_option("--time", o->time_s, "Seconds per subject for table.csv");
    sub->callback([o, &run] { run.action = [o, &run] { evaluate_cmd(*o, run); }; });
}

void add_summarize(CLI::App& app, Run& run) {
    auto arch = std::make_shared<std::string>();
    auto growth = std::make_shared<std::optional<int>>();
    auto csv = std::make_shared<bool>(false);
    auto out = std::make_shared<std::string>();
    auto* sub = app.add_subcommand("summarize", "Layer table and parameter count of a generator");
    sub->add_option("--arch", *arch, std::string("Architecture, ") + std::string(models::generator_grammar))->required();
    sub->add_option("--growth", *growth, "Growth rate k (overrides :kN)");
    sub->add_flag("--csv", *csv, "Print CSV instead of the table");
    sub->add_option("--out", *out, "Also write summary.csv and a manifest here");
    sub->callback([=, &run] { run.action = [=, &run] { summarize_cmd(*arch, *growth, *csv, *out, run); }; });
}

void add_gradcheck(CLI::App& app, Run& run) {
    auto size = std::make_shared<std::string>("small");
    auto out = std::make_shared<std::string>();
    auto* sub = app.add_subcommand("gradcheck", "Finite-difference gradient checks in 64-bit");
    sub->add_option("--size", *size, "small (sampled coordinates) or full")->capture_default_str();
    sub->add_option("--out", *out, "Also write gradcheck.csv and a manifest here");
    sub->callback([=, &run] { run.action = [=, &run] { gradcheck_cmd(*size, *out, run); }; });
}

void add_split(CLI::App& app, Run& run) {
    auto ids = std::make_shared<std::string>();
    auto seed = std::make_shared<std::uint64_t>(0);
    auto ratios = std::make_shared<std::string>("780,111,111,111");
    auto out = std::make_shared<std::string>();
    auto* sub = app.add_subcommand("split", "Seeded train/validation/evaluation/test split of subject ids");
    sub->add_option("--ids", *ids, "Text file with one subject id per line")->required();
    sub->add_option("--seed", *seed, "Shuffle seed")->capture_default_str();
    sub->add_option("--ratios", *ratios, "Part weights train,validation,evaluation,test")->capture_default_str();
    sub->add_option("--out", *out, "Output directory")->required();
    sub->callback([=, &run] { run.action = [=, &run] { split_cmd(*ids, *seed, *ratios, *out, run); }; });
}

}  // namespace voxelsr::cli
